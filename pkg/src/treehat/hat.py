"""Hierarchical aggregation testing (HAT).

Nodes are tested top-down, one depth at a time.  At depth ``d`` the number of
additional splits ``r*_d`` is the largest ``r`` with ``r <= R^d(r)``, where
``R^d(r)`` adds up ``deg(u) - 1`` over nodes whose p-value falls below the
node threshold ``alpha_u(r)``.  The root is rejected at initialisation and its
p-value is never compared with a threshold.

The threshold families:

``independent``
    harmonic-corrected levels, valid for independent null p-values.
``reshaped``
    levels shrunk by a per-depth reshaping function, valid under arbitrary
    dependence.
``independent-shifted`` / ``reshaped-shifted``
    the above minus ``epsilon0``, for p-values that are only approximately
    super-uniform (``P(p <= t) <= t + epsilon0``).
``lg``
    the Lynch-Guo hierarchical FDR step-up rule.  It counts rejections rather
    than splits and has no false-split-rate guarantee on non-binary trees.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

import numpy as np

from .metrics import rejection_to_partition

logger = logging.getLogger(__name__)


class ThresholdFamily(str, enum.Enum):
    INDEPENDENT = "independent"
    INDEPENDENT_SHIFTED = "independent-shifted"
    RESHAPED = "reshaped"
    RESHAPED_SHIFTED = "reshaped-shifted"
    LG = "lg"

    @property
    def shifted(self):
        return self in (ThresholdFamily.INDEPENDENT_SHIFTED, ThresholdFamily.RESHAPED_SHIFTED)

    @property
    def base(self):
        return {
            ThresholdFamily.INDEPENDENT_SHIFTED: ThresholdFamily.INDEPENDENT,
            ThresholdFamily.RESHAPED_SHIFTED: ThresholdFamily.RESHAPED,
        }.get(self, self)


class ReshapingRangeError(ValueError):
    """The harmonic range in the reshaping function is empty."""


@dataclass(frozen=True)
class HatConfig:
    alpha: float
    family: ThresholdFamily = ThresholdFamily.INDEPENDENT
    epsilon0: float = 0.0
    # "printed": sum 1/k up to the degree total at depth d;
    # "appendix": up to the degree total at depth d-1, minus one.
    beta_upper: str = "printed"

    def __post_init__(self):
        object.__setattr__(self, "family", ThresholdFamily(self.family))
        if not 0 < self.alpha < 1:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if not 0 <= self.epsilon0 < self.alpha:
            raise ValueError("epsilon0 must lie in [0, alpha)")
        if self.epsilon0 > 0 and not self.family.shifted:
            raise ValueError(f"epsilon0 > 0 requires a shifted family, not {self.family.value}")
        if self.beta_upper not in ("printed", "appendix"):
            raise ValueError("beta_upper must be 'printed' or 'appendix'")


@dataclass(frozen=True)
class DepthState:
    """Everything a threshold needs about the depth under test."""

    depth: int
    R_prev: int
    nodes: np.ndarray
    deg: np.ndarray
    n_leaves: np.ndarray
    parent_rejected: np.ndarray

    @property
    def deg_sum(self):
        return int(self.deg.sum())

    @property
    def r_max(self):
        return int(self.deg.sum() - len(self.nodes))


@dataclass
class RejectionTree:
    rejected: tuple
    per_depth_r: dict = field(default_factory=dict)
    R_cumulative: dict = field(default_factory=dict)
    R_at_rstar: dict = field(default_factory=dict)
    thresholds_used: dict = field(default_factory=dict)

    def self_consistent(self):
        return all(self.R_at_rstar[d] == r for d, r in self.per_depth_r.items())


# ----------------------------------------------------------------------
# thresholds


def _harmonic(n):
    """Harmonic numbers H[0..n]."""
    h = np.zeros(n + 1)
    h[1:] = np.cumsum(1.0 / np.arange(1, n + 1))
    return h


def partial_harmonic(lo, hi):
    """``1 + sum_{m=lo}^{hi} 1/m``; an empty range contributes nothing."""
    lo = np.asarray(lo)
    hi = np.asarray(hi)
    top = int(max(np.max(hi), 1))
    h = _harmonic(top)
    lo_c = np.clip(lo, 1, top + 1)
    hi_c = np.clip(hi, 0, top)
    s = np.where(hi >= lo, h[hi_c] - h[lo_c - 1], 0.0)
    return 1.0 + s


def threshold_independent(n_leaves, r, state, alpha, Delta, p):
    """Level for nodes with ``n_leaves`` leaves when ``r`` extra splits are assumed.

    Broadcasts over ``n_leaves`` and ``r``.  The parent-rejected indicator is
    applied by the caller through ``state.parent_rejected``.
    """
    r = np.asarray(r)
    m = state.R_prev + r
    hbar = partial_harmonic(m + 1, p - 1 - (state.r_max - r))
    num = alpha * np.asarray(n_leaves) * m
    return (1.0 / Delta) * num / (p * (1.0 - 1.0 / Delta**2) * hbar + num)


def reshaping_denominator(state, delta, upper_deg_sum):
    lo = state.depth * (delta - 1)
    hi = upper_deg_sum
    if lo > hi:
        raise ReshapingRangeError(
            f"reshaping sum at depth {state.depth} runs from {lo} to {hi}")
    k = np.arange(lo, hi + 1)
    return float(np.sum(1.0 / k))


def beta_reshape(x, state, delta, upper_deg_sum):
    return np.asarray(x) / reshaping_denominator(state, delta, upper_deg_sum)


def threshold_reshaped(n_leaves, r, state, alpha, Delta, delta, D, p, upper_deg_sum=None):
    if upper_deg_sum is None:
        upper_deg_sum = state.deg_sum
    beta = beta_reshape(state.R_prev + np.asarray(r), state, delta, upper_deg_sum)
    return alpha * np.asarray(n_leaves) * beta / (p * (Delta - 1.0 / Delta) * (D - 1))


def threshold_shifted(base, epsilon0):
    return np.maximum(np.asarray(base) - epsilon0, 0.0)


def threshold_lg(leaves_trunc, m_trunc, r, state, alpha, root_leaves_trunc):
    """Lynch-Guo level on the tree with its leaves removed.

    ``leaves_trunc`` counts leaves of the truncated tree below the node and
    ``m_trunc`` counts the node plus its descendants there.
    """
    m = np.asarray(m_trunc, dtype=float)
    ratio = np.asarray(leaves_trunc, dtype=float) / root_leaves_trunc
    return alpha * ratio * (m + state.R_prev + np.asarray(r) - 1) / m


# ----------------------------------------------------------------------
# the procedure


class _Layout:
    """Per-tree constants shared by every run of the procedure."""

    def __init__(self, t):
        self.t = t
        self.p = t.p
        self.D = t.max_depth
        self.Delta = t.max_degree
        self.delta = t.min_degree
        n = t.n_nodes
        internal = ~t.is_leaf
        # truncated tree: drop leaves; a node is a truncated leaf when all its
        # children are leaves
        trunc_leaf = np.zeros(n, dtype=bool)
        for u in t.internal:
            trunc_leaf[u] = all(t.is_leaf[c] for c in t.children[u])
        self.trunc_leaves = np.zeros(n, dtype=np.int64)
        self.trunc_size = np.zeros(n, dtype=np.int64)
        for u in range(n - 1, -1, -1):
            if internal[u]:
                self.trunc_leaves[u] += trunc_leaf[u]
                self.trunc_size[u] += 1
                if u:
                    self.trunc_leaves[t.parent[u]] += self.trunc_leaves[u]
                    self.trunc_size[t.parent[u]] += self.trunc_size[u]
        self.deg_sum_by_depth = {d: int(t.deg[t.internal_nodes_at_depth(d)].sum())
                                 for d in range(1, self.D + 1)}


_LAYOUTS = {}


def _layout(t):
    key = id(t)
    lay = _LAYOUTS.get(key)
    if lay is None or lay.t is not t:
        if len(_LAYOUTS) > 64:
            _LAYOUTS.clear()
        lay = _LAYOUTS[key] = _Layout(t)
    return lay


def node_thresholds(t, state, cfg, r):
    """Thresholds of every node in ``state.nodes`` for each value in ``r``.

    Returns an array of shape ``(len(r), len(state.nodes))`` clamped to
    ``[0, 1]``, with zeros where the parent is not rejected.
    """
    lay = _layout(t)
    r = np.atleast_1d(np.asarray(r))[:, None]
    fam = cfg.family.base
    if fam is ThresholdFamily.INDEPENDENT:
        thr = threshold_independent(state.n_leaves[None, :], r, state, cfg.alpha, lay.Delta, lay.p)
    elif fam is ThresholdFamily.RESHAPED:
        if cfg.beta_upper == "printed":
            upper = state.deg_sum
        else:
            upper = lay.deg_sum_by_depth[state.depth - 1] - 1
        thr = threshold_reshaped(state.n_leaves[None, :], r, state, cfg.alpha, lay.Delta,
                                 lay.delta, lay.D, lay.p, upper_deg_sum=upper)
    else:
        nodes = state.nodes
        thr = threshold_lg(lay.trunc_leaves[nodes][None, :], lay.trunc_size[nodes][None, :], r,
                           state, cfg.alpha, lay.trunc_leaves[t.root])
    if cfg.family.shifted:
        thr = threshold_shifted(thr, cfg.epsilon0)
    thr = np.clip(thr, 0.0, 1.0)
    return np.where(state.parent_rejected[None, :], thr, 0.0)


def _passes(pvals, thr, parent_rejected):
    # a zero level never rejects, so a p-value of exactly 0 under an
    # unrejected parent stays unrejected
    return (pvals <= thr) & (thr > 0) & parent_rejected


def split_function(t, pvals, state, cfg, r):
    """``R^d(r)`` evaluated at each entry of ``r``."""
    thr = node_thresholds(t, state, cfg, r)
    hit = _passes(pvals[state.nodes][None, :], thr, state.parent_rejected[None, :])
    weight = np.ones(len(state.nodes), dtype=np.int64) if cfg.family is ThresholdFamily.LG \
        else state.deg - 1
    return hit.astype(np.int64) @ weight


def fixed_point_r(t, pvals, cfg, state):
    """Largest ``r`` in ``0..r_max`` with ``r <= R^d(r)``, by a full scan.

    Returns ``(r_star, R_values)`` where ``R_values[r]`` is ``R^d(r)``.
    """
    r_max = len(state.nodes) if cfg.family is ThresholdFamily.LG else state.r_max
    rs = np.arange(r_max + 1)
    R = split_function(t, pvals, state, cfg, rs)
    ok = np.flatnonzero(rs <= R)
    return int(ok[-1]), R


def _as_array(t, pv):
    if hasattr(pv, "values"):
        pv = pv.values
    pvals = np.asarray(pv, dtype=float)
    if pvals.shape != (t.n_nodes,):
        raise ValueError(f"expected {t.n_nodes} node p-values, got shape {pvals.shape}")
    vals = pvals[t.internal]
    if np.any(np.isnan(vals)):
        missing = [t.labels[u] for u in t.internal if np.isnan(pvals[u])]
        raise ValueError(f"missing p-value for node(s) {', '.join(missing)}")
    if np.any((vals < 0) | (vals > 1)):
        bad = [t.labels[u] for u in t.internal if not 0 <= pvals[u] <= 1]
        raise ValueError(f"p-value outside [0, 1] for node(s) {', '.join(bad)}")
    return pvals


def run_hat(t, pv, cfg):
    """Run the procedure and return ``(RejectionTree, Partition)``.

    ``pv`` is a :class:`~treehat.pvalues.PValueAssignment` or an array indexed
    by node id (leaf entries are ignored).
    """
    pvals = _as_array(t, pv)
    rejected = np.zeros(t.n_nodes, dtype=bool)
    rejected[t.root] = True
    lg = cfg.family is ThresholdFamily.LG
    R_cum = 1 if lg else int(t.deg[t.root]) - 1
    out = RejectionTree(rejected=(), R_cumulative={1: R_cum})
    for d in range(2, t.max_depth + 1):
        nodes = t.internal_nodes_at_depth(d)
        if len(nodes) == 0:
            break
        parent_rej = rejected[t.parent[nodes]]
        if not parent_rej.any():
            break
        state = DepthState(depth=d, R_prev=R_cum, nodes=nodes, deg=t.deg[nodes],
                           n_leaves=t.n_leaves[nodes], parent_rejected=parent_rej)
        r_star, R = fixed_point_r(t, pvals, cfg, state)
        thr = node_thresholds(t, state, cfg, [r_star])[0]
        hit = _passes(pvals[nodes], thr, parent_rej)
        rejected[nodes[hit]] = True
        R_cum += r_star
        out.per_depth_r[d] = r_star
        out.R_at_rstar[d] = int(R[r_star])
        out.R_cumulative[d] = R_cum
        out.thresholds_used.update({int(u): float(x) for u, x in zip(nodes, thr)})
        if out.R_at_rstar[d] != r_star:
            logger.warning("self-consistency failed at depth %d: R(%d) = %d", d, r_star, R[r_star])
    out.rejected = tuple(int(u) for u in np.flatnonzero(rejected))
    return out, rejection_to_partition(t, out.rejected)
