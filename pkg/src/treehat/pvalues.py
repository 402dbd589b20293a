"""Node p-values for the means application.

One-way ANOVA with known noise level gives independent, exactly uniform null
p-values at every internal node.  The Simes combination over a subtree turns
them into intersection p-values that stay super-uniform but are dependent, so
they pair with the reshaped thresholds.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy import special


@dataclass(frozen=True)
class LeafObservations:
    y: np.ndarray
    sigma: float

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        if y.ndim != 1 or not np.all(np.isfinite(y)):
            raise ValueError("y must be a finite 1-d vector")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        object.__setattr__(self, "y", y)


@dataclass
class PValueAssignment:
    """P-values indexed by node id; leaves hold NaN."""

    values: np.ndarray
    provenance: str = "external"

    def __getitem__(self, u):
        return float(self.values[u])

    def validate(self, t):
        vals = self.values[t.internal]
        if self.values.shape != (t.n_nodes,):
            raise ValueError("p-value vector does not match the tree")
        if np.any(np.isnan(vals)):
            raise ValueError("some internal nodes have no p-value")
        if np.any((vals < 0) | (vals > 1)):
            raise ValueError("p-values must lie in [0, 1]")
        return self

    @classmethod
    def from_mapping(cls, t, mapping, provenance="external"):
        values = np.full(t.n_nodes, np.nan)
        for key, val in mapping.items():
            values[t.node(key)] = float(val)
        return cls(values, provenance)

    def to_mapping(self, t):
        return {t.labels[u]: float(self.values[u]) for u in t.internal}


def read_pvalues_csv(t, path):
    """Read a ``node,pvalue`` CSV.

    Raises ``ValueError`` naming the offending line or node.
    """
    values = np.full(t.n_nodes, np.nan)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["node", "pvalue"]:
            raise ValueError(f"{path}:1: expected header 'node,pvalue'")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise ValueError(f"{path}:{lineno}: expected 2 fields, got {len(row)}")
            name, raw = row[0].strip(), row[1].strip()
            try:
                u = t.node(name)
            except KeyError:
                raise ValueError(f"{path}:{lineno}: unknown node {name!r}") from None
            if t.is_leaf[u]:
                raise ValueError(f"{path}:{lineno}: node {name!r} is a leaf")
            try:
                val = float(raw)
            except ValueError:
                raise ValueError(f"{path}:{lineno}: bad p-value {raw!r}") from None
            if not 0 <= val <= 1:
                raise ValueError(f"{path}:{lineno}: p-value {val} outside [0, 1]")
            values[u] = val
    missing = [t.labels[u] for u in t.internal if np.isnan(values[u])]
    if missing:
        raise ValueError(f"{path}: missing p-value for node(s) {', '.join(missing)}")
    return PValueAssignment(values, "external")


def write_pvalues_csv(t, pv, fh):
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["node", "pvalue"])
    for u in t.internal:
        w.writerow([t.labels[u], f"{pv.values[u]:.17g}"])


# ----------------------------------------------------------------------
# special functions


def chi2_cdf(x, df):
    """CDF of the chi-square distribution (regularized lower incomplete gamma)."""
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise ValueError("chi2_cdf is defined for x >= 0")
    if np.any(np.asarray(df) < 1):
        raise ValueError("df must be >= 1")
    out = special.gammainc(np.asarray(df) / 2.0, x / 2.0)
    return out if out.ndim else float(out)


def chi2_sf(x, df):
    """Upper tail ``1 - chi2_cdf``, computed directly to keep small values accurate."""
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise ValueError("chi2_sf is defined for x >= 0")
    out = special.gammaincc(np.asarray(df) / 2.0, x / 2.0)
    return out if out.ndim else float(out)


def normal_cdf(x):
    out = special.ndtr(np.asarray(x, dtype=float))
    return out if out.ndim else float(out)


# ----------------------------------------------------------------------
# ANOVA and Simes


def _group_means(t, y):
    csum = np.concatenate([[0.0], np.cumsum(y)])
    start = t.leaf_start
    return (csum[start + t.n_leaves] - csum[start]) / t.n_leaves


def anova_statistics(t, y):
    """Between-children sum of squares ``sum_v |L_v| (ybar_v - ybar_u)^2`` per node.

    ``y`` is aligned with ``t.leaf_order``; leaf entries of the result are 0.
    """
    y = np.asarray(y, dtype=float)
    if y.shape != (t.p,):
        raise ValueError(f"expected {t.p} leaf observations, got {y.shape}")
    means = _group_means(t, y)
    stat = np.zeros(t.n_nodes)
    for u in t.internal:
        start, length = t.leaf_range(u)
        seg = y[start:start + length]
        if seg.min() == seg.max():
            continue  # exactly 0, free of prefix-sum rounding
        ch = np.array(t.children[u])
        stat[u] = np.sum(t.n_leaves[ch] * (means[ch] - means[u]) ** 2)
    return stat


def anova_pvalues(t, obs):
    """Known-variance one-way ANOVA p-value at every internal node."""
    raw = anova_statistics(t, obs.y)
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        stat = np.where(raw > 0, raw / obs.sigma**2, 0.0)
    values = np.full(t.n_nodes, np.nan)
    u = t.internal
    values[u] = chi2_sf(stat[u], t.deg[u] - 1)
    return PValueAssignment(values, "anova")


def anova_pvalue(t, obs, u):
    u = t.node(u)
    if t.deg[u] < 2:
        raise ValueError("ANOVA needs an internal node")
    return float(anova_pvalues(t, obs).values[u])


def anova_pvalues_pooled(t, y, sigma2_hat, df_resid):
    """F-test variant with an estimated variance ``sigma2_hat`` on ``df_resid`` df.

    A convenience for data without a known noise level; the false split rate
    guarantees assume known variance and do not cover this route.
    """
    if not sigma2_hat > 0 or not df_resid > 0:
        raise ValueError("need a positive variance estimate and residual df")
    stat = anova_statistics(t, y)
    values = np.full(t.n_nodes, np.nan)
    u = t.internal
    df1 = t.deg[u] - 1
    values[u] = special.fdtrc(df1, df_resid, stat[u] / df1 / sigma2_hat)
    return PValueAssignment(values, "anova-f")


def simes_combine(t, pv, a):
    """Simes p-value over the internal nodes of the subtree rooted at ``a`` (``a`` included)."""
    a = t.node(a)
    vals = np.asarray(pv.values if hasattr(pv, "values") else pv, dtype=float)
    block = np.arange(a, a + t.subtree_size[a])
    ps = np.sort(vals[block[~t.is_leaf[block]]], kind="stable")
    m = len(ps)
    return float(min(1.0, np.min(ps * m / np.arange(1, m + 1))))


def simes_pvalues(t, pv):
    values = np.full(t.n_nodes, np.nan)
    for u in t.internal:
        values[u] = simes_combine(t, pv, u)
    return PValueAssignment(values, "simes")
