"""Partitions of ordered leaves, barrier vectors and false-split accounting.

All proportions are returned as :class:`fractions.Fraction` so identities
between the group form and the barrier form can be checked exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np


class PartitionError(ValueError):
    pass


@dataclass(frozen=True)
class Partition:
    """Contiguous grouping of ``p`` ordered leaves.

    Stored as the sorted start positions of each group (the first is always 0).
    """

    starts: tuple
    p: int

    def __post_init__(self):
        s = tuple(int(x) for x in self.starts)
        if self.p < 1:
            raise PartitionError("p must be positive")
        if not s or s[0] != 0 or any(b <= a for a, b in zip(s, s[1:])) or s[-1] >= self.p:
            raise PartitionError(f"invalid group starts {s} for p={self.p}")
        object.__setattr__(self, "starts", s)

    @classmethod
    def from_sizes(cls, sizes):
        sizes = [int(x) for x in sizes]
        if any(x <= 0 for x in sizes):
            raise PartitionError("group sizes must be positive")
        return cls(tuple(np.cumsum([0] + sizes[:-1]).tolist()), sum(sizes))

    @classmethod
    def from_labels(cls, labels):
        """From a per-leaf group label sequence; equal labels must be contiguous."""
        labels = list(labels)
        starts = [0] + [i for i in range(1, len(labels)) if labels[i] != labels[i - 1]]
        part = cls(tuple(starts), len(labels))
        if len({labels[s] for s in starts}) != len(starts):
            raise PartitionError("group labels are not contiguous")
        return part

    @property
    def n_groups(self):
        return len(self.starts)

    @property
    def groups(self):
        """List of ``range`` objects over leaf positions."""
        ends = self.starts[1:] + (self.p,)
        return [range(a, b) for a, b in zip(self.starts, ends)]

    def labels(self):
        """Group index of each leaf position."""
        out = np.zeros(self.p, dtype=np.int64)
        out[list(self.starts[1:])] = 1
        return np.cumsum(out)


def partition_to_barriers(c):
    """Length ``p-1`` 0/1 vector; entry ``j`` marks a barrier after leaf ``j``."""
    bits = np.zeros(c.p - 1, dtype=np.int8)
    for s in c.starts[1:]:
        bits[s - 1] = 1
    return bits


def barriers_to_partition(bits):
    bits = np.asarray(bits, dtype=np.int64)
    if bits.ndim != 1 or np.any((bits != 0) & (bits != 1)):
        raise PartitionError("barrier vector must be a 1-d 0/1 vector")
    return Partition((0,) + tuple((np.flatnonzero(bits) + 1).tolist()), len(bits) + 1)


def barriers_to_string(bits):
    return "".join(str(int(b)) for b in bits)


def fdp_tpp_barrier(truth, achieved):
    """False discovery and true positive proportions of achieved barriers.

    No discoveries gives FDP 0; no true barriers gives TPP 1.
    """
    truth = np.asarray(truth, dtype=bool)
    achieved = np.asarray(achieved, dtype=bool)
    if truth.shape != achieved.shape:
        raise PartitionError("barrier vectors differ in length")
    n_disc = int(achieved.sum())
    n_true = int(truth.sum())
    false_disc = int(np.sum(achieved & ~truth))
    true_disc = int(np.sum(achieved & truth))
    fdp = Fraction(false_disc, n_disc) if n_disc else Fraction(0)
    tpp = Fraction(true_disc, n_true) if n_true else Fraction(1)
    return fdp, tpp


def _group_ids(c):
    if isinstance(c, Partition):
        return c.labels()
    return np.asarray(c)


def intersection_count(truth, achieved):
    """Number of (true group, achieved group) pairs that share a leaf."""
    a = _group_ids(truth)
    b = _group_ids(achieved)
    if a.shape != b.shape:
        raise PartitionError("partitions cover different numbers of leaves")
    return len(set(zip(a.tolist(), b.tolist())))


def fsp_tpp_groups(truth, achieved):
    """False split proportion and true positive proportion from group overlaps.

    Both arguments may be :class:`Partition` objects or per-leaf group label
    arrays, so non-contiguous groupings are accepted as well.
    """
    a = _group_ids(truth)
    b = _group_ids(achieved)
    if a.shape != b.shape:
        raise PartitionError("partitions cover different numbers of leaves")
    k = len(set(a.tolist()))
    m = len(set(b.tolist()))
    n_pairs = intersection_count(a, b)
    fsp = Fraction(n_pairs - k, max(m - 1, 1))
    tpp = Fraction(1) if k == 1 else 1 - Fraction(n_pairs - m, k - 1)
    return fsp, tpp


# ----------------------------------------------------------------------
# tree-structured rejections


@dataclass(frozen=True)
class SplitCounts:
    V: int
    R: int
    fsp: Fraction
    tpp: Fraction
    false_rejections: frozenset


def validate_rejection(t, rejected):
    """Return ``rejected`` as a sorted int array after checking it is a rooted subtree."""
    rej = np.array(sorted({t.node(u) for u in rejected}), dtype=np.int64)
    if rej.size == 0:
        return rej
    if rej[0] != t.root:
        raise PartitionError("a nonempty rejection set must contain the root")
    if np.any(t.is_leaf[rej]):
        raise PartitionError("leaves cannot be rejected")
    mask = np.zeros(t.n_nodes, dtype=bool)
    mask[rej] = True
    parents = t.parent[rej[1:]]
    if not np.all(mask[parents]):
        raise PartitionError("rejected nodes must have rejected parents")
    return rej


def bstar_labels(t, bstar):
    """Per-leaf-position group index induced by the node set ``bstar``."""
    lab = np.full(t.p, -1, dtype=np.int64)
    for g, u in enumerate(sorted(t.node(x) for x in bstar)):
        start, length = t.leaf_range(u)
        if np.any(lab[start:start + length] >= 0):
            raise PartitionError("bstar leaf sets overlap")
        lab[start:start + length] = g
    if np.any(lab < 0):
        raise PartitionError("bstar leaf sets do not cover all leaves")
    return lab


def bstar_partition(t, bstar):
    return Partition.from_labels(bstar_labels(t, bstar))


def rejection_to_partition(t, rejected):
    """Groups formed by the frontier of the rejected subtree."""
    rej = validate_rejection(t, rejected)
    mask = np.zeros(t.n_nodes, dtype=bool)
    mask[rej] = True
    starts = [0]
    for u in rej:
        for c in t.children[u]:
            if not mask[c]:
                starts.append(int(t.leaf_start[c]))
    return Partition(tuple(sorted(set(starts))), t.p)


def false_rejections(t, rejected, bstar):
    """Rejected nodes whose leaves all fall in one ``bstar`` group."""
    lab = bstar_labels(t, bstar)
    out = []
    for u in validate_rejection(t, rejected):
        start, length = t.leaf_range(u)
        seg = lab[start:start + length]
        if seg[0] == seg[-1]:  # labels are contiguous, so endpoints suffice
            out.append(int(u))
    return frozenset(out)


def split_counts_from_rejection(t, rejected, bstar):
    """V and R from tree degrees, plus FSP = V/(R v 1) and TPP.

    ``V = sum_{u in F}(deg(u) - deg_rej(u)) - |B* & F|`` and
    ``R = max(sum_{u in rej}(deg(u) - deg_rej(u)) - 1, 0)``.
    """
    rej = validate_rejection(t, rejected)
    bset = {t.node(x) for x in bstar}
    F = false_rejections(t, rej, bset)
    mask = np.zeros(t.n_nodes, dtype=bool)
    mask[rej] = True
    open_children = {int(u): int(t.deg[u]) - int(mask[list(t.children[u])].sum()) for u in rej}
    V = sum(open_children[u] for u in F) - len(bset & F)
    R = max(sum(open_children.values()) - 1, 0)
    _, tpp = fsp_tpp_groups(bstar_partition(t, bset), rejection_to_partition(t, rej))
    return SplitCounts(V=V, R=R, fsp=Fraction(V, max(R, 1)), tpp=tpp, false_rejections=F)
