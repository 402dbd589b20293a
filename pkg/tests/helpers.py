"""Fixtures and independent reference implementations shared by the tests.

Nothing here calls into the threshold or metric code of the package; the
oracles work from the tree's child lists only.
"""

from fractions import Fraction

import numpy as np

from treehat.tree import parse_tree

# Tree with leaves d1..d11 under b1 = {c1, c2, c3} and b2 = {c4, c5}.
ELEVEN_NEWICK = "(((d1,d2)c1,(d3,d4)c2,(d5,d6)c3)b1,((d7,d8,d9)c4,(d10,d11)c5)b2)root;"
ELEVEN_BSTAR = ("d1", "d2", "c2", "c3", "b2")
ELEVEN_REJECTED = ("root", "b1", "b2", "c4")

# Twelve ordered leaves: truth {1,2},{3..5},{6..9},{10..12}; estimate
# {1..5},{6,7,8},{9},{10,11,12}.
TWELVE_TRUTH_BARRIERS = (0, 1, 0, 0, 1, 0, 0, 0, 1, 0, 0)
TWELVE_ACHIEVED_BARRIERS = (0, 0, 0, 0, 1, 0, 0, 1, 1, 0, 0)


def eleven_leaf_tree():
    return parse_tree(ELEVEN_NEWICK)


def random_newick(rng, n_leaves, max_deg=4, binary=False):
    """Random tree with exactly ``n_leaves`` leaves, as a Newick string."""
    counter = iter(range(10**6))

    def build(n):
        if n == 1:
            return f"x{next(counter)}"
        if binary:
            k = 2
        else:
            k = int(rng.integers(2, min(max_deg, n) + 1))
        cuts = np.sort(rng.choice(np.arange(1, n), size=k - 1, replace=False))
        sizes = np.diff(np.concatenate([[0], cuts, [n]]))
        return "(" + ",".join(build(int(s)) for s in sizes) + ")"

    return build(n_leaves) + ";"


def random_tree(rng, n_leaves, max_deg=4, binary=False):
    return parse_tree(random_newick(rng, n_leaves, max_deg, binary))


def random_rejection(rng, t, prob=0.6):
    """Rooted subtree of internal nodes, grown top-down with coin flips."""
    if rng.uniform() < 0.1:
        return []
    out = [t.root]
    stack = [t.root]
    while stack:
        u = stack.pop()
        for c in t.children[u]:
            if t.children[c] and rng.uniform() < prob:
                out.append(c)
                stack.append(c)
    return out


def random_bstar(rng, t, stop=0.4):
    """Frontier cut: descend from the root, stopping at each node with probability ``stop``."""
    out = []
    stack = [t.root]
    while stack:
        u = stack.pop()
        if not t.children[u] or (u != t.root and rng.uniform() < stop) or \
                (u == t.root and rng.uniform() < 0.05):
            out.append(u)
        else:
            stack.extend(t.children[u])
    return sorted(out)


def leaves_below(t, u):
    if not t.children[u]:
        return [u]
    return [x for c in t.children[u] for x in leaves_below(t, c)]


def group_count_oracle(t, rejected, bstar):
    """FSP and TPP by counting overlapping (true, achieved) group pairs."""
    leaves = leaves_below(t, t.root)
    truth = {}
    for g, b in enumerate(bstar):
        for x in leaves_below(t, b):
            truth[x] = g
    rej = set(rejected)
    achieved = {}
    if not rej:
        achieved = {x: 0 for x in leaves}
    else:
        g = 0
        for u in sorted(rej):
            for c in t.children[u]:
                if c not in rej:
                    for x in leaves_below(t, c):
                        achieved[x] = g
                    g += 1
    pairs = len({(truth[x], achieved[x]) for x in leaves})
    K = len(set(truth.values()))
    M = len(set(achieved.values()))
    fsp = Fraction(pairs - K, max(M - 1, 1))
    tpp = Fraction(1) if K == 1 else 1 - Fraction(pairs - M, K - 1)
    return fsp, tpp


# ----------------------------------------------------------------------
# reference testing procedure


def _structure(t):
    n = len(t.children)
    depth = [0] * n
    parent = [-1] * n
    order = [t.root]
    depth[t.root] = 1
    for u in order:
        for c in t.children[u]:
            depth[c] = depth[u] + 1
            parent[c] = u
            order.append(c)
    nleaves = [0] * n
    for u in reversed(order):
        nleaves[u] = 1 if not t.children[u] else sum(nleaves[c] for c in t.children[u])
    return depth, parent, nleaves, order


def oracle_hat(t, pvals, alpha, family="independent", epsilon0=0.0):
    """Straight transcription of the procedure with an exhaustive r-scan.

    Returns ``(rejected_set, per_depth_r)``.
    """
    depth, parent, nleaves, order = _structure(t)
    internal = [u for u in order if t.children[u]]
    deg = {u: len(t.children[u]) for u in internal}
    p = nleaves[t.root]
    D = max(depth)
    Delta = max(deg.values())
    delta = min(deg.values())
    # truncated tree for the Lynch-Guo levels
    tl, ts = {}, {}
    for u in reversed(order):
        if not t.children[u]:
            continue
        kids = [c for c in t.children[u] if t.children[c]]
        tl[u] = 1 if not kids else sum(tl[c] for c in kids)
        ts[u] = 1 + sum(ts[c] for c in kids)
    lg = family == "lg"
    rejected = {t.root}
    R_prev = 1 if lg else deg[t.root] - 1
    per_depth = {}
    for d in range(2, D + 1):
        nodes = [u for u in internal if depth[u] == d]
        if not nodes or not any(parent[u] in rejected for u in nodes):
            break
        deg_sum = sum(deg[u] for u in nodes)
        r_max = len(nodes) if lg else deg_sum - len(nodes)

        def level(u, r):
            if parent[u] not in rejected:
                return 0.0
            m = R_prev + r
            if family.startswith("independent"):
                hbar = 1.0 + sum(1.0 / k for k in range(m + 1, p - 1 - (r_max - r) + 1))
                num = alpha * nleaves[u] * m
                x = num / (p * (1 - 1 / Delta**2) * hbar + num) / Delta
            elif family.startswith("reshaped"):
                denom = sum(1.0 / k for k in range(d * (delta - 1), deg_sum + 1))
                x = alpha * nleaves[u] * (m / denom) / (p * (Delta - 1 / Delta) * (D - 1))
            else:
                x = alpha * tl[u] / tl[t.root] * (ts[u] + m - 1) / ts[u]
            if family.endswith("shifted"):
                x = max(x - epsilon0, 0.0)
            return min(max(x, 0.0), 1.0)

        def R(r):
            tot = 0
            for u in nodes:
                thr = level(u, r)
                if thr > 0 and pvals[u] <= thr:
                    tot += 1 if lg else deg[u] - 1
            return tot

        r_star = max(r for r in range(r_max + 1) if r <= R(r))
        for u in nodes:
            thr = level(u, r_star)
            if thr > 0 and pvals[u] <= thr:
                rejected.add(u)
        per_depth[d] = r_star
        R_prev += r_star
    return rejected, per_depth
