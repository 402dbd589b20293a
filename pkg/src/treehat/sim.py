"""Scenario generators and the Monte Carlo driver.

Random streams
--------------
Every draw comes from a Philox generator keyed by a ``SeedSequence``:

* ``[seed, 0]`` is the design stream (tree, true groups, group means, design
  matrix), drawn once per scenario;
* ``[seed, 1, i]`` is the stream of replicate ``i`` (p-values or noise).

Replicates are therefore independent of evaluation order and of how they are
spread over worker processes.
"""

from __future__ import annotations

import csv
import heapq
import logging
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .hat import HatConfig, ThresholdFamily, run_hat
from .metrics import bstar_labels, bstar_partition, fsp_tpp_groups
from .pvalues import LeafObservations, PValueAssignment, anova_pvalues, simes_pvalues
from .regression import (ConvergenceWarning, RegressionConfig, RegressionData, build_expansion,
                         node_pvalues_regression)
from .tree import Tree, regular_tree

logger = logging.getLogger(__name__)

SCENARIO_KINDS = ("idealized-binary", "idealized-nonbinary", "means-3regular", "regression-rare")


def design_rng(seed):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 0])))


def replicate_rng(seed, i):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 1, i])))


def _rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return design_rng(seed)


# ----------------------------------------------------------------------
# trees


def single_linkage_1d(x):
    """Single-linkage merges of 1-d points.

    Returns ``(order, merges)`` where ``order`` sorts ``x`` and each merge is
    ``(left, right, height)`` over cluster ids: ``0..p-1`` are the sorted points
    and merge ``k`` creates cluster ``p + k``.
    """
    x = np.asarray(x, dtype=float)
    p = len(x)
    order = np.argsort(x, kind="stable")
    xs = x[order]
    gaps = np.diff(xs)
    ending_at = list(range(p))    # cluster whose interval ends at position i
    starting_at = list(range(p))  # cluster whose interval starts at position i
    lo = list(range(p))
    hi = list(range(p))
    merges = []
    for k, i in enumerate(np.argsort(gaps, kind="stable")):
        left, right = ending_at[i], starting_at[i + 1]
        new = p + k
        lo.append(lo[left])
        hi.append(hi[right])
        ending_at[hi[right]] = new
        starting_at[lo[left]] = new
        merges.append((left, right, float(gaps[i])))
    return order, merges


def gen_binary_tree(p, seed=0):
    """Binary tree from single-linkage clustering of ``p`` uniform draws.

    Leaves are labelled ``x<i>`` by draw index and ordered by value; internal
    nodes are labelled ``m<k>`` by merge step and carry merge heights.
    """
    if p < 2:
        raise ValueError("need p >= 2")
    rng = _rng(seed)
    x = rng.uniform(0.0, 1.0, size=p)
    order, merges = single_linkage_1d(x)
    kids = {p + k: (a, b) for k, (a, b, _) in enumerate(merges)}
    height = {p + k: h for k, (_, _, h) in enumerate(merges)}
    children, labels, heights = [], [], []
    stack = [(2 * p - 2, -1)]
    while stack:
        c, par = stack.pop()
        u = len(children)
        children.append([])
        if par >= 0:
            children[par].append(u)
        if c < p:
            labels.append(f"x{order[c]}")
            heights.append(0.0)
        else:
            labels.append(f"m{c - p}")
            heights.append(height[c])
            a, b = kids[c]
            stack.append((b, u))
            stack.append((a, u))
    return Tree(children, labels, heights=heights)


def node_heights(t):
    """Merge heights when present, otherwise the number of edges to the deepest leaf below."""
    if t.heights is not None:
        return t.heights
    h = np.zeros(t.n_nodes)
    for u in range(t.n_nodes - 1, 0, -1):
        h[t.parent[u]] = max(h[t.parent[u]], h[u] + 1)
    return h


def cut_tree(t, K):
    """Split the tallest node repeatedly until ``K`` subtrees exist.

    Returns ``(bstar, exact)`` with ``bstar`` a sorted tuple of node ids.  Ties
    in height go to the smaller node id.  On non-binary trees a split that
    would overshoot ``K`` stops the expansion and ``exact`` is False.
    """
    if not 1 <= K <= t.p:
        raise ValueError(f"K must lie in 1..{t.p}")
    h = node_heights(t)
    heap = [(-h[t.root], t.root)]
    leaves = []
    count = 1
    while count < K and heap:
        _, u = heap[0]
        if t.is_leaf[u]:
            break
        if count + t.deg[u] - 1 > K:
            break
        heapq.heappop(heap)
        count += t.deg[u] - 1
        for c in t.children[u]:
            if t.is_leaf[c]:
                leaves.append(c)
            else:
                heapq.heappush(heap, (-h[c], c))
    bstar = tuple(sorted([u for _, u in heap] + leaves))
    exact = len(bstar) == K
    if not exact:
        warnings.warn(f"cut_tree reached {len(bstar)} groups instead of {K}", stacklevel=2)
    return bstar, exact


def gen_nonbinary_tree(n_internal_children):
    """Root of degree 5 whose first ``k`` children each hold 10 leaves."""
    k = int(n_internal_children)
    if not 1 <= k <= 4:
        raise ValueError("n_internal_children must lie in 1..4")
    kids = []
    for i in range(5):
        if i < k:
            kids.append((f"b{i}", [f"l{i}_{j}" for j in range(10)]))
        else:
            kids.append(f"l{i}")
    return Tree.from_nested(("root", kids))


def regular_levels(p, degree=3):
    levels = 1
    size = 1
    while size < p:
        size *= degree
        levels += 1
    if size != p:
        raise ValueError(f"p={p} is not a power of {degree}")
    return levels


# ----------------------------------------------------------------------
# p-values and data


def null_mask(t, bstar):
    """True for internal nodes at or below a ``bstar`` node."""
    mask = np.zeros(t.n_nodes, dtype=bool)
    for b in bstar:
        mask[b:b + t.subtree_size[b]] = True
    return mask & ~t.is_leaf


def gen_idealized_pvalues(t, bstar, seed=0, beta_b=60.0):
    """Uniform p-values at null nodes, Beta(1, ``beta_b``) at strict ancestors of ``bstar``."""
    rng = _rng(seed)
    null = null_mask(t, bstar)
    values = np.full(t.n_nodes, np.nan)
    u = t.internal
    unif = rng.uniform(size=len(u))
    beta = rng.beta(1.0, beta_b, size=len(u))
    values[u] = np.where(null[u], unif, beta)
    return PValueAssignment(values, "external")


@dataclass
class MeansDesign:
    tree: Tree
    bstar: tuple
    truth: object
    group_means: np.ndarray
    theta: np.ndarray
    sigma: float


def means_design(K, sigma=0.3, seed=0, p=243, degree=3):
    rng = _rng(seed)
    t = regular_tree(degree, regular_levels(p, degree))
    bstar, _ = cut_tree(t, K)
    labels = bstar_labels(t, bstar)
    k = len(bstar)
    means = rng.uniform(1.0, 1.5, size=k) * rng.choice([-1.0, 1.0], size=k)
    return MeansDesign(t, bstar, bstar_partition(t, bstar), means, means[labels], sigma)


def draw_means(design, seed):
    rng = _rng(seed)
    y = design.theta + design.sigma * rng.standard_normal(len(design.theta))
    # sigma = 0 is allowed for noiseless checks; LeafObservations needs sigma > 0
    return LeafObservations(y, design.sigma if design.sigma > 0 else np.finfo(float).tiny)


def gen_means_scenario(K, sigma=0.3, seed=0, p=243):
    """Balanced 3-regular tree, ``K`` groups with means +-Unif(1, 1.5), Gaussian noise."""
    design = means_design(K, sigma, seed, p)
    obs = draw_means(design, replicate_rng(seed, 0) if not isinstance(seed, np.random.Generator)
                     else seed)
    return design.tree, obs, design.truth


@dataclass
class RegressionDesign:
    tree: Tree
    bstar: tuple
    truth: object
    X: np.ndarray
    theta: np.ndarray
    sigma: float


def regression_design(K, beta=0.6, rho=0.2, n=100, c_sigma=0.6, seed=0, p=243, degree=3):
    rng = _rng(seed)
    t = regular_tree(degree, regular_levels(p, degree))
    bstar, _ = cut_tree(t, K)
    k = len(bstar)
    n_zero = int(np.floor((1.0 - beta) * k + 0.5))
    theta_groups = np.zeros(k)
    theta_groups[n_zero:] = rng.normal(0.0, 0.5, size=k - n_zero)
    A_b = build_expansion(t).A[:, list(bstar)]
    theta = A_b @ theta_groups
    X = rng.standard_normal((n, p)) * (rng.uniform(size=(n, p)) < rho)
    sigma = c_sigma * np.linalg.norm(X @ theta) / np.sqrt(n)
    return RegressionDesign(t, bstar, bstar_partition(t, bstar), X, theta, float(sigma))


def draw_regression(design, seed):
    rng = _rng(seed)
    n = design.X.shape[0]
    y = design.X @ design.theta + design.sigma * rng.standard_normal(n)
    return RegressionData(design.X, y)


def gen_regression_scenario(K, beta=0.6, rho=0.2, n=100, c_sigma=0.6, seed=0, p=243):
    """Rare-feature design ``X = Xtilde * W`` with coefficients constant on ``K`` subtrees."""
    design = regression_design(K, beta, rho, n, c_sigma, seed, p)
    data = draw_regression(design, replicate_rng(seed, 0))
    return design.tree, data, design.truth


# ----------------------------------------------------------------------
# Monte Carlo


@dataclass(frozen=True)
class Scenario:
    kind: str
    p: int = 1000
    K: int = 500
    alphas: tuple = (0.1, 0.2, 0.3)
    families: tuple = ("independent", "lg")
    reps: int = 100
    seed: int = 0
    epsilon0: float = 0.0
    # idealized
    beta_b: float = 60.0
    n_internal_children: int = 4
    # means
    sigma: float = 0.3
    pvalue_mode: str = "paired"  # paired | anova | simes
    # regression
    beta: float = 0.6
    rho: float = 0.2
    n: int = 100
    c_sigma: float = 0.6
    regression: RegressionConfig = RegressionConfig()
    keep_pvalues: bool = False

    def __post_init__(self):
        object.__setattr__(self, "alphas", tuple(float(a) for a in self.alphas))
        object.__setattr__(self, "families", tuple(ThresholdFamily(f).value
                                                   for f in self.families))
        if self.kind not in SCENARIO_KINDS:
            raise ValueError(f"unknown scenario kind {self.kind!r}")
        if self.reps < 1:
            raise ValueError("need at least one replicate")
        if not 1 <= self.K <= self.p and self.kind != "idealized-nonbinary":
            raise ValueError("need 1 <= K <= p")
        if self.pvalue_mode not in ("paired", "anova", "simes"):
            raise ValueError(f"unknown pvalue_mode {self.pvalue_mode!r}")
        for a in self.alphas:
            HatConfig(a, self._family_for(self.families[0]) if self.families else "independent",
                      self.epsilon0 if self.epsilon0 else 0.0)

    def _family_for(self, fam):
        fam = ThresholdFamily(fam)
        if self.epsilon0 > 0 and not fam.shifted and fam is not ThresholdFamily.LG:
            fam = {ThresholdFamily.INDEPENDENT: ThresholdFamily.INDEPENDENT_SHIFTED,
                   ThresholdFamily.RESHAPED: ThresholdFamily.RESHAPED_SHIFTED}[fam]
        return fam

    def config(self, fam, alpha):
        fam = self._family_for(fam)
        return HatConfig(alpha, fam, self.epsilon0 if fam.shifted else 0.0)


@dataclass
class McResult:
    scenario: Scenario
    rows: list
    fsp: np.ndarray          # (families, alphas, reps)
    tpp: np.ndarray
    self_consistent: bool
    pvalues: np.ndarray | None = None
    null_nodes: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    def row(self, family, alpha):
        for r in self.rows:
            if r["family"] == family and abs(r["alpha"] - alpha) < 1e-12:
                return r
        raise KeyError((family, alpha))

    def write_csv(self, fh):
        w = csv.writer(fh, lineterminator="\n")
        cols = ["scenario", "family", "alpha", "fsr", "fsr_se", "power", "power_se", "reps"]
        w.writerow(cols)
        for r in self.rows:
            w.writerow([r["scenario"], r["family"]] + [f"{r[c]:.17g}" for c in cols[2:7]]
                       + [r["reps"]])


def _setup(s):
    """Scenario-level draws shared by all replicates."""
    if s.kind == "idealized-binary":
        t = gen_binary_tree(s.p, design_rng(s.seed))
        bstar, _ = cut_tree(t, s.K)
        return {"tree": t, "bstar": bstar, "truth": bstar_partition(t, bstar)}
    if s.kind == "idealized-nonbinary":
        t = gen_nonbinary_tree(s.n_internal_children)
        bstar, _ = cut_tree(t, 5)
        return {"tree": t, "bstar": bstar, "truth": bstar_partition(t, bstar)}
    if s.kind == "means-3regular":
        d = means_design(s.K, s.sigma, design_rng(s.seed), s.p)
        return {"tree": d.tree, "bstar": d.bstar, "truth": d.truth, "design": d}
    d = regression_design(s.K, s.beta, s.rho, s.n, s.c_sigma, design_rng(s.seed), s.p)
    return {"tree": d.tree, "bstar": d.bstar, "truth": d.truth, "design": d}


def _pvalue_sets(s, setup, rng, i):
    """Map from p-value kind to assignment for one replicate."""
    t = setup["tree"]
    if s.kind.startswith("idealized"):
        pv = gen_idealized_pvalues(t, setup["bstar"], rng, s.beta_b)
        return {"base": pv}
    if s.kind == "means-3regular":
        raw = anova_pvalues(t, draw_means(setup["design"], rng))
        return {"anova": raw, "simes": simes_pvalues(t, raw)}
    data = draw_regression(setup["design"], rng)
    cfg = replace(s.regression, seed=s.regression.seed + i)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        pv, _ = node_pvalues_regression(data, t, cfg)
    return {"base": pv}


def _pick(s, sets, fam):
    if "base" in sets:
        return sets["base"]
    if s.pvalue_mode != "paired":
        return sets[s.pvalue_mode]
    return sets["simes"] if ThresholdFamily(fam).base is ThresholdFamily.RESHAPED else sets["anova"]


def _run_replicate(args):
    s, setup, i = args
    rng = replicate_rng(s.seed, i)
    t = setup["tree"]
    sets = _pvalue_sets(s, setup, rng, i)
    fsp = np.zeros((len(s.families), len(s.alphas)))
    tpp = np.zeros_like(fsp)
    ok = True
    for a, fam in enumerate(s.families):
        pv = _pick(s, sets, fam)
        for b, alpha in enumerate(s.alphas):
            rt, part = run_hat(t, pv, s.config(fam, alpha))
            ok &= rt.self_consistent()
            f, tp = fsp_tpp_groups(setup["truth"], part)
            fsp[a, b] = float(f)
            tpp[a, b] = float(tp)
    kept = _pick(s, sets, s.families[0]).values if s.keep_pvalues else None
    return fsp, tpp, ok, kept


def run_monte_carlo(s, threads=1, progress=None):
    """Estimate FSR and power for every (family, alpha) pair in the scenario."""
    if s.reps < 1:
        raise ValueError("need at least one replicate")
    setup = _setup(s)
    t = setup["tree"]
    jobs = [(s, setup, i) for i in range(s.reps)]
    results = []
    if threads and threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as ex:
            for i, res in enumerate(ex.map(_run_replicate, jobs, chunksize=max(1, s.reps // (4 * threads)))):
                results.append(res)
                if progress:
                    progress(i + 1, s.reps)
    else:
        for i, job in enumerate(jobs):
            results.append(_run_replicate(job))
            if progress:
                progress(i + 1, s.reps)
    fsp = np.stack([r[0] for r in results], axis=-1)
    tpp = np.stack([r[1] for r in results], axis=-1)
    rows = []
    for a, fam in enumerate(s.families):
        for b, alpha in enumerate(s.alphas):
            x, y = fsp[a, b], tpp[a, b]
            se = (lambda v: float(v.std(ddof=1) / np.sqrt(len(v))) if len(v) > 1 else 0.0)
            rows.append({"scenario": s.kind, "family": fam, "alpha": alpha,
                         "fsr": float(x.mean()), "fsr_se": se(x),
                         "power": float(y.mean()), "power_se": se(y), "reps": s.reps})
    pvals = np.stack([r[3] for r in results]) if s.keep_pvalues else None
    return McResult(scenario=s, rows=rows, fsp=fsp, tpp=tpp,
                    self_consistent=all(r[2] for r in results), pvalues=pvals,
                    null_nodes=null_mask(t, setup["bstar"]),
                    extra={"tree": t, "bstar": setup["bstar"]})
