"""Acceptance criteria 1-11.

Each test prints one ``criterion N: PASS|FAIL`` line (shown even under output
capture) before asserting, so ``pytest -v`` gives a per-criterion summary.
"""

import itertools
import math
import os
import subprocess
import sys
import time
from fractions import Fraction

import cvxpy as cp
import numpy as np
import pytest
from scipy import stats

from helpers import (ELEVEN_BSTAR, ELEVEN_NEWICK, ELEVEN_REJECTED, eleven_leaf_tree, group_count_oracle,
                     oracle_hat, random_bstar, random_rejection, random_tree)
from treehat.hat import HatConfig, run_hat
from treehat.metrics import (barriers_to_partition, false_rejections, fdp_tpp_barrier,
                             fsp_tpp_groups, split_counts_from_rejection)
from treehat.pvalues import PValueAssignment, anova_pvalues, write_pvalues_csv
from treehat.regression import (RegressionData, build_expansion, fit_rare, scaled_lasso,
                                solve_projection_qp)
from treehat.sim import (Scenario, design_rng, draw_means, draw_regression, means_design,
                         null_mask, regression_design, replicate_rng, run_monte_carlo)
from treehat.tree import regular_tree


def report(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'} ({detail})")


# ----------------------------------------------------------------------
# 1. group form == barrier form


def test_criterion_1_group_barrier_equivalence(capsys):
    t0 = time.perf_counter()
    bad = 0
    count = 0
    for p in range(1, 9):
        vecs = list(itertools.product((0, 1), repeat=p - 1))
        for bt, ba in itertools.product(vecs, vecs):
            g = fsp_tpp_groups(barriers_to_partition(bt), barriers_to_partition(ba))
            bad += g != fdp_tpp_barrier(bt, ba)
            count += 1
    rng = np.random.default_rng(101)
    for _ in range(10_000):
        p = int(rng.integers(1, 65))
        bt = rng.integers(0, 2, p - 1)
        ba = rng.integers(0, 2, p - 1)
        g = fsp_tpp_groups(barriers_to_partition(bt), barriers_to_partition(ba))
        b = fdp_tpp_barrier(bt, ba)
        bad += g != b or not all(isinstance(x, Fraction) for x in g + b)
        count += 1
    dt = time.perf_counter() - t0
    ok = bad == 0 and dt < 10
    report(capsys, 1, ok, f"{count} pairs, {bad} mismatches, {dt:.1f}s")
    assert ok


# ----------------------------------------------------------------------
# 2. tree-degree V/R == group counting


def test_criterion_2_tree_counts(capsys):
    t0 = time.perf_counter()
    t = eleven_leaf_tree()
    sc = split_counts_from_rejection(t, ELEVEN_REJECTED, ELEVEN_BSTAR)
    example = (sc.V, sc.R, sc.fsp, sc.tpp) == (3, 6, Fraction(1, 2), Fraction(3, 4))
    rng = np.random.default_rng(202)
    bad = 0
    for _ in range(1000):
        t = random_tree(rng, int(rng.integers(2, 16)))
        rej = random_rejection(rng, t)
        bstar = random_bstar(rng, t)
        sc = split_counts_from_rejection(t, rej, bstar)
        fsp = Fraction(sc.V, max(sc.R, 1))
        bad += (fsp, sc.tpp) != group_count_oracle(t, rej, bstar) or sc.fsp != fsp
    dt = time.perf_counter() - t0
    ok = example and bad == 0 and dt < 10
    report(capsys, 2, ok, f"11-leaf example V=3 R=6 FSP=1/2 TPP=3/4: {example}; "
           f"1000 triples, {bad} mismatches, {dt:.1f}s")
    assert ok


# ----------------------------------------------------------------------
# 3. binary trees: V = |F|, R = |T_rej|


def test_criterion_3_binary_counts(capsys):
    rng = np.random.default_rng(303)
    bad = 0
    for _ in range(500):
        t = random_tree(rng, int(rng.integers(2, 40)), binary=True)
        rej = random_rejection(rng, t)
        bstar = random_bstar(rng, t)
        sc = split_counts_from_rejection(t, rej, bstar)
        bad += sc.V != len(false_rejections(t, rej, bstar)) or sc.R != len(rej)
    ok = bad == 0
    report(capsys, 3, ok, f"500 binary configurations, {bad} mismatches")
    assert ok


# ----------------------------------------------------------------------
# 4. self-consistency of the step-up fixed point


def test_criterion_4_self_consistency(capsys):
    rng = np.random.default_rng(404)
    runs = bad = oracle_bad = 0
    for i in range(400):
        t = random_tree(rng, int(rng.integers(2, 40)), max_deg=5, binary=i % 3 == 0)
        values = np.where(t.is_leaf, np.nan, rng.uniform(size=t.n_nodes) ** 3)
        for fam in ("independent", "independent-shifted", "reshaped", "reshaped-shifted", "lg"):
            eps = 0.01 if fam.endswith("shifted") else 0.0
            alpha = float(rng.choice([0.05, 0.1, 0.2, 0.3, 0.5]))
            try:
                rt, _ = run_hat(t, PValueAssignment(values), HatConfig(alpha, fam, eps))
            except ValueError:
                continue  # empty reshaping range on this tree
            runs += 1
            bad += not rt.self_consistent()
            want, _ = oracle_hat(t, values, alpha, fam, eps)
            oracle_bad += set(rt.rejected) != set(want)
    mc = [run_monte_carlo(s).self_consistent for s in (
        Scenario("idealized-binary", p=100, K=30, reps=30, seed=4),
        Scenario("idealized-nonbinary", n_internal_children=3, reps=30, seed=4),
        Scenario("means-3regular", p=81, K=9, reps=30, seed=4,
                 families=("independent", "reshaped")))]
    ok = bad == 0 and oracle_bad == 0 and all(mc) and runs > 1000
    report(capsys, 4, ok, f"{runs} runs, {bad} inconsistent, {oracle_bad} oracle mismatches; "
           f"Monte Carlo runs consistent: {all(mc)}")
    assert ok


# ----------------------------------------------------------------------
# 5. FSR control, idealized binary


def _fsr_rows(res, alphas, families):
    out = []
    for fam in families:
        for a in alphas:
            r = res.row(fam, a)
            out.append((fam, a, r["fsr"], r["fsr_se"], r["power"]))
    return out


def test_criterion_5_idealized_binary(capsys):
    t0 = time.perf_counter()
    rows = []
    for K in (40, 100):
        s = Scenario("idealized-binary", p=200, K=K, reps=300, seed=500 + K,
                     alphas=(0.1, 0.2, 0.3), families=("independent", "lg"))
        res = run_monte_carlo(s)
        assert res.self_consistent
        rows += [(K,) + r for r in _fsr_rows(res, s.alphas, s.families)]
    dt = time.perf_counter() - t0
    viol = [r for r in rows if r[3] > r[2] + 3 * r[4]]
    ok = not viol and dt < 120
    worst = max(rows, key=lambda r: r[3] - r[2])
    report(capsys, 5, ok, f"{len(rows)} configs, worst FSR-alpha {worst[3] - worst[2]:+.3f} "
           f"({worst[1]}, K={worst[0]}, alpha={worst[2]}), {len(viol)} violations, {dt:.0f}s")
    assert ok


# ----------------------------------------------------------------------
# 6. non-binary: HAT controls FSR, LG does not


def test_criterion_6_nonbinary_separation(capsys):
    t0 = time.perf_counter()
    hat_viol = []
    lg_exceeds = []
    for k in (1, 2, 3, 4):
        s = Scenario("idealized-nonbinary", n_internal_children=k, reps=500, seed=600 + k,
                     alphas=(0.1, 0.2), families=("independent", "lg"))
        res = run_monte_carlo(s)
        assert res.self_consistent
        for a in s.alphas:
            h, g = res.row("independent", a), res.row("lg", a)
            if h["fsr"] > a + 3 * h["fsr_se"]:
                hat_viol.append((k, a, h["fsr"]))
            if g["fsr"] > a - 3 * g["fsr_se"]:
                lg_exceeds.append((k, a, round(g["fsr"], 3)))
    dt = time.perf_counter() - t0
    lg_alphas = {a for _, a, _ in lg_exceeds}
    ok = not hat_viol and {0.1, 0.2} <= lg_alphas and dt < 120
    report(capsys, 6, ok, f"HAT violations {hat_viol}; LG above alpha-3SE at {lg_exceeds}; "
           f"{dt:.0f}s")
    assert ok


# ----------------------------------------------------------------------
# 7. ANOVA null p-values: uniform, and independent across disjoint nodes


def test_criterion_7_anova_validity(capsys):
    t0 = time.perf_counter()
    d = means_design(3, 0.3, design_rng(700), p=81)
    t = d.tree
    null = null_mask(t, d.bstar)
    b0, b1 = d.bstar[0], d.bstar[1]
    u = t.children[b0][0]           # null node
    v = t.children[b0][1]           # sibling null node, disjoint leaves
    w = b1                          # null node in another group
    assert null[u] and null[v] and null[w] and not null[t.root]
    draws = 10_000
    pv = np.empty((draws, t.n_nodes))
    for i in range(draws):
        pv[i] = anova_pvalues(t, draw_means(d, replicate_rng(700, i))).values
    ks = {n: stats.kstest(pv[:, n], "uniform").pvalue for n in (u, v, w, b0)}
    q = np.quantile(np.linspace(0, 1, 5), [0.25, 0.5, 0.75])

    def grid_pvalue(a, b):
        ia, ib = np.digitize(pv[:, a], q), np.digitize(pv[:, b], q)
        table = np.zeros((4, 4))
        np.add.at(table, (ia, ib), 1)
        return stats.chi2_contingency(table)[1]

    ind = {"siblings": grid_pvalue(u, v), "across groups": grid_pvalue(u, w),
           "group roots": grid_pvalue(b0, w)}
    dt = time.perf_counter() - t0
    ok = min(ks.values()) > 0.01 and min(ind.values()) > 0.01 and dt < 30
    report(capsys, 7, ok, "KS p " + ", ".join(f"{p:.3f}" for p in ks.values()) +
           "; independence p " + ", ".join(f"{k} {p:.3f}" for k, p in ind.items()) +
           f"; {dt:.1f}s")
    assert ok


# ----------------------------------------------------------------------
# 8. means application with Simes p-values and the reshaped family


def test_criterion_8_means(capsys):
    t0 = time.perf_counter()
    rows = []
    power9 = None
    for K in (9, 27):
        s = Scenario("means-3regular", p=81, K=K, sigma=0.3, reps=200, seed=800 + K,
                     alphas=(0.1, 0.2, 0.3), families=("reshaped",), pvalue_mode="simes")
        res = run_monte_carlo(s)
        assert res.self_consistent
        rows += [(K,) + r for r in _fsr_rows(res, s.alphas, s.families)]
        if K == 9:
            power9 = [res.row("reshaped", a)["power"] for a in s.alphas]
    dt = time.perf_counter() - t0
    viol = [r for r in rows if r[3] > r[2] + 3 * r[4]]
    ok = not viol and min(power9) > 0 and dt < 120
    report(capsys, 8, ok, "FSR " + ", ".join(f"K={r[0]} a={r[2]}: {r[3]:.3f}" for r in rows) +
           f"; power at K=9 {[round(p, 3) for p in power9]}; {dt:.0f}s")
    assert ok


# ----------------------------------------------------------------------
# 9. regression pipeline


def test_criterion_9_regression(capsys):
    t0 = time.perf_counter()
    grid = (0.01, 0.05, 0.1, 0.2, 0.3, 0.5, 0.7, 0.9)
    unif_viol, fsr_viol, lines = [], [], []
    for K in (3, 9):
        s = Scenario("regression-rare", p=27, K=K, n=120, reps=100, seed=900 + K,
                     alphas=(0.2, 0.3), families=("reshaped",), keep_pvalues=True)
        res = run_monte_carlo(s)
        assert res.self_consistent
        t = res.extra["tree"]
        nodes = np.flatnonzero(res.null_nodes & ~t.is_leaf)
        nodes = nodes[nodes != t.root]  # the root is never tested
        pn = res.pvalues[:, nodes]
        for th in grid:
            per_rep = np.mean(pn <= th, axis=1)
            est, se = per_rep.mean(), per_rep.std(ddof=1) / math.sqrt(len(per_rep))
            if est > th + 0.05 + 3 * se:
                unif_viol.append((K, th, round(est, 3)))
        for a in s.alphas:
            r = res.row("reshaped", a)
            lines.append(f"K={K} a={a}: FSR {r['fsr']:.3f} power {r['power']:.3f}")
            if r["fsr"] > a + 3 * r["fsr_se"]:
                fsr_viol.append((K, a, r["fsr"]))
    dt = time.perf_counter() - t0
    ok = not unif_viol and not fsr_viol and dt < 900
    report(capsys, 9, ok, f"null P(p<=t) violations {unif_viol}; " + "; ".join(lines) +
           f"; {dt:.0f}s")
    assert ok


# ----------------------------------------------------------------------
# 10. solver oracles


def test_criterion_10_solver_oracles(capsys):
    # rare-feature estimator at lambda = 0 vs QR least squares
    t = regular_tree(3, 4)
    rng = np.random.default_rng(1000)
    X = rng.standard_normal((120, t.p)) * (rng.uniform(size=(120, t.p)) < 0.2)
    y = X @ np.repeat(rng.normal(0, 0.5, 9), 3) + 0.3 * rng.standard_normal(120)
    data = RegressionData(X, y)
    fit = fit_rare(data, build_expansion(t), 0.0, 0.5)
    q, _ = np.linalg.qr(X)
    qr_gap = abs(np.linalg.norm(y - X @ fit.theta_hat) - np.linalg.norm(y - q @ (q.T @ y)))

    # projection QP vs CLARABEL, every constraint checked
    gaps, worst_violation = [], 0.0
    for n, p, seed in [(20, 30, 0), (120, 27, 1), (50, 10, 2), (80, 40, 3)]:
        r = np.random.default_rng(seed)
        Z = r.standard_normal((n, p))
        S = Z.T @ Z / n
        w = np.zeros(p)
        k = min(9, p - 1)
        w[1:1 + k] = r.standard_normal(k)
        w[1:1 + k] -= w[1:1 + k].mean()
        lam_n = math.sqrt(math.log(p) / n)
        res = solve_projection_qp(S, w, lam_n)
        kappa = np.linalg.norm(w) * lam_n
        for j in range(p):
            worst_violation = max(worst_violation, abs(S[j] @ res.b - w[j]) - kappa)
        worst_violation = max(worst_violation,
                              abs(w / np.linalg.norm(w) @ (S @ res.b - w)) - kappa)
        b = cp.Variable(p)
        cons = [cp.abs(S @ b - w) <= kappa,
                cp.abs((w / np.linalg.norm(w)) @ (S @ b - w)) <= kappa]
        ref = cp.Problem(cp.Minimize(cp.quad_form(b, cp.psd_wrap(S))), cons)
        ref.solve(solver="CLARABEL")
        gaps.append(abs(res.objective - ref.value))

    # scaled lasso with no signal: sigma_hat = sd(y) in closed form
    yn = 1.7 * np.random.default_rng(1001).standard_normal(500)
    sl = scaled_lasso(RegressionData(np.zeros((500, 20)), yn))
    rel = abs(sl.sigma / yn.std() - 1)

    ok = qr_gap <= 1e-8 and max(gaps) <= 1e-4 and worst_violation <= 1e-7 and rel <= 0.1
    report(capsys, 10, ok, f"QR gap {qr_gap:.1e}; QP objective gap {max(gaps):.1e}, "
           f"max constraint excess {worst_violation:.1e}; sigma_hat rel. error {rel:.3f}")
    assert ok


# ----------------------------------------------------------------------
# 11. CLI determinism


def _cli(*args):
    env = dict(os.environ, SOURCE_DATE_EPOCH="1700000000")
    r = subprocess.run([sys.executable, "-m", "treehat.cli", *map(str, args)],
                       capture_output=True, env=env)
    return r.returncode, r.stdout


def test_criterion_11_cli_determinism(tmp_path, capsys):
    t = eleven_leaf_tree()
    (tmp_path / "tree.nwk").write_text(ELEVEN_NEWICK + "\n")
    rng = np.random.default_rng(1100)
    with open(tmp_path / "pv.csv", "w") as fh:
        write_pvalues_csv(t, PValueAssignment(np.where(t.is_leaf, np.nan,
                                                       rng.uniform(size=t.n_nodes) ** 4)), fh)
    (tmp_path / "a.json").write_text('{"barriers": "0101011110"}')
    (tmp_path / "b.json").write_text('{"barriers": "0100011010"}')
    with open(tmp_path / "y.csv", "w") as fh:
        fh.write("leaf,y\n")
        for u in t.leaf_order:
            fh.write(f"{t.labels[u]},{float(rng.normal())!r}\n")
    d = regression_design(3, n=60, seed=design_rng(1100), p=27)
    reg = draw_regression(d, replicate_rng(1100, 0))
    (tmp_path / "reg.nwk").write_text(d.tree.to_newick() + "\n")
    with open(tmp_path / "X.csv", "w") as fh:
        fh.write(",".join(d.tree.labels[u] for u in d.tree.leaf_order) + "\n")
        for row in reg.X:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
    with open(tmp_path / "yr.csv", "w") as fh:
        fh.write("y\n" + "".join(f"{float(v)!r}\n" for v in reg.y))

    out = tmp_path / "out"
    commands = {
        "test": ["test", "--tree", tmp_path / "tree.nwk", "--pvalues", tmp_path / "pv.csv",
                 "--alpha", 0.3, "--audit", tmp_path / "audit.csv"],
        "metrics": ["metrics", tmp_path / "a.json", tmp_path / "b.json"],
        "simulate": ["simulate", "--scenario", "means-3regular", "--p", 27, "--k", 9,
                     "--reps", 10, "--seed", 3, "--families", "independent,reshaped",
                     "--threads", 2, "--quiet"],
        "pvalues-anova": ["pvalues-anova", "--tree", tmp_path / "tree.nwk", "--data",
                          tmp_path / "y.csv", "--sigma", 0.4, "--combine", "simes"],
        "pvalues-regression": ["pvalues-regression", "--tree", tmp_path / "reg.nwk", "--X",
                               tmp_path / "X.csv", "--y", tmp_path / "yr.csv", "--folds", 5,
                               "--seed", 2, "--diagnostics", tmp_path / "diag.json"],
    }
    side = {"test": tmp_path / "audit.csv", "pvalues-regression": tmp_path / "diag.json"}
    status = {}
    for name, args in commands.items():
        snaps = []
        for _ in range(2):
            code, stdout = _cli(*args, "--out", out)
            files = [out.read_bytes(), (tmp_path / "out.manifest.json").read_bytes()]
            if name in side:
                files.append(side[name].read_bytes())
            snaps.append((code, stdout, files))
        status[name] = snaps[0] == snaps[1] and snaps[0][0] in (0, 3) and snaps[0][2][0]
    ok = all(status.values())
    report(capsys, 11, ok, ", ".join(f"{k} {'identical' if v else 'DIFFERS'}"
                                     for k, v in status.items()))
    assert ok
