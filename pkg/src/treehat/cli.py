"""``hat`` command-line interface.

Exit codes: 0 success, 2 input validation, 3 solver non-convergence,
4 internal invariant violation.

Every output file ``F`` is accompanied by ``F.manifest.json`` recording the
command, parameters, seeds, input digests and library version.  The manifest
timestamp honours ``SOURCE_DATE_EPOCH`` so manifests can be made
byte-reproducible too.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import sys
from datetime import datetime, timezone
from fractions import Fraction

import numpy as np

from . import __version__
from .hat import HatConfig, ReshapingRangeError, ThresholdFamily, run_hat
from .metrics import (PartitionError, barriers_to_partition, barriers_to_string, fdp_tpp_barrier,
                      fsp_tpp_groups, partition_to_barriers)
from .pvalues import (LeafObservations, anova_pvalues, read_pvalues_csv, simes_pvalues,
                      write_pvalues_csv)
from .regression import RegressionConfig, RegressionData, node_pvalues_regression
from .sim import SCENARIO_KINDS, Scenario, run_monte_carlo
from .tree import TreeError, read_tree

EXIT_OK, EXIT_INPUT, EXIT_SOLVER, EXIT_INVARIANT = 0, 2, 3, 4


class InputError(Exception):
    pass


class InvariantError(Exception):
    pass


# ----------------------------------------------------------------------
# helpers


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _timestamp():
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    when = datetime.fromtimestamp(int(epoch), timezone.utc) if epoch else datetime.now(timezone.utc)
    return when.isoformat()


def _emit(path, text):
    """Write ``text`` to ``path`` or to stdout when ``path`` is None or '-'."""
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(path, "w", newline="") as fh:
            fh.write(text)


def _manifest(args, out_path, inputs, seeds=None):
    if out_path in (None, "-"):
        return
    params = {k: v for k, v in vars(args).items() if k != "func"}
    doc = {
        "command": args.command,
        "parameters": params,
        "seeds": seeds or {},
        "inputs": {name: {"path": p, "sha256": _sha256(p)} for name, p in inputs.items() if p},
        "library_version": __version__,
        "timestamp": _timestamp(),
    }
    with open(out_path + ".manifest.json", "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_tree(path):
    try:
        return read_tree(path)
    except OSError as e:
        raise InputError(f"cannot read tree {path}: {e.strerror}") from None
    except TreeError as e:
        raise InputError(f"{path}: {e}") from None


def _float_list(text):
    try:
        return tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _str_list(text):
    return tuple(x.strip() for x in text.split(",") if x.strip())


def _json_default(x):
    if isinstance(x, (np.bool_, np.integer, np.floating)):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"cannot serialize {type(x).__name__}")


def _frac(x):
    x = Fraction(x)
    return f"{x.numerator}/{x.denominator}"


def _partition_json(t, part):
    groups = [[t.labels[t.leaf_order[i]] for i in g] for g in part.groups]
    return {"groups": groups, "barriers": barriers_to_string(partition_to_barriers(part))}


def _hat_config(args):
    fam = ThresholdFamily(args.family)
    if args.epsilon0 > 0 and not fam.shifted:
        if fam is ThresholdFamily.LG:
            raise InputError("--epsilon0 does not apply to the lg family")
        fam = {ThresholdFamily.INDEPENDENT: ThresholdFamily.INDEPENDENT_SHIFTED,
               ThresholdFamily.RESHAPED: ThresholdFamily.RESHAPED_SHIFTED}[fam]
    try:
        return HatConfig(args.alpha, fam, args.epsilon0, beta_upper=args.beta_upper)
    except ValueError as e:
        raise InputError(str(e)) from None


# ----------------------------------------------------------------------
# commands


def cmd_test(args):
    t = _load_tree(args.tree)
    cfg = _hat_config(args)
    try:
        pv = read_pvalues_csv(t, args.pvalues)
    except OSError as e:
        raise InputError(f"cannot read p-values {args.pvalues}: {e.strerror}") from None
    except ValueError as e:
        raise InputError(str(e)) from None
    try:
        rt, part = run_hat(t, pv, cfg)
    except ReshapingRangeError as e:
        raise InputError(str(e)) from None
    if not rt.self_consistent():
        raise InvariantError("step-up fixed point is not self-consistent")
    doc = _partition_json(t, part)
    doc["rejected"] = [t.labels[u] for u in rt.rejected]
    _emit(args.out, json.dumps(doc, indent=2) + "\n")
    if args.audit:
        rej = set(rt.rejected)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["node", "depth", "pvalue", "threshold", "rejected"])
        for u in t.internal:
            thr = rt.thresholds_used.get(u)
            w.writerow([t.labels[u], int(t.depth[u]), f"{pv.values[u]:.17g}",
                        "" if thr is None else f"{thr:.17g}", int(u in rej)])
        _emit(args.audit, buf.getvalue())
    _manifest(args, args.out, {"tree": args.tree, "pvalues": args.pvalues})
    return EXIT_OK


def _read_partition(path):
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as e:
        raise InputError(f"cannot read {path}: {e.strerror}") from None
    except json.JSONDecodeError as e:
        raise InputError(f"{path}:{e.lineno}: invalid JSON ({e.msg})") from None
    if not isinstance(doc, dict) or not ("groups" in doc or "barriers" in doc):
        raise InputError(f"{path}: expected an object with 'groups' or 'barriers'")
    return doc


def cmd_metrics(args):
    truth = _read_partition(args.truth)
    achieved = _read_partition(args.achieved)
    try:
        if "groups" in truth and "groups" in achieved:
            order = [leaf for g in truth["groups"] for leaf in g]
            if len(set(order)) != len(order):
                raise InputError(f"{args.truth}: a leaf appears in more than one group")
            where = {}
            for k, g in enumerate(achieved["groups"]):
                for leaf in g:
                    if leaf in where:
                        raise InputError(f"{args.achieved}: leaf {leaf!r} appears twice")
                    where[leaf] = k
            if set(where) != set(order):
                raise InputError("partitions cover different leaves "
                                 f"({len(order)} vs {len(where)})")
            a = np.repeat(np.arange(len(truth["groups"])), [len(g) for g in truth["groups"]])
            b = np.array([where[leaf] for leaf in order])
            fsp, tpp = fsp_tpp_groups(a, b)
        else:
            bt = [int(c) for c in truth["barriers"]]
            ba = [int(c) for c in achieved["barriers"]]
            if len(bt) != len(ba):
                raise InputError(f"barrier vectors differ in length ({len(bt)} vs {len(ba)})")
            fsp, tpp = fsp_tpp_groups(barriers_to_partition(bt), barriers_to_partition(ba))
            if (fsp, tpp) != fdp_tpp_barrier(bt, ba):
                raise InvariantError("group and barrier forms disagree")
    except (KeyError, ValueError, PartitionError) as e:
        raise InputError(str(e)) from None
    text = f"fsp\t{_frac(fsp)}\t{float(fsp):.17g}\ntpp\t{_frac(tpp)}\t{float(tpp):.17g}\n"
    _emit(args.out, text)
    _manifest(args, args.out, {"truth": args.truth, "achieved": args.achieved})
    return EXIT_OK


def cmd_simulate(args):
    reg = RegressionConfig(lambda_n_c=args.lambda_n_c, tau=args.tau, folds=args.folds,
                           seed=args.seed)
    try:
        s = Scenario(kind=args.scenario, p=args.p, K=args.k, alphas=args.alphas,
                     families=args.families, reps=args.reps, seed=args.seed,
                     epsilon0=args.epsilon0, beta_b=args.beta_b,
                     n_internal_children=args.n_internal_children, sigma=args.sigma,
                     pvalue_mode=args.pvalue_mode, beta=args.beta, rho=args.rho, n=args.n,
                     c_sigma=args.c_sigma, regression=reg)
    except ValueError as e:
        raise InputError(str(e)) from None

    def progress(i, n):
        if not args.quiet:
            print(f"\rreplicate {i}/{n}", end="\n" if i == n else "", file=sys.stderr, flush=True)

    try:
        res = run_monte_carlo(s, threads=args.threads, progress=progress)
    except (ValueError, ReshapingRangeError) as e:
        raise InputError(str(e)) from None
    if not res.self_consistent:
        raise InvariantError("step-up fixed point is not self-consistent")
    buf = io.StringIO()
    res.write_csv(buf)
    _emit(args.out, buf.getvalue())
    _manifest(args, args.out, {}, seeds={"scenario": args.seed,
                                         "streams": "Philox(SeedSequence([seed, 0])) design, "
                                                    "Philox(SeedSequence([seed, 1, i])) replicate i"})
    return EXIT_OK


def _read_leaf_values(t, path):
    """``leaf,y`` CSV keyed by leaf label, returned in tree leaf order."""
    leaf_pos = {t.labels[u]: i for i, u in enumerate(t.leaf_order)}
    y = np.full(t.p, np.nan)
    try:
        fh = open(path, newline="")
    except OSError as e:
        raise InputError(f"cannot read {path}: {e.strerror}") from None
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["leaf", "y"]:
            raise InputError(f"{path}:1: expected header 'leaf,y'")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise InputError(f"{path}:{lineno}: expected 2 fields, got {len(row)}")
            name = row[0].strip()
            if name not in leaf_pos:
                raise InputError(f"{path}:{lineno}: unknown leaf {name!r}")
            try:
                y[leaf_pos[name]] = float(row[1])
            except ValueError:
                raise InputError(f"{path}:{lineno}: bad value {row[1]!r}") from None
    missing = [t.labels[t.leaf_order[i]] for i in np.flatnonzero(np.isnan(y))]
    if missing:
        raise InputError(f"{path}: missing value for leaf/leaves {', '.join(missing)}")
    return y


def cmd_pvalues_anova(args):
    t = _load_tree(args.tree)
    y = _read_leaf_values(t, args.data)
    try:
        pv = anova_pvalues(t, LeafObservations(y, args.sigma))
    except ValueError as e:
        raise InputError(str(e)) from None
    if args.combine == "simes":
        pv = simes_pvalues(t, pv)
    buf = io.StringIO()
    write_pvalues_csv(t, pv, buf)
    _emit(args.out, buf.getvalue())
    _manifest(args, args.out, {"tree": args.tree, "data": args.data})
    return EXIT_OK


def _read_matrix(path, what):
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as e:
        raise InputError(f"cannot read {path}: {e.strerror}") from None
    if not rows:
        raise InputError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    body = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise InputError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            body.append([float(x) for x in row])
        except ValueError:
            raise InputError(f"{path}:{lineno}: non-numeric {what} entry") from None
    return header, np.array(body, dtype=float).reshape(len(body), len(header))


def cmd_pvalues_regression(args):
    t = _load_tree(args.tree)
    header, X = _read_matrix(args.X, "X")
    y_header, y = _read_matrix(args.y, "y")
    if y_header != ["y"]:
        raise InputError(f"{args.y}:1: expected header 'y'")
    leaf_pos = {t.labels[u]: i for i, u in enumerate(t.leaf_order)}
    unknown = [h for h in header if h not in leaf_pos]
    if unknown:
        raise InputError(f"{args.X}:1: unknown leaf column(s) {', '.join(unknown)}")
    if sorted(leaf_pos[h] for h in header) != list(range(t.p)):
        missing = sorted(set(leaf_pos) - set(header))
        raise InputError(f"{args.X}:1: missing or repeated leaf columns {', '.join(missing)}")
    X = X[:, np.argsort([leaf_pos[h] for h in header])]
    try:
        data = RegressionData(X, y[:, 0])
    except ValueError as e:
        raise InputError(str(e)) from None
    cfg = RegressionConfig(lambda_n_c=args.lambda_n_c, tau=args.tau, folds=args.folds,
                           seed=args.seed)
    pv, diag = node_pvalues_regression(data, t, cfg)
    buf = io.StringIO()
    write_pvalues_csv(t, pv, buf)
    _emit(args.out, buf.getvalue())
    if args.diagnostics:
        with open(args.diagnostics, "w") as fh:
            json.dump({"sigma_hat": diag.sigma_hat, "lambda": diag.lam, "nu": diag.nu,
                       "lambda_n": diag.lambda_n, "fit_converged": diag.fit_converged,
                       "sigma_converged": diag.sigma_converged,
                       "projections_converged": diag.projections_converged,
                       "nodes": diag.nodes}, fh, indent=2, default=_json_default)
            fh.write("\n")
    _manifest(args, args.out, {"tree": args.tree, "X": args.X, "y": args.y},
              seeds={"cv_folds": args.seed})
    if not (diag.fit_converged and diag.sigma_converged and diag.projections_converged):
        print("error: a solver did not converge; see the diagnostics", file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_OK


# ----------------------------------------------------------------------
# parser


def _add_hat_flags(sp):
    sp.add_argument("--alpha", type=float, required=True,
                    help="target false split rate, in (0, 1)")
    sp.add_argument("--family", default="independent", choices=[f.value for f in ThresholdFamily],
                    help="threshold family: 'independent' for independent p-values, 'reshaped' "
                         "for arbitrary dependence, 'lg' for the Lynch-Guo baseline")
    sp.add_argument("--epsilon0", type=float, default=0.0,
                    help="super-uniformity slack; a positive value selects the shifted "
                         "variant of the family (thresholds lowered by this amount)")
    sp.add_argument("--beta-upper", default="printed", choices=["printed", "appendix"],
                    help="upper limit of the harmonic sum in the reshaping function: degree "
                         "sum at the current depth (printed) or previous depth minus one")


def build_parser():
    p = argparse.ArgumentParser(prog="hat", description="Hierarchical aggregation testing with false split rate control.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("test", help="run the testing procedure on a tree with node p-values")
    sp.add_argument("--tree", required=True, help="tree file (Newick, or JSON if *.json)")
    sp.add_argument("--pvalues", required=True, help="CSV with header node,pvalue")
    _add_hat_flags(sp)
    sp.add_argument("--out", help="partition JSON (default stdout)")
    sp.add_argument("--audit", help="per-node CSV: node, depth, pvalue, threshold, rejected")
    sp.set_defaults(func=cmd_test)

    sp = sub.add_parser("metrics", help="false split and true positive proportions")
    sp.add_argument("truth", help="partition JSON with 'groups' (leaf labels) or 'barriers'")
    sp.add_argument("achieved", help="partition JSON in the same form")
    sp.add_argument("--out", help="report file (default stdout)")
    sp.set_defaults(func=cmd_metrics)

    sp = sub.add_parser("simulate", help="Monte Carlo estimate of FSR and power")
    sp.add_argument("--scenario", required=True, choices=SCENARIO_KINDS,
                    help="idealized-binary: clustering tree with simulated p-values; "
                         "idealized-nonbinary: degree-5 root with k ten-leaf children; "
                         "means-3regular: Gaussian means on a 3-regular tree; "
                         "regression-rare: rare-feature regression on a 3-regular tree")
    sp.add_argument("--p", type=int, default=1000, help="number of leaves")
    sp.add_argument("--k", type=int, default=500, help="number of true groups K")
    sp.add_argument("--alphas", type=_float_list, default=(0.1, 0.2, 0.3),
                    help="comma-separated target levels")
    sp.add_argument("--families", type=_str_list, default=("independent", "lg"),
                    help="comma-separated threshold families")
    sp.add_argument("--reps", type=int, default=100, help="number of replicates")
    sp.add_argument("--seed", type=int, default=0, help="scenario seed")
    sp.add_argument("--epsilon0", type=float, default=0.0, help="shift for shifted families")
    sp.add_argument("--beta-b", type=float, default=60.0,
                    help="second Beta parameter for non-null idealized p-values")
    sp.add_argument("--n-internal-children", type=int, default=4,
                    help="idealized-nonbinary: number of root children with ten leaves")
    sp.add_argument("--sigma", type=float, default=0.3, help="means-3regular noise level")
    sp.add_argument("--pvalue-mode", default="paired", choices=["paired", "anova", "simes"],
                    help="means-3regular: 'paired' uses ANOVA p-values for independent "
                         "families and Simes p-values for reshaped ones")
    sp.add_argument("--beta", type=float, default=0.6,
                    help="regression-rare: fraction of groups with nonzero coefficient")
    sp.add_argument("--rho", type=float, default=0.2, help="regression-rare: feature density")
    sp.add_argument("--n", type=int, default=100, help="regression-rare: sample size")
    sp.add_argument("--c-sigma", type=float, default=0.6,
                    help="regression-rare: noise level relative to signal norm")
    sp.add_argument("--lambda-n-c", type=float, default=1.0,
                    help="regression-rare: projection tuning constant")
    sp.add_argument("--tau", type=float, default=1.0, help="regression-rare: variance inflation")
    sp.add_argument("--folds", type=int, default=10, help="regression-rare: CV folds")
    sp.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                    help="worker processes for replicates (default: available cores)")
    sp.add_argument("--quiet", action="store_true", help="suppress progress on stderr")
    sp.add_argument("--out", help="results CSV (default stdout)")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("pvalues-anova", help="known-variance ANOVA p-values per node")
    sp.add_argument("--tree", required=True, help="tree file")
    sp.add_argument("--data", required=True, help="CSV with header leaf,y")
    sp.add_argument("--sigma", type=float, required=True, help="known noise standard deviation")
    sp.add_argument("--combine", default="none", choices=["none", "simes"],
                    help="'simes' combines each subtree's ANOVA p-values")
    sp.add_argument("--out", help="p-value CSV (default stdout)")
    sp.set_defaults(func=cmd_pvalues_anova)

    sp = sub.add_parser("pvalues-regression",
                        help="debiased p-values from the rare-feature regression estimator")
    sp.add_argument("--tree", required=True, help="tree file")
    sp.add_argument("--X", required=True, help="design CSV; header row holds leaf labels")
    sp.add_argument("--y", required=True, help="response CSV with header y")
    sp.add_argument("--lambda-n-c", type=float, default=1.0,
                    help="projection tuning: lambda_n = c * sqrt(log p / n)")
    sp.add_argument("--tau", type=float, default=1.0,
                    help="variance inflation added to the debiased variance (tau / n)")
    sp.add_argument("--folds", type=int, default=10, help="cross-validation folds")
    sp.add_argument("--seed", type=int, default=0, help="fold assignment seed")
    sp.add_argument("--threads", type=int, default=1,
                    help="accepted for interface symmetry; the pipeline runs in one process")
    sp.add_argument("--out", help="p-value CSV (default stdout)")
    sp.add_argument("--diagnostics", help="JSON with sigma_hat, tuning and per-node statistics")
    sp.set_defaults(func=cmd_pvalues_regression)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InputError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except InvariantError as e:
        print(f"internal error: {e}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
