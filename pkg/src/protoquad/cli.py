"""Command-line entry point: ``protoquad {train,embed,select,diagnose,experiment}``.

Exit status is 0 on success, 1 on a domain error (bad data, failed checks,
degenerate inputs) and 2 on a usage error. Outputs are deterministic given
``--seed``: JSON is written with sorted keys and no timestamps.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import analysis
from .embedding import (
    MODES,
    Dataset,
    ParamVector,
    estimate_fisher_info,
    per_example_gradients,
    prediction_gradients,
    train_logistic,
)
from .errors import ProtoquadError
from .io import dump_kernel_csv, ensure_parent, load_dataset, load_embeddings, save_embeddings, write_json
from .kernel import KernelOracle, affinity_vector
from .variants import METHODS, default_threads, select
from .workflows import ExperimentConfig, make_synthetic, run_experiment

logger = logging.getLogger("protoquad")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _params_to_dict(params: ParamVector) -> dict:
    return {"values": [float(v) for v in params.values], "intercept": params.intercept,
            "converged": bool(params.converged), "grad_norm": float(params.grad_norm),
            "n_iter": int(params.n_iter)}


def _load_params(path) -> ParamVector:
    with open(path, encoding="utf-8") as fh:
        d = json.load(fh)
    try:
        return ParamVector(d["values"], intercept=bool(d.get("intercept", True)),
                           converged=bool(d.get("converged", True)),
                           grad_norm=float(d.get("grad_norm", 0.0)), n_iter=int(d.get("n_iter", 0)))
    except KeyError:
        raise ProtoquadError(f"{path}: parameter file has no 'values'") from None


def _fit(data: Dataset, args) -> ParamVector:
    return train_logistic(data, l2=args.l2, tol=args.tol, max_iter=args.max_iter,
                          intercept=not args.no_intercept)


def cmd_train(args) -> int:
    data = load_dataset(args.data)
    params = _fit(data, args)
    ensure_parent(args.out)
    write_json(_params_to_dict(params), args.out)
    if not params.converged:
        logger.warning("training did not converge; parameters written with converged=false")
    return 0


def cmd_embed(args) -> int:
    data = load_dataset(args.data)
    params = _load_params(args.params) if args.params else _fit(data, args)
    G = prediction_gradients(params, data.features) if args.predicted else per_example_gradients(params, data)
    ensure_parent(args.out)
    save_embeddings(G, args.out)
    return 0


def _select_inputs(args):
    """Training gradients, target gradients and extra report fields."""
    extra = {}
    if args.train_grads:
        G = load_embeddings(args.train_grads)
        ids = [str(i) for i in range(G.shape[0])]
    else:
        if not args.train:
            raise UsageError("select: one of --train or --train-grads is required")
        train = load_dataset(args.train)
        params = _fit(train, args)
        G = per_example_gradients(params, train)
        ids = train.ids
        extra["model_converged"] = bool(params.converged)
    if args.test_grads:
        T = load_embeddings(args.test_grads)
    elif args.test:
        if args.train_grads:
            raise UsageError("select: --test needs a model; pass --train or use --test-grads")
        test = load_dataset(args.test)
        # test labels are never read: targets are gradients at the model's own predictions
        T = prediction_gradients(params, test.features)
    else:
        raise UsageError("select: one of --test or --test-grads is required")
    return G, T, ids, extra


def cmd_select(args) -> int:
    if args.k < 1:
        raise UsageError("select: --k must be positive")
    G, T, ids, extra = _select_inputs(args)
    metric = estimate_fisher_info(G, args.ridge, mode=args.mode) if args.mode == "full" else None
    oracle = KernelOracle(G, T, metric)
    if args.nugget:
        W = oracle.whitened("train")
        oracle.nugget = args.nugget * float(np.mean(np.einsum("ij,ij->i", W, W)))
    aff = affinity_vector(oracle)
    report = select(args.method, args.k, oracle, aff, delta=args.delta, n_shards=args.shards,
                    seed=args.seed, tol_d=args.tol_d, threads=args.threads)
    out = report.to_dict()
    out["selected_ids"] = [ids[i] for i in report.selections]
    out["config"]["ridge_coeff"] = args.ridge
    out["config"]["nugget_relative"] = args.nugget
    out.update(extra)
    ensure_parent(args.out)
    write_json(out, args.out)
    if args.dump_kernel:
        ensure_parent(args.dump_kernel)
        dump_kernel_csv(oracle, args.dump_kernel)
    if report.truncated:
        logger.warning("selection stopped after %d of %d atoms", len(report.selections), args.k)
    return 0


def _hessian_row(seed):
    data = make_synthetic(n=20000, d=5, seed=seed, scale=1.5, bias=0.0)
    params = train_logistic(data, l2=0.0, tol=1e-10)
    rep = analysis.hessian_gram_check(data, params)
    return ("hessian-gram", rep.rel_frobenius <= 0.05,
            f"rel Frobenius {rep.rel_frobenius:.3g} (tol 0.05), n={rep.n}"), rep.to_dict()


def cmd_diagnose(args) -> int:
    rows, details = [], {}
    if args.suite in ("appendix", "all"):
        rows += analysis.appendix_suite(seed=args.seed, n_instances=args.instances)
    if args.suite in ("hessian", "all"):
        row, details["hessian-gram"] = _hessian_row(args.seed)
        rows.append(row)
    width = max(len(r[0]) for r in rows)
    lines = [f"{'check':<{width}}  result  detail"]
    lines += [f"{name:<{width}}  {'PASS' if ok else 'FAIL'}    {detail}" for name, ok, detail in rows]
    print("\n".join(lines))
    if args.out:
        ensure_parent(args.out)
        write_json({"suite": args.suite, "seed": args.seed,
                    "checks": [{"name": n, "passed": bool(ok), "detail": d} for n, ok, d in rows],
                    "details": details}, args.out)
    return 0 if all(ok for _, ok, _ in rows) else 1


def cmd_experiment(args) -> int:
    with open(args.config, encoding="utf-8") as fh:
        cfg = json.load(fh)
    if args.seed is not None:
        cfg["seed"] = args.seed
    report = run_experiment(ExperimentConfig.from_dict(cfg))
    ensure_parent(args.out)
    Path(args.out).write_text(report.to_json() + "\n", encoding="utf-8")
    if args.csv:
        ensure_parent(args.csv)
        Path(args.csv).write_text(report.to_csv(), encoding="utf-8")
    for flag in report.flags:
        logger.warning(flag)
    return 0


def _positive_int(s):
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {s}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="protoquad", description="Fisher-kernel prototype selection.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    def training_flags(sp):
        sp.add_argument("--l2", type=float, default=0.0, help="L2 penalty on non-intercept weights")
        sp.add_argument("--tol", type=float, default=1e-8, help="gradient-norm stopping tolerance")
        sp.add_argument("--max-iter", type=int, default=100)
        sp.add_argument("--no-intercept", action="store_true")
        sp.add_argument("--seed", type=int, default=0)

    sp = sub.add_parser("train", help="fit logistic regression")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    training_flags(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("embed", help="write per-example gradients (FISHGRAD)")
    sp.add_argument("--data", required=True)
    sp.add_argument("--params", help="parameter JSON from 'train'; fitted on --data if absent")
    sp.add_argument("--predicted", action="store_true",
                    help="take gradients at predicted labels (ignores the label column)")
    sp.add_argument("--out", required=True)
    training_flags(sp)
    sp.set_defaults(func=cmd_embed)

    sp = sub.add_parser("select", help="select prototypes for a test set")
    sp.add_argument("--train")
    sp.add_argument("--test")
    sp.add_argument("--train-grads")
    sp.add_argument("--test-grads")
    sp.add_argument("--k", type=int, required=True)
    sp.add_argument("--mode", choices=MODES, default="full")
    sp.add_argument("--ridge", type=float, default=1e-6, help="ridge coefficient, relative to trace/p")
    sp.add_argument("--nugget", type=float, default=1e-3, help="kernel nugget, relative to mean diagonal")
    sp.add_argument("--method", choices=METHODS, default="sbq")
    sp.add_argument("--delta", type=float, default=0.1)
    sp.add_argument("--shards", type=_positive_int, default=1)
    sp.add_argument("--tol-d", type=float, default=None, help="Schur-complement degeneracy threshold")
    sp.add_argument("--threads", type=_positive_int, default=None)
    sp.add_argument("--dump-kernel", help="also write the train x train kernel as CSV (t <= 10000)")
    sp.add_argument("--out", required=True)
    training_flags(sp)
    sp.set_defaults(func=cmd_select)

    sp = sub.add_parser("diagnose", help="run the theory checks")
    sp.add_argument("--suite", choices=("appendix", "hessian", "all"), default="appendix")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--instances", type=_positive_int, default=20)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_diagnose)

    sp = sub.add_parser("experiment", help="run a workflow from a JSON config")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--csv")
    sp.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    sp.add_argument("--threads", type=_positive_int, default=None)
    sp.set_defaults(func=cmd_experiment)
    return p


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if hasattr(args, "threads") and args.threads is None:
        args.threads = default_threads()
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"protoquad: error: {exc}", file=sys.stderr)
        return 2
    except (ProtoquadError, ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"protoquad: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_cli())
