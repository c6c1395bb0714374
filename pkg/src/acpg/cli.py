"""Command line entry point: ``acpg <subcommand> ...``.

Subcommands: etf-gen, train, sweep, metrics, lpm-verify. Set ACPG_LOG to
error, info or debug to control log verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from .config import ConfigError, parse_config
from .etf import EtfMatrix, generate_etf, structure_errors
from .experiment import run_experiment, sweep
from .lpm import LpmProblem, kkt_check, solve_projected_ascent, theorem1_residual
from .metrics import MetricError, collapse_report, nearest_center_agreement, read_activation_dump
from .net import PolicyNet

log = logging.getLogger("acpg")

REPORT_SCHEMA = 1
LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


def parse_seeds(text: str) -> list[int]:
    """``"3"``, ``"0..9"`` (inclusive) or ``"1,4,7"``."""
    text = text.strip()
    if not text:
        raise argparse.ArgumentTypeError("empty seed list")
    try:
        if ".." in text:
            lo, hi = text.split("..", 1)
            seeds = list(range(int(lo), int(hi) + 1))
        else:
            seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}") from None
    if not seeds:
        raise argparse.ArgumentTypeError(f"seed list {text!r} is empty")
    return seeds


def parse_floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad number list {text!r}") from None


def _write_json(path: str | Path | None, data: dict) -> None:
    text = json.dumps(data, indent=2)
    if path is None:
        print(text)
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)


# -- subcommands ----------------------------------------------------------------


def cmd_etf_gen(args) -> int:
    etf = generate_etf(args.k, args.d, args.energy, seed=args.seed)
    errs = structure_errors(etf)
    log.info("ETF k=%d d=%d errors %s", args.k, args.d, errs)
    if args.out:
        etf.save(args.out)
    else:
        print(json.dumps(etf.to_dict()))
    return 0


def cmd_train(args) -> int:
    cfg = parse_config(args.config)
    failed = 0
    for seed in args.seeds:
        run_cfg = cfg.replace(seed=seed)
        out = Path(args.out) / f"seed{seed}" if len(args.seeds) > 1 else Path(args.out)
        t0 = time.time()
        try:
            art = run_experiment(run_cfg, out)
        except Exception as exc:
            failed += 1
            log.error("seed %d failed: %s: %s", seed, type(exc).__name__, exc)
            continue
        s = art.summary
        print(f"seed {seed}: best {s['best']:.2f} final {s['final']:.2f} "
              f"stop {s['stop']}{'' if s['stop_reached'] else ' (not reached)'} "
              f"[{time.time() - t0:.1f}s] -> {out}")
    return 1 if failed else 0


def cmd_sweep(args) -> int:
    cfg = parse_config(args.config)
    table, failures = sweep(cfg, args.seeds, epsilons=args.epsilons, variants=args.variants,
                            jobs=args.jobs, out_dir=args.out)
    for row in table:
        if "best_mean" not in row:
            print(f"{row['variant']:>8} eps={row['epsilon']:g}: all {row['n_seeds']} runs failed")
            continue
        print(f"{row['variant']:>8} eps={row['epsilon']:g} n={row['n_seeds'] - row['n_failed']}: "
              f"best {row['best_mean']:.2f}±{row['best_std']:.2f} "
              f"final {row['final_mean']:.2f}±{row['final_std']:.2f} "
              f"stop {row['stop_mean']:.1f}±{row['stop_std']:.1f}")
    for f in failures:
        log.error("cell %s eps=%g seed=%d failed: %s", f["variant"], f["epsilon"], f["seed"], f["error"])
    return 1 if failures else 0


def cmd_metrics(args) -> int:
    if args.etf:
        w = EtfMatrix.load(args.etf).head
    else:
        w = PolicyNet.load(args.checkpoint).head
    acts = read_activation_dump(args.activations, w.shape[0])
    report = collapse_report(acts, w, label_source=args.label_source, sampled=args.sampled)
    data = {"schema": REPORT_SCHEMA, **report.to_dict(),
            "nc4_agreement": float(np.mean(nearest_center_agreement(acts, w))),
            "n_activations": int(len(acts.labels))}
    _write_json(args.out, data)
    return 0


def cmd_lpm_verify(args) -> int:
    etf = generate_etf(args.k, args.d, args.ew, seed=args.seed)
    counts = args.imbalance or [1] * args.k
    if len(counts) != args.k:
        raise ValueError(f"--imbalance needs {args.k} class sizes, got {len(counts)}")
    problem = LpmProblem.from_counts(etf, [int(c) for c in counts], args.eh)
    result = solve_projected_ascent(problem, iters=args.iters, rng=np.random.default_rng(args.seed))
    tol = 1e-3 * np.sqrt(args.eh * args.ew)
    residual = theorem1_residual(result.h, problem)

    kkt = []
    closed = problem.closed_form()
    for k in range(args.k):
        rep = kkt_check(closed[np.flatnonzero(problem.labels == k)[0]], problem, k)
        kkt.append({"class": k, "residual": rep.residual, "lambda": rep.lam,
                    "lambda_closed_form": rep.lam_closed_form, "active": rep.active})
    ok = residual <= tol and all(
        r["residual"] < 1e-10 and abs(r["lambda"] - r["lambda_closed_form"]) <= 1e-8 * r["lambda_closed_form"]
        for r in kkt)
    _write_json(args.out, {
        "schema": REPORT_SCHEMA,
        "k": args.k, "d": args.d, "e_h": args.eh, "e_w": args.ew, "counts": list(map(int, counts)),
        "iterations": result.iterations, "converged": result.converged,
        "objective": result.objective,
        "theorem1_residual": residual, "tolerance": tol,
        "kkt": kkt, "passed": bool(ok),
    })
    return 0 if ok else 1


# -- parser -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="acpg", description="Policy gradient with fixed simplex-ETF action heads.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("etf-gen", help="generate a simplex ETF and save it as JSON")
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--d", type=int, required=True)
    p.add_argument("--energy", type=float, default=1.0, help="squared column norm E_W")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="output path (stdout if omitted)")
    p.set_defaults(func=cmd_etf_gen)

    p = sub.add_parser("train", help="train one run per seed")
    p.add_argument("--config", required=True)
    p.add_argument("--seeds", type=parse_seeds, default=[0], help='e.g. "0..4" or "1,3"')
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="variant x epsilon x seed grid with aggregated table")
    p.add_argument("--config", required=True)
    p.add_argument("--seeds", type=parse_seeds, required=True)
    p.add_argument("--epsilons", type=parse_floats, default=None)
    p.add_argument("--variants", type=lambda s: [v for v in s.split(",") if v],
                   default=["baseline", "acpg"])
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("metrics", help="collapse report for an activation dump")
    p.add_argument("--activations", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--etf", help="ETF JSON supplying the head W")
    src.add_argument("--checkpoint", help="policy checkpoint supplying the head W")
    p.add_argument("--label-source", default="oracle")
    p.add_argument("--sampled", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("lpm-verify", help="solve the layer-peeled model and check the optimum")
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--d", type=int, required=True)
    p.add_argument("--eh", type=float, default=1.0)
    p.add_argument("--ew", type=float, default=1.0)
    p.add_argument("--imbalance", type=parse_floats, default=None, help='class sizes, e.g. "1,1,100"')
    p.add_argument("--iters", type=int, default=50_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_lpm_verify)
    return ap


def setup_logging() -> None:
    level = os.environ.get("ACPG_LOG", "error").lower()
    logging.basicConfig(level=LOG_LEVELS.get(level, logging.ERROR),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if level not in LOG_LEVELS:
        log.warning("unknown ACPG_LOG=%r, using error", level)


def main(argv=None) -> int:
    setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "jobs", 1) < 1:
        parser.error("--jobs must be at least 1")
    try:
        return args.func(args)
    except (ConfigError, MetricError, FileNotFoundError, ValueError) as exc:
        print(f"acpg: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
