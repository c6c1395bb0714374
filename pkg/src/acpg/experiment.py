"""Training runs, per-epoch bookkeeping and multi-seed sweeps."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import TrainConfig
from .envs import IdealCliffWorld, make_env, optimal_policy
from .etf import generate_etf
from .metrics import ActivationSet, CollapseReport, MetricError, collapse_report, write_activation_dump
from .net import Optimizer, PolicyNet
from .pg import collect_episodes, episodes_to_batch, ppo_rollout_batch, ppo_update, reinforce_update

log = logging.getLogger("acpg")

RUN_SCHEMA = 1
METRIC_COLUMNS = [
    "epoch", "reward_mean", "reward_std", "stop_flag",
    "equinorm", "equiang_std", "maxangle", "withinvar", "selfdual",
    "equiang_std_w", "maxangle_w", "train_reward", "loss", "env_steps", "metrics_valid",
]
SWEEP_COLUMNS = [
    "variant", "epsilon", "n_seeds", "n_failed",
    "best_mean", "best_std", "final_mean", "final_std", "stop_mean", "stop_std",
    "stop_median", "n_stop_reached", "reward_auc_mean", "reward_auc_std",
]


class HeadMutatedError(RuntimeError):
    pass


@dataclass
class RunArtifact:
    config: dict
    rows: list[dict]
    summary: dict
    reports: list[CollapseReport] = field(default_factory=list)
    paths: dict[str, str] = field(default_factory=dict)
    head_digest: str | None = None


def stop_epoch(rewards, threshold: float | None, window: int = 5) -> tuple[int, bool]:
    """First 1-based epoch whose trailing ``window``-epoch mean reaches ``threshold``.

    Returns ``(len(rewards), False)`` when the threshold is never reached.
    """
    r = np.asarray(rewards, dtype=np.float64)
    if threshold is not None:
        for e in range(window, len(r) + 1):
            if r[e - window:e].mean() >= threshold:
                return e, True
    return len(r), False


def summarize(rows: list[dict], threshold: float | None, window: int = 5) -> dict:
    rewards = [row["reward_mean"] for row in rows]
    stop, reached = stop_epoch(rewards, threshold, window)
    return {
        "epochs": len(rows),
        "best": float(max(rewards)),
        "final": float(rewards[-1]),
        "stop": int(stop),
        "stop_reached": bool(reached),
        "reward_auc": float(np.mean(rewards)),
        "threshold": threshold,
    }


def _seeds(seed: int) -> dict[str, np.random.Generator]:
    names = ("net", "etf", "value", "collect", "update", "eval")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {name: np.random.default_rng(s) for name, s in zip(names, children)}


def build_policy(config: TrainConfig, obs_dim: int, n_actions: int,
                 rng: np.random.Generator, etf_seed: int | None) -> PolicyNet:
    etf = None
    if config.acpg:
        etf = generate_etf(n_actions, config.hidden[-1], config.energy_w, seed=etf_seed)
    return PolicyNet(obs_dim, config.hidden, n_actions, etf=etf, rng=rng, eh_clip=config.eh_clip)


def evaluate(net: PolicyNet, envs, rng: np.random.Generator, labeler=None):
    """Test episodes without epsilon exploration."""
    return collect_episodes(envs, net, 0.0, rng, labeler=labeler)


def _activation_set(net, config, episodes, oracle, eval_env):
    if oracle is not None:
        states = eval_env.all_states()
        obs = np.stack([eval_env.observe(s) for s in states])
        labels = np.array([oracle[s] for s in states])
        return ActivationSet(net.activations(obs), labels, net.n_actions), "oracle", False, states
    obs = np.concatenate([ep.obs for ep in episodes])
    fwd = net.forward(obs)
    labels = np.argmax(fwd.logits, axis=1)
    return ActivationSet(fwd.h, labels, net.n_actions), "policy_argmax", True, None


def _nan_report(epoch: int, source: str, sampled: bool) -> CollapseReport:
    nan = float("nan")
    return CollapseReport(epoch, nan, nan, nan, nan, nan, nan, nan, source, sampled)


def run_experiment(config: TrainConfig, out_dir: str | Path | None = None,
                   dump_activations: bool = True) -> RunArtifact:
    config = config.resolved()
    rngs = _seeds(config.seed)
    env_seed = config.env.seed if config.env.seed is not None else config.seed
    probe = make_env(config.env, seed=env_seed)
    k = probe.n_actions

    etf_seed = int(np.random.SeedSequence(config.seed).generate_state(1)[0])
    net = build_policy(config, probe.obs_dim, k, rngs["net"], etf_seed)
    digest = net.head_digest() if net.frozen else None
    pi_opt = Optimizer(net, config.optimizer, config.lr, config.max_grad_norm)

    value_net = v_opt = None
    if config.algo == "ppo":
        value_net = PolicyNet(probe.obs_dim, config.hidden, 1, rng=rngs["value"])
        v_opt = Optimizer(value_net, config.optimizer, config.lr, config.max_grad_norm)

    oracle = labeler = None
    if isinstance(probe, IdealCliffWorld):
        oracle = optimal_policy(probe, gamma=config.gamma)
        lut = np.array([oracle[s] for s in range(probe.n_states)])
        labeler = lambda obs: lut[np.argmax(obs, axis=1)]  # noqa: E731

    train_envs = [make_env(config.env) for _ in range(config.episodes_per_collect)]
    test_envs = [make_env(config.env) for _ in range(max(config.test_episodes, 1))]

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "checkpoints").mkdir(exist_ok=True)
        if net.frozen:
            net.etf.save(out / "checkpoints" / "etf.json")

    rows: list[dict] = []
    reports: list[CollapseReport] = []
    last_activations = None
    try:
        for epoch in range(1, config.epochs + 1):
            steps, losses, train_returns = 0, [], []
            while steps < config.steps_per_epoch:
                episodes = collect_episodes(train_envs, net, config.epsilon, rngs["collect"], labeler)
                if config.balanced:
                    episodes = _top_up(episodes, train_envs, net, config, rngs["collect"], labeler, k)
                steps += sum(len(ep) for ep in episodes)
                train_returns.extend(ep.total_reward for ep in episodes)
                if config.algo == "reinforce":
                    batch = episodes_to_batch(episodes, config.gamma)
                    losses.append(reinforce_update(net, pi_opt, batch, config, rngs["update"]))
                else:
                    batch = ppo_rollout_batch(episodes, value_net, config.gamma, config.gae_lambda)
                    stats = ppo_update(net, value_net, pi_opt, v_opt, batch, config, rngs["update"])
                    losses.append(-stats["policy_obj"])
                    if stats["kl_abort"]:
                        log.info("epoch %d: KL guard stopped the update early", epoch)

            if digest is not None and net.head_digest() != digest:
                raise HeadMutatedError("frozen ETF head changed during training")

            if config.test_episodes > 0:
                test_eps = evaluate(net, test_envs, rngs["eval"], labeler)
                test_returns = [ep.total_reward for ep in test_eps]
            else:
                test_eps, test_returns = episodes, train_returns

            acts, source, sampled, state_ids = _activation_set(net, config, test_eps, oracle, probe)
            try:
                report = collapse_report(acts, net.head, epoch, source, sampled)
                valid = report.is_finite()
            except MetricError as exc:
                log.debug("epoch %d: collapse metrics undefined (%s)", epoch, exc)
                report, valid = _nan_report(epoch, source, sampled), False
            reports.append(report)
            last_activations = (acts, state_ids)

            rows.append({
                "epoch": epoch,
                "reward_mean": float(np.mean(test_returns)),
                "reward_std": float(np.std(test_returns)),
                "stop_flag": 0,
                "equinorm": report.equinorm_w,
                "equiang_std": report.equiang_std_h,
                "maxangle": report.maxangle_h,
                "withinvar": report.within_var,
                "selfdual": report.self_duality,
                "equiang_std_w": report.equiang_std_w,
                "maxangle_w": report.maxangle_w,
                "train_reward": float(np.mean(train_returns)),
                "loss": float(np.mean(losses)),
                "env_steps": steps,
                "metrics_valid": int(valid),
            })
            log.info("epoch %d reward %.2f", epoch, rows[-1]["reward_mean"])
    except Exception:
        if out is not None and rows:
            _write_rows(out, rows, config)
        raise

    summary = summarize(rows, config.threshold, config.stop_window)
    if summary["stop_reached"]:
        for row in rows[summary["stop"] - 1:]:
            row["stop_flag"] = 1

    artifact = RunArtifact(config=config.to_dict(), rows=rows, summary=summary,
                           reports=reports, head_digest=digest)
    if out is not None:
        artifact.paths = _write_outputs(out, artifact, net, value_net,
                                        last_activations if dump_activations else None)
    return artifact


def _top_up(episodes, envs, net, config, rng, labeler, k, max_rounds: int = 50):
    """Collect extra episodes until every optimal-action class can fill a balanced batch."""
    for _ in range(max_rounds):
        counts = np.bincount(np.concatenate([ep.labels for ep in episodes]), minlength=k)
        if counts.min() >= config.balanced:
            return episodes
        episodes = episodes + collect_episodes(envs, net, config.epsilon, rng, labeler)
    return episodes


def _write_rows(out: Path, rows: list[dict], config: TrainConfig) -> Path:
    path = out / "metrics.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    return path


def _write_outputs(out: Path, art: RunArtifact, net, value_net, activations) -> dict[str, str]:
    paths = {"metrics": str(_write_rows(out, art.rows, None))}
    ckpt = out / "checkpoints" / "final.json"
    net.save(ckpt)
    paths["checkpoint"] = str(ckpt)
    if value_net is not None:
        vpath = out / "checkpoints" / "value_final.json"
        value_net.save(vpath)
        paths["value_checkpoint"] = str(vpath)
    if net.frozen:
        paths["etf"] = str(out / "checkpoints" / "etf.json")
    if activations is not None:
        acts, state_ids = activations
        apath = out / "activations.jsonl"
        write_activation_dump(apath, acts, state_ids)
        paths["activations"] = str(apath)
    reports_path = out / "reports.json"
    reports_path.write_text(json.dumps([r.to_dict() for r in art.reports], default=_json_float))
    paths["reports"] = str(reports_path)
    run_path = out / "run.json"
    paths["run"] = str(run_path)
    run_path.write_text(json.dumps({
        "schema": RUN_SCHEMA,
        "config": art.config,
        "summary": art.summary,
        "head_digest": art.head_digest,
        "paths": paths,
    }, indent=2))
    return paths


def _json_float(value):
    return None if isinstance(value, float) and math.isnan(value) else value


def read_rows(path: str | Path) -> list[dict]:
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.append({key: float(val) if key != "epoch" else int(val) for key, val in rec.items()})
    return rows


# -- sweeps -------------------------------------------------------------------


@dataclass
class Cell:
    variant: str
    epsilon: float
    seed: int


def variant_config(config: TrainConfig, variant: str, epsilon: float | None, seed: int) -> TrainConfig:
    if variant not in ("baseline", "acpg"):
        raise ValueError(f"unknown variant {variant!r}")
    changes = {"acpg": variant == "acpg", "seed": seed}
    if epsilon is not None:
        changes["epsilon"] = epsilon
    return config.replace(**changes)


def _run_cell(args):
    config, cell, out_dir = args
    os.environ.setdefault("OMP_NUM_THREADS", "1")
    cfg = variant_config(config, cell.variant, cell.epsilon, cell.seed)
    sub = None
    if out_dir is not None:
        sub = Path(out_dir) / f"{cell.variant}_eps{cell.epsilon:g}_seed{cell.seed}"
    try:
        art = run_experiment(cfg, sub)
        return cell, art.summary, None
    except Exception as exc:  # reported per cell, other cells keep running
        return cell, None, f"{type(exc).__name__}: {exc}"


def aggregate(summaries: list[dict]) -> dict:
    """Mean and population std of Best / Final / Stop over seeds."""
    if not summaries:
        return {}
    best = np.array([s["best"] for s in summaries])
    final = np.array([s["final"] for s in summaries])
    stop = np.array([s["stop"] for s in summaries])
    auc = np.array([s.get("reward_auc", np.nan) for s in summaries])
    return {
        "best_mean": float(best.mean()), "best_std": float(best.std()),
        "final_mean": float(final.mean()), "final_std": float(final.std()),
        "stop_mean": float(stop.mean()), "stop_std": float(stop.std()),
        "stop_median": float(np.median(stop)),
        "n_stop_reached": int(sum(bool(s["stop_reached"]) for s in summaries)),
        "reward_auc_mean": float(auc.mean()), "reward_auc_std": float(auc.std()),
    }


def sweep(config: TrainConfig, seeds, epsilons=None, variants=("baseline", "acpg"),
          jobs: int = 1, out_dir: str | Path | None = None) -> tuple[list[dict], list[dict]]:
    """Run every (variant, epsilon, seed) cell; one aggregated row per (variant, epsilon).

    Returns ``(table_rows, failures)``. Failed cells are listed and excluded
    from the aggregates.
    """
    seeds = list(seeds)
    if not seeds:
        raise ValueError("at least one seed is required")
    eps_grid = [None] if not epsilons else [float(e) for e in epsilons]
    cells = [Cell(v, config.epsilon if e is None else e, s)
             for v in variants for e in eps_grid for s in seeds]
    args = [(config, c, out_dir) for c in cells]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_cell, args))
    else:
        results = [_run_cell(a) for a in args]

    table, failures = [], []
    for v in variants:
        for e in eps_grid:
            eps = config.epsilon if e is None else e
            group = [(c, s, err) for c, s, err in results if c.variant == v and c.epsilon == eps]
            ok = [s for _, s, err in group if err is None]
            for c, _, err in group:
                if err is not None:
                    failures.append({"variant": c.variant, "epsilon": c.epsilon,
                                     "seed": c.seed, "error": err})
            row = {"variant": v, "epsilon": eps, "n_seeds": len(group),
                   "n_failed": len(group) - len(ok)}
            row.update(aggregate(ok))
            table.append(row)

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "sweep.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS, restval="")
            writer.writeheader()
            for row in table:
                writer.writerow(row)
        (out / "sweep.json").write_text(json.dumps({
            "schema": RUN_SCHEMA, "config": config.to_dict(), "seeds": seeds,
            "rows": table, "failures": failures,
        }, indent=2))
    return table, failures
