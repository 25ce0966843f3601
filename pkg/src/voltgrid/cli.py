"""Command-line entry point: simulate, train, eval, synth and report.

Exit codes: 0 success, 2 usage or configuration error, 3 runtime abort.
Log verbosity comes from the ``VOLTGRID_LOG`` environment variable.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import data
from .config import PRESETS, ConfigError, TrainConfig, from_dict, load_config
from .encoder import VARIANTS
from .env import ChargingEnv, EpisodeConfig, EnvError, metrics

log = logging.getLogger("voltgrid")

EXIT_OK, EXIT_USAGE, EXIT_ABORT = 0, 2, 3
SUMMARY_COLUMNS = (
    "episode",
    "seed",
    "energy_cost",
    "cycling_overhead",
    "avg_voltage_violation",
    "avg_demand_dissatisfaction",
    "n_departed",
    "total_reward",
    "total_cost",
    "objective",
)
TABLE_COLUMNS = (
    ("energy_cost", "Energy cost ($)"),
    ("cycling_overhead", "Cycling overhead (%)"),
    ("avg_voltage_violation", "Voltage violation (p.u./step)"),
    ("avg_demand_dissatisfaction", "Dissatisfaction (kWh/EV)"),
    ("objective", "Objective"),
)


class UsageError(Exception):
    pass


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def _writer(path: Path):
    fh = open(path, "w", newline="")
    return fh, csv.writer(fh, lineterminator="\n")


def _scenario(ref: str) -> data.ScenarioBundle:
    try:
        return data.load_scenario(ref)
    except (data.ScenarioError, OSError, ValueError, KeyError) as exc:
        raise UsageError(f"cannot load scenario {ref!r}: {exc}") from exc


def _policy(name: str, checkpoint: Optional[str], bundle):
    from .learner.train import BASELINES, AgentPolicy, CheckpointMismatch, load_agent

    if name == "checkpoint":
        if not checkpoint:
            raise UsageError("--policy checkpoint requires --checkpoint")
        try:
            agent, _ = load_agent(checkpoint, bundle)
        except (OSError, KeyError, ValueError, CheckpointMismatch) as exc:
            raise UsageError(f"checkpoint {checkpoint} is unusable with this scenario: {exc}") from exc
        return AgentPolicy(agent)
    if name not in BASELINES:
        raise UsageError(f"unknown policy {name!r}")
    return BASELINES[name]()


def _write_summary(path: Path, rows: list[dict]) -> None:
    fh, w = _writer(path)
    with fh:
        w.writerow(SUMMARY_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in SUMMARY_COLUMNS])


def format_table(summary: dict, title: str = "") -> str:
    lines = [title] if title else []
    for key, label in TABLE_COLUMNS:
        m, s = summary[key]
        lines.append(f"  {label:<32s} {m:12.4g} ± {s:.3g}")
    return "\n".join(lines)


# ---------------------------------------------------------------- simulate

def cmd_simulate(args) -> int:
    from .learner.train import CheckpointMismatch

    bundle = _scenario(args.scenario)
    policy = _policy(args.policy, args.checkpoint, bundle)
    env = ChargingEnv(EpisodeConfig(bundle))
    out = Path(args.out)
    (out / "traces").mkdir(parents=True, exist_ok=True)
    bus_ids = env.network.bus_ids
    rows = []
    if hasattr(policy, "agent") and policy.agent.obs_dim != env.obs_dim:
        raise UsageError(str(CheckpointMismatch("checkpoint observation size differs from scenario")))
    for e in range(args.episodes):
        seed = args.seed + e
        obs = env.reset(seed)
        policy.reset(env, seed)
        done = False
        while not done:
            obs, _, _, info = env.step(policy.act(obs, env))
            done = info["done"]
        tr = env.trace
        fh, w = _writer(out / "traces" / f"ep{e:04d}_voltage.csv")
        with fh:
            w.writerow(("step", "bus", "voltage_pu"))
            for t, v in enumerate(tr.voltages):
                for b, x in zip(bus_ids, v):
                    w.writerow((t, b, _fmt(x)))
        fh, w = _writer(out / "traces" / f"ep{e:04d}_evcs.csv")
        with fh:
            w.writerow(("step", "evcs", "p_trade_kw", "f_td", "f_dg", "f_ds", "f_vt"))
            for t in range(len(tr.f_td)):
                for k in range(env.n_agents):
                    w.writerow((t, k, _fmt(tr.p_trade_kw[t][k]), _fmt(tr.f_td[t][k]), _fmt(tr.f_dg[t][k]), _fmt(tr.f_ds[t][k]), _fmt(tr.f_vt[t])))
        m = metrics(tr)
        m.update(episode=e, seed=seed)
        rows.append(m)
        log.info("episode %d: objective %.2f, violation %.4g, dissatisfaction %.3f", e, m["objective"], m["avg_voltage_violation"], m["avg_demand_dissatisfaction"])
    _write_summary(out / "metrics.csv", rows)
    from .learner.train import summarize

    print(format_table(summarize(rows), f"{args.policy} policy, {args.episodes} episode(s)"))
    return EXIT_OK


# ---------------------------------------------------------------- train

def resolve_train_config(args) -> TrainConfig:
    if args.config:
        cfg = load_config(args.config)
        if args.preset:
            doc = json.loads(Path(args.config).read_text())
            doc["preset"] = args.preset
            cfg = from_dict({k: v for k, v in doc.items() if k != "scenario"} | {"scenario": cfg.scenario})
    else:
        cfg = PRESETS[args.preset or "desk"]
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.iters is not None:
        over["iterations"] = args.iters
    if args.episodes is not None:
        over["episodes_per_iter"] = args.episodes
    if args.scenario is not None:
        over["scenario"] = args.scenario
    if args.encoder is not None:
        over["encoder"] = {"variant": args.encoder}
    return from_dict(over, base=cfg) if over else cfg


def cmd_train(args) -> int:
    from .learner.train import CheckpointMismatch, TrainingAborted, train

    try:
        cfg = resolve_train_config(args)
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc
    bundle = _scenario(cfg.scenario)
    try:
        res = train(cfg, args.out, resume=args.resume, workers=args.workers, scenario=bundle)
    except CheckpointMismatch as exc:
        raise UsageError(str(exc)) from exc
    except TrainingAborted as exc:
        log.error("training aborted: %s (last good checkpoint kept in %s)", exc, args.out)
        return EXIT_ABORT
    last = res.log_rows[-1] if res.log_rows else None
    if last:
        print(f"trained {len(res.log_rows)} iteration(s); final lambda {float(last['lambda']):.4g}; outputs in {res.out_dir}")
    return EXIT_OK


# ---------------------------------------------------------------- eval

def cmd_eval(args) -> int:
    from .learner.train import CheckpointMismatch, evaluate

    bundle = _scenario(args.scenario)
    if args.checkpoint and args.policy not in (None, "checkpoint"):
        raise UsageError("--checkpoint conflicts with a baseline --policy")
    name = "checkpoint" if args.checkpoint else (args.policy or "greedy")
    policy = _policy(name, args.checkpoint, bundle)
    try:
        res = evaluate(policy, bundle, episodes=args.episodes, seed_base=args.seed)
    except CheckpointMismatch as exc:
        raise UsageError(str(exc)) from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_summary(out / "eval_episodes.csv", res["rows"])
    fh, w = _writer(out / "eval_summary.csv")
    with fh:
        w.writerow(["policy", "episodes"] + [f"{k}_{s}" for k, _ in TABLE_COLUMNS for s in ("mean", "std")])
        w.writerow([name, args.episodes] + [_fmt(x) for k, _ in TABLE_COLUMNS for x in res["summary"][k]])
    print(format_table(res["summary"], f"{name}: {args.episodes} episode(s), seeds {args.seed}..{args.seed + args.episodes - 1}"))
    return EXIT_OK


# ---------------------------------------------------------------- synth

def cmd_synth(args) -> int:
    doc = {}
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read synthesis spec {args.config}: {exc}") from exc
    if args.seed is not None:
        doc["seed"] = args.seed
    network = doc.pop("network", "ieee33")
    deployment = tuple(doc.pop("deployment", (8, 12, 14, 30)))
    resample = bool(doc.pop("resample", False))
    try:
        spec = data.SynthesisSpec.from_dict(doc)
        bundle = data.synthesize(spec, network, deployment, resample=resample)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid synthesis spec: {exc}") from exc
    path = data.write_scenario(bundle, args.out)
    flagged = data.validate_feasibility(bundle)
    print(f"wrote {len(bundle.sessions)} sessions for {bundle.n_evcs} station(s) to {path}; {len(flagged)} infeasible")
    return EXIT_OK


# ---------------------------------------------------------------- report

def _read_run(d: Path) -> tuple[list[dict], int]:
    from .learner.train import LOG_COLUMNS

    with open(d / "train_log.csv", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "iteration" not in reader.fieldnames:
            raise ValueError("missing header")
        rows, dropped = [], 0
        for r in reader:
            try:
                vals = {k: float(r[k]) for k in LOG_COLUMNS if k in r}
            except (TypeError, ValueError):
                dropped += 1
                continue
            if len(vals) != len(LOG_COLUMNS) or not all(math.isfinite(v) for v in vals.values()):
                dropped += 1
                continue
            rows.append(vals)
    return rows, dropped


def cmd_report(args) -> int:
    from .learner.train import LOG_COLUMNS

    if not args.run_dirs:
        raise UsageError("report needs at least one run directory")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    runs, problems = {}, []
    for d in map(Path, args.run_dirs):
        try:
            rows, dropped = _read_run(d)
        except (OSError, ValueError, csv.Error) as exc:
            problems.append(f"{d}: {exc}")
            log.warning("skipping %s: %s", d, exc)
            continue
        if dropped:
            log.warning("%s: %d row(s) with missing or non-finite values excluded", d, dropped)
        label = d.name
        while label in runs:
            label += "_"
        runs[label] = {int(r["iteration"]): r for r in rows}
    cols = [c for c in LOG_COLUMNS if c != "iteration"]
    iters = sorted(set().union(*[set(r) for r in runs.values()])) if runs else []
    fh, w = _writer(out / "learning_curves.csv")
    with fh:
        w.writerow(["iteration"] + [f"{run}:{c}" for run in runs for c in cols])
        for it in iters:
            row = [it]
            for run, rr in runs.items():
                row += [_fmt(rr[it][c]) if it in rr else "" for c in cols]
            w.writerow(row)
    plots = _plots(runs, args.run_dirs, out)
    for p in problems:
        print(f"problem: {p}", file=sys.stderr)
    print(f"merged {len(runs)} run(s) over {len(iters)} iteration(s) into {out / 'learning_curves.csv'}; {len(plots)} plot(s)")
    return EXIT_OK


def _plots(runs: dict, run_dirs: Sequence[str], out: Path) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    made = []
    if runs:
        fig, axes = plt.subplots(2, 2, figsize=(10, 7))
        for ax, (col, label) in zip(axes.ravel(), (("mean_reward", "episode reward"), ("mean_cost", "episode safety cost"), ("lambda", "lambda"), ("volt_violation", "voltage violation"))):
            for run, rr in runs.items():
                it = sorted(rr)
                ax.plot(it, [rr[i][col] for i in it], label=run)
            ax.set_xlabel("iteration")
            ax.set_title(label)
        axes[0, 0].legend(fontsize=8)
        fig.tight_layout()
        p = out / "learning_curves.png"
        fig.savefig(p, dpi=100, metadata={"Software": None})
        plt.close(fig)
        made.append(p)
    volts = {}
    for d in map(Path, run_dirs):
        for f in sorted((d / "traces").glob("*_voltage.csv")) if (d / "traces").is_dir() else []:
            with open(f, newline="") as fh:
                for r in csv.DictReader(fh):
                    volts.setdefault(int(r["bus"]), []).append(float(r["voltage_pu"]))
    if volts:
        buses = sorted(volts)
        fig, ax = plt.subplots(figsize=(12, 4))
        ax.boxplot([volts[b] for b in buses], tick_labels=[str(b) for b in buses], showfliers=False)
        ax.axhline(0.95, color="r", lw=0.8, ls="--")
        ax.axhline(1.05, color="r", lw=0.8, ls="--")
        ax.set_xlabel("bus")
        ax.set_ylabel("voltage (p.u.)")
        fig.tight_layout()
        p = out / "voltage_distribution.png"
        fig.savefig(p, dpi=100, metadata={"Software": None})
        plt.close(fig)
        made.append(p)
    return made


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="voltgrid", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="run a fixed policy and write per-step traces")
    s.add_argument("--scenario", default="desk_33bus")
    s.add_argument("--policy", default="zero", choices=("zero", "greedy", "random", "checkpoint"))
    s.add_argument("--checkpoint")
    s.add_argument("--episodes", type=int, default=1)
    s.add_argument("--seed", type=int, default=100_000)
    s.add_argument("--out", default="sim_out")
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("train", help="train the Lagrangian multi-agent PPO learner")
    t.add_argument("--config")
    t.add_argument("--preset", choices=sorted(PRESETS))
    t.add_argument("--encoder", choices=VARIANTS)
    t.add_argument("--scenario")
    t.add_argument("--seed", type=int)
    t.add_argument("--iters", type=int)
    t.add_argument("--episodes", type=int, help="episodes collected per iteration")
    t.add_argument("--workers", type=int, default=1)
    t.add_argument("--out", default="run")
    t.add_argument("--resume", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint or baseline over seeded episodes")
    e.add_argument("--checkpoint")
    e.add_argument("--policy", choices=("zero", "greedy", "random", "checkpoint"))
    e.add_argument("--scenario", default="desk_33bus")
    e.add_argument("--episodes", type=int, default=20)
    e.add_argument("--seed", type=int, default=100_000)
    e.add_argument("--out", default="eval_out")
    e.set_defaults(func=cmd_eval)

    y = sub.add_parser("synth", help="generate a synthetic scenario directory")
    y.add_argument("--config", help="JSON synthesis spec (plus optional network, deployment, resample)")
    y.add_argument("--seed", type=int)
    y.add_argument("--out", required=True)
    y.set_defaults(func=cmd_synth)

    r = sub.add_parser("report", help="merge learning curves and draw static plots")
    r.add_argument("run_dirs", nargs="*")
    r.add_argument("--out", default="report")
    r.set_defaults(func=cmd_report)
    return p


def _setup_logging() -> None:
    level = os.environ.get("VOLTGRID_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def main(argv: Optional[Sequence[str]] = None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    for attr in ("episodes", "iters", "workers"):
        v = getattr(args, attr, None)
        if v is not None and v < (0 if attr == "iters" else 1):
            parser.error(f"--{attr} must be positive")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"voltgrid {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (EnvError, FloatingPointError) as exc:
        print(f"voltgrid {args.command}: aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
