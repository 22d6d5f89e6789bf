"""Command-line entry point: ``budgetrl {run,compare,curate,report}``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
import traceback
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig, load_config, manifest
from .curation import curate, write_report
from .experiments import compare_table, evaluate_domains, format_table, seed_mean, summarize
from .plotting import plot_dynamics
from .policy import load_params
from .rewards import read_dataset, write_dataset
from .tasks import generate
from .trainer import (ALGORITHMS, METRIC_COLUMNS, MetricsWriter, _fmt, load_checkpoint, read_metrics, run_plan,
                      save_checkpoint)

OUT_ENV = "BUDGETRL_OUT"
FAILED_MARKER = "FAILED"

log = logging.getLogger("budgetrl")


def _versions() -> dict:
    return {"budgetrl": __version__, "numpy": np.__version__, "python": platform.python_version()}


def _output_dir(cfg: ExperimentConfig, override: str | None) -> Path:
    if override:
        return Path(override)
    if cfg.output_dir:
        return Path(cfg.output_dir)
    return Path(os.environ.get(OUT_ENV, "runs")) / cfg.name


def load_problems(cfg: ExperimentConfig) -> list:
    problems = []
    for path in cfg.datasets:
        problems.extend(read_dataset(path))
    for spec in cfg.generators:
        problems.extend(generate(spec))
    ids = [p.id for p in problems]
    if len(set(ids)) != len(ids):
        raise ConfigError("problem ids collide across datasets/generators; give generators distinct seeds")
    return problems


def _latest_checkpoint(ckpt_dir: Path) -> Path | None:
    found = sorted(ckpt_dir.glob("step*.npz"))
    return found[-1] if found else None


def run_experiment(cfg: ExperimentConfig, out: Path, resume: bool = False) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / FAILED_MARKER).unlink(missing_ok=True)
    (out / "manifest.json").write_text(manifest(cfg, _versions()), encoding="utf-8")
    problems = load_problems(cfg)
    max_len = max([cfg.trainer.max_response_len] + [s.max_response_len or 0 for s in cfg.stages])
    for seed in cfg.seeds:
        tcfg = replace(cfg.trainer, seed=seed)
        metrics_path = out / f"metrics_seed{seed}.csv"
        ckpt_dir = out / "checkpoints" / f"seed{seed}"
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        state = None
        latest = _latest_checkpoint(ckpt_dir) if resume else None
        if latest is not None:
            state = load_checkpoint(latest)
            kept = [r for r in read_metrics(metrics_path) if r["step"] < state.step] if metrics_path.exists() else []
            metrics_path.unlink(missing_ok=True)
            log.info("seed %d: resuming from %s (step %d)", seed, latest, state.step)
        else:
            kept = []
            metrics_path.unlink(missing_ok=True)
            for old in ckpt_dir.glob("*.npz"):
                old.unlink()
        if kept:
            # rows that precede the checkpoint are kept verbatim
            metrics_path.write_text(_rows_csv(kept), encoding="utf-8")
        with MetricsWriter(metrics_path) as writer:
            def on_step(st, m, writer=writer):
                writer.write(m)
                if tcfg.checkpoint_every and st.step % tcfg.checkpoint_every == 0:
                    save_checkpoint(ckpt_dir / f"step{st.step:06d}.npz", st)

            state, _ = run_plan(tcfg, cfg.stages, problems, state, on_step)
        save_checkpoint(ckpt_dir / "final.npz", state)
        scores = evaluate_domains(state.params, problems, cfg.eval_samples, seed, max_len,
                                  tcfg.objective.temperature)
        summary = {"seed": seed, "steps": state.step, "final_reward_by_domain": scores,
                   "cumulative_rl_tokens": state.ledger.cumulative_rl_tokens}
        (out / f"final_eval_seed{seed}.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n",
                                                         encoding="utf-8")


def _rows_csv(rows: list[dict]) -> str:
    lines = [",".join(METRIC_COLUMNS)]
    for r in rows:
        lines.append(",".join(_fmt(r[c]) for c in METRIC_COLUMNS))
    return "\n".join(lines) + "\n"


def cmd_run(args) -> int:
    try:
        cfg = load_config(args.config)
        if args.seeds:
            cfg.seeds = [int(s) for s in args.seeds.split(",")]
        if args.algorithm:
            cfg.trainer = replace(cfg.trainer, algorithm=args.algorithm)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    out = _output_dir(cfg, args.out)
    try:
        run_experiment(cfg, out, resume=args.resume)
    except Exception as exc:  # leave partial outputs plus a marker
        out.mkdir(parents=True, exist_ok=True)
        (out / FAILED_MARKER).write_text(traceback.format_exc(), encoding="utf-8")
        print(f"error: run failed: {exc} (see {out / FAILED_MARKER})", file=sys.stderr)
        return 1
    print(str(out))
    return 0


# ---------------------------------------------------------------------------
# compare / report
# ---------------------------------------------------------------------------


def load_run(run_dir: str | Path) -> dict[int, list[dict]]:
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise FileNotFoundError(f"run directory not found: {run_dir}")
    runs = {}
    for path in sorted(run_dir.glob("metrics_seed*.csv")):
        seed = int(path.stem[len("metrics_seed"):])
        runs[seed] = read_metrics(path)
    if not runs:
        raise FileNotFoundError(f"no metrics_seed*.csv files in {run_dir}")
    return runs


def _mean_series(runs: dict[int, list[dict]], steps: list[int]) -> list[dict]:
    numeric = ("response_len_mean", "grad_norm", "reward_mean", "simulated_throughput",
               "tokens_selected", "entropy_mean")
    out = []
    for step in steps:
        rows = [next(r for r in series if r["step"] == step) for series in runs.values()]
        out.append({"step": step, **{k: float(np.mean([r[k] for r in rows])) for k in numeric}})
    return out


def compare_runs(run_a: str | Path, run_b: str | Path) -> tuple[list[dict], dict, dict]:
    a, b = load_run(run_a), load_run(run_b)
    seeds = sorted(set(a) & set(b))
    if not seeds:
        raise ValueError(f"runs share no seeds: {sorted(a)} vs {sorted(b)}")
    steps = sorted(set.intersection(*({r["step"] for r in runs[s]} for runs in (a, b) for s in seeds)))
    if not steps:
        raise ValueError("runs have no overlapping steps")
    keep = set(steps)
    a = {s: [r for r in a[s] if r["step"] in keep] for s in seeds}
    b = {s: [r for r in b[s] if r["step"] in keep] for s in seeds}
    sa = seed_mean(summarize(a[s]) for s in seeds)
    sb = seed_mean(summarize(b[s]) for s in seeds)
    return compare_table(sa, sb), _mean_series(a, steps), _mean_series(b, steps)


def cmd_compare(args) -> int:
    try:
        table, series_a, series_b = compare_runs(args.run_a, args.run_b)
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    text = format_table(table, ("metric", "a", "b", "delta"))
    sys.stdout.write(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "compare.tsv").write_text(text, encoding="utf-8")
        if args.plot:
            plot_dynamics({Path(args.run_a).name or "a": series_a, Path(args.run_b).name or "b": series_b},
                          out / f"compare.{args.format}")
    return 0


def cmd_report(args) -> int:
    try:
        runs = load_run(args.run_dir)
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    out = Path(args.out or args.run_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = [{"seed": s, **summarize(r)} for s, r in sorted(runs.items())]
    rows.append({"seed": "mean", **seed_mean(summarize(r) for r in runs.values())})
    from .experiments import SUMMARY_FIELDS
    text = format_table(rows, ("seed", *SUMMARY_FIELDS))
    (out / "report.tsv").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    plot_dynamics({f"seed {s}": r for s, r in sorted(runs.items())}, out / f"dynamics.{args.format}")
    return 0


# ---------------------------------------------------------------------------
# curate
# ---------------------------------------------------------------------------


def cmd_curate(args) -> int:
    try:
        problems = read_dataset(args.input)
        eval_set = read_dataset(args.eval_set) if args.eval_set else []
        params = load_params(args.checkpoint)[0] if args.checkpoint else None
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    kept, report = curate(problems, eval_set, params, n_samples=args.n_samples, seed=args.seed,
                          max_len=args.max_len)
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(out, kept)
    write_report(out.with_suffix(".report"), report)
    sys.stdout.write(report.to_text())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="budgetrl", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train every seed of an experiment config")
    p.add_argument("--config", required=True, help="experiment YAML or a run manifest.json")
    p.add_argument("--out", help=f"output directory (default: $${OUT_ENV}/<name> or runs/<name>)")
    p.add_argument("--seeds", help="comma-separated seed list overriding the config")
    p.add_argument("--algorithm", choices=ALGORITHMS, help="override trainer.algorithm")
    p.add_argument("--resume", action="store_true", help="continue from the latest checkpoints")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="compare two run directories")
    p.add_argument("run_a")
    p.add_argument("run_b")
    p.add_argument("--out", help="directory for compare.tsv and plots")
    p.add_argument("--plot", action="store_true", help="also render overlay figures")
    p.add_argument("--format", default="svg", choices=("svg", "png", "pdf"))
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("curate", help="cleanse, dedupe and difficulty-filter a dataset")
    p.add_argument("--input", required=True)
    p.add_argument("--eval-set")
    p.add_argument("--output", required=True)
    p.add_argument("--checkpoint", help="policy checkpoint for pass-rate annotation")
    p.add_argument("--n-samples", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-len", type=int, default=16)
    p.set_defaults(func=cmd_curate)

    p = sub.add_parser("report", help="summarize a run and render its figures")
    p.add_argument("run_dir")
    p.add_argument("--out")
    p.add_argument("--format", default="svg", choices=("svg", "png", "pdf"))
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
