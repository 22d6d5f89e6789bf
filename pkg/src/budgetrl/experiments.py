"""Comparison harnesses: run summaries, A/B tables, stability and
curriculum experiments."""

from __future__ import annotations

from dataclasses import replace
from typing import Iterable, Sequence

import numpy as np

from .policy import PolicyParams, sample_batch
from .rewards import Problem, reward
from .trainer import Stage, TrainerConfig, response_seed, run_plan

SUMMARY_FIELDS = (
    "grad_norm_mean", "grad_norm_cv", "reward_mean", "reward_final", "tokens_per_step_mean",
    "tokens_per_step_var", "tokens_per_step_cv", "response_len_mean", "response_len_cv",
    "throughput_mean", "throughput_cv",
)


def _cv(x: np.ndarray) -> float:
    m = float(np.mean(x))
    return float(np.std(x) / m) if m != 0 else 0.0


def summarize(rows: Sequence[dict]) -> dict[str, float]:
    """Scalar summary of one metrics series. ``reward_final`` averages the
    last tenth of the steps."""
    if not rows:
        raise ValueError("cannot summarize an empty metrics series")
    col = lambda k: np.array([r[k] for r in rows], dtype=np.float64)  # noqa: E731
    g, tok, ln, thr, rew = col("grad_norm"), col("tokens_selected"), col("response_len_mean"), \
        col("simulated_throughput"), col("reward_mean")
    tail = max(1, len(rows) // 10)
    return {
        "grad_norm_mean": float(g.mean()),
        "grad_norm_cv": _cv(g),
        "reward_mean": float(rew.mean()),
        "reward_final": float(rew[-tail:].mean()),
        "tokens_per_step_mean": float(tok.mean()),
        "tokens_per_step_var": float(tok.var()),
        "tokens_per_step_cv": _cv(tok),
        "response_len_mean": float(ln.mean()),
        "response_len_cv": _cv(ln),
        "throughput_mean": float(thr.mean()),
        "throughput_cv": _cv(thr),
    }


def seed_mean(summaries: Iterable[dict[str, float]]) -> dict[str, float]:
    summaries = list(summaries)
    return {k: float(np.mean([s[k] for s in summaries])) for k in SUMMARY_FIELDS}


def compare_table(a: dict[str, float], b: dict[str, float]) -> list[dict]:
    """Rows of (metric, a, b, delta = b - a)."""
    return [{"metric": k, "a": a[k], "b": b[k], "delta": b[k] - a[k]} for k in SUMMARY_FIELDS]


def format_table(rows: Sequence[dict], columns: Sequence[str], sep: str = "\t") -> str:
    def fmt(v):
        return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)
    lines = [sep.join(columns)]
    lines += [sep.join(fmt(r[c]) for c in columns) for r in rows]
    return "\n".join(lines) + "\n"


def evaluate_domains(params: PolicyParams, problems: Sequence[Problem], n_samples: int, seed: int,
                     max_len: int, temperature: float = 1.0) -> dict[str, float]:
    """Mean sampled reward per domain."""
    prompts, seeds, mins = [], [], []
    for j, p in enumerate(problems):
        enc = params.vocab.encode(p.prompt)
        for i in range(n_samples):
            prompts.append(enc)
            seeds.append(response_seed(seed, 0xE7A1, j, i))
            mins.append(p.min_response_len)
    responses = sample_batch(params, prompts, seeds, max_len, temperature, mins)
    by_domain: dict[str, list[float]] = {}
    for j, p in enumerate(problems):
        for r in responses[j * n_samples:(j + 1) * n_samples]:
            by_domain.setdefault(p.domain, []).append(reward(r.text, p))
    return {d: float(np.mean(v)) for d, v in sorted(by_domain.items())}


def algorithm_comparison(cfg: TrainerConfig, stages: Sequence[Stage], problems: Sequence[Problem],
                         seeds: Sequence[int], algorithms: Sequence[str] = ("grpo", "c3po")
                         ) -> dict[str, list[list]]:
    """Metrics series per algorithm and seed, all else held fixed."""
    out: dict[str, list] = {}
    for algo in algorithms:
        out[algo] = []
        for s in seeds:
            _, rows = run_plan(replace(cfg, algorithm=algo, seed=s), stages, problems)
            out[algo].append([r.__dict__ for r in rows])
    return out


def curriculum_comparison(cfg: TrainerConfig, problems: Sequence[Problem], eval_problems: Sequence[Problem],
                          first_domains: Sequence[str], later_domains: Sequence[str], total_steps: int,
                          seeds: Sequence[int], split: float = 0.5, eval_samples: int = 8,
                          max_len: int | None = None) -> list[dict]:
    """Staged curriculum (first domains, then the later ones) against one
    mixed stage with the same total step count; returns final per-domain
    rewards for every plan and seed."""
    first = int(round(total_steps * split))
    all_domains = tuple(dict.fromkeys([*first_domains, *later_domains]))
    plans = {
        "two_stage": [Stage("stage1", tuple(first_domains), first),
                      Stage("stage2", tuple(later_domains), total_steps - first)],
        "mixed": [Stage("mixed", all_domains, total_steps)],
    }
    max_len = cfg.max_response_len if max_len is None else max_len
    table = []
    for s in seeds:
        for plan, stages in plans.items():
            state, _ = run_plan(replace(cfg, seed=s), stages, problems)
            scores = evaluate_domains(state.params, eval_problems, eval_samples, s, max_len,
                                      cfg.objective.temperature)
            for domain, value in scores.items():
                table.append({"seed": s, "plan": plan, "domain": domain, "reward": value})
    return table
