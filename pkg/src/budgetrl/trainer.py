"""The RL loop: rollout, reward, advantages, selection, loss, AdamW update.

State is passed explicitly and never mutated in place; a step that raises
leaves the caller's state untouched.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .objective import ObjectiveConfig, TokenTable, group_advantages, grpo_table, c3po_table, token_loss
from .policy import ParamGrad, PolicyParams, Vocabulary, load_params, sample_batch, save_params
from .rewards import Problem, reward
from .scheduler import Batch, budget_report, dynamic_sampling_filter, select_budget

log = logging.getLogger(__name__)

ALGORITHMS = ("grpo", "grpo_dynamic_sampling", "c3po")


class OptimizerError(FloatingPointError):
    pass


@dataclass
class TrainerConfig:
    prompts_per_step: int = 512
    group_size: int = 16
    minibatch_count: int = 1
    learning_rate: float = 3e-6
    weight_decay: float = 0.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    max_response_len: int = 16
    seed: int = 0
    algorithm: str = "c3po"
    selection_order: str = "seeded_shuffle"
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    # policy shape and initialization
    vocab: str = "default"
    n_experts: int = 4
    top_k: int = 2
    context_order: int = 3
    hash_buckets: int = 4096
    init_scale: float = 0.0
    # simulated step cost = overhead + per-token cost * (rollout + trained tokens)
    throughput_overhead: float = 1.0
    throughput_rollout_cost: float = 1e-3
    throughput_train_cost: float = 2e-3
    reference_sft_tokens: int = 1
    checkpoint_every: int = 0

    def __post_init__(self):
        if isinstance(self.objective, dict):
            self.objective = ObjectiveConfig(**self.objective)
        self.validate()

    def validate(self) -> None:
        if self.prompts_per_step < 1:
            raise ValueError("prompts_per_step must be >= 1")
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2")
        if self.minibatch_count < 1:
            raise ValueError("minibatch_count must be >= 1")
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.max_response_len < 1:
            raise ValueError("max_response_len must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.reference_sft_tokens < 1:
            raise ValueError("reference_sft_tokens must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Stage:
    name: str
    domains: tuple[str, ...]
    steps: int
    max_response_len: int | None = None

    def select(self, problems: Sequence[Problem]) -> list[Problem]:
        pool = [p for p in problems if p.domain in self.domains]
        if not pool:
            raise ValueError(f"stage {self.name!r} has no problems in domains {list(self.domains)}")
        return pool


@dataclass
class StepMetrics:
    step: int
    stage: str
    domain_mix: str
    reward_mean: float
    reward_std: float
    response_len_mean: float
    response_len_p95: float
    tokens_selected: int
    tokens_discarded: int
    responses_used: int
    truncated_tokens_discarded: int
    underbudget: bool
    grad_norm: float
    entropy_mean: float
    kl_mean: float
    balance_loss: float
    z_loss: float
    loss_total: float
    simulated_throughput: float
    wall_time: float


METRIC_COLUMNS = tuple(f.name for f in fields(StepMetrics))


@dataclass
class TokenLedger:
    cumulative_rl_tokens: int = 0
    reference_sft_tokens: int = 1

    def add(self, tokens: int) -> "TokenLedger":
        if tokens < 0:
            raise ValueError("token count must be non-negative")
        return replace(self, cumulative_rl_tokens=self.cumulative_rl_tokens + tokens)


def token_efficiency(ledger: TokenLedger) -> float:
    if ledger.reference_sft_tokens <= 0:
        raise ZeroDivisionError("reference_sft_tokens must be positive")
    return ledger.cumulative_rl_tokens / ledger.reference_sft_tokens


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    step: int
    m_router: np.ndarray
    v_router: np.ndarray
    m_experts: np.ndarray
    v_experts: np.ndarray

    @classmethod
    def zeros_like(cls, params: PolicyParams) -> "OptimizerState":
        return cls(0, np.zeros_like(params.router), np.zeros_like(params.router),
                   np.zeros_like(params.experts), np.zeros_like(params.experts))


def _adam_block(theta, g, m, v, t, cfg: TrainerConfig):
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    m = b1 * m + (1 - b1) * g
    v = b2 * v + (1 - b2) * g * g
    m_hat = m / (1 - b1 ** t)
    v_hat = v / (1 - b2 ** t)
    theta = theta * (1 - cfg.learning_rate * cfg.weight_decay) - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
    return theta, m, v


def optimizer_step(params: PolicyParams, grad: ParamGrad, state: OptimizerState,
                   cfg: TrainerConfig) -> tuple[PolicyParams, OptimizerState]:
    """One AdamW update with bias correction and decoupled weight decay."""
    for name, block in (("router", grad.router), ("experts", grad.experts)):
        bad = ~np.isfinite(block)
        if bad.any():
            first = np.argwhere(bad)[0].tolist()
            raise OptimizerError(f"non-finite gradient in {name} block ({int(bad.sum())} entries, first at {first})")
    t = state.step + 1
    router, m_r, v_r = _adam_block(params.router, grad.router, state.m_router, state.v_router, t, cfg)
    experts, m_e, v_e = _adam_block(params.experts, grad.experts, state.m_experts, state.v_experts, t, cfg)
    return params.evolve(router, experts), OptimizerState(t, m_r, v_r, m_e, v_e)


# ---------------------------------------------------------------------------
# Rollout and training step
# ---------------------------------------------------------------------------


def response_seed(seed: int, *key: int) -> int:
    return int(np.random.SeedSequence([seed, *key]).generate_state(1)[0])


def rollout(params_old: PolicyParams, problems: Sequence[Problem], K: int, cfg: TrainerConfig,
            seed: int, max_len: int | None = None) -> Batch:
    """Sample K responses per problem, score them, attach group advantages."""
    max_len = cfg.max_response_len if max_len is None else max_len
    vocab = params_old.vocab
    prompts, seeds, mins, ids = [], [], [], []
    for l, prob in enumerate(problems):
        enc = vocab.encode(prob.prompt)
        for i in range(K):
            prompts.append(enc)
            seeds.append(response_seed(seed, l, i))
            mins.append(prob.min_response_len)
            ids.append(prob.id)
    responses = sample_batch(params_old, prompts, seeds, max_len, cfg.objective.temperature, mins, ids)
    groups, kept = [], []
    obj = cfg.objective
    for l, prob in enumerate(problems):
        group = responses[l * K:(l + 1) * K]
        for resp in group:
            resp.reward = reward(resp.text, prob)
            resp.meta["domain"] = prob.domain
        adv = group_advantages([r.reward for r in group], obj.advantage_std_mode, obj.degenerate_group_mode)
        if adv is None:
            continue
        for resp, a in zip(group, adv):
            resp.advantage = float(a)
        groups.append(group)
        kept.append(prob)
    return Batch(kept, groups, params_old.version)


@dataclass
class TrainState:
    params: PolicyParams
    ref_params: PolicyParams
    optimizer: OptimizerState
    step: int = 0
    ledger: TokenLedger = field(default_factory=TokenLedger)
    sim_time: float = 0.0
    sampler: dict = field(default_factory=dict)


def init_state(cfg: TrainerConfig) -> TrainState:
    vocab = Vocabulary.preset(cfg.vocab)
    kw = dict(n_experts=cfg.n_experts, top_k=cfg.top_k, context_order=cfg.context_order,
              hash_buckets=cfg.hash_buckets)
    if cfg.init_scale > 0:
        params = PolicyParams.random(vocab, response_seed(cfg.seed, 0xBEEF), cfg.init_scale, **kw)
    else:
        params = PolicyParams.zeros(vocab, **kw)
    return TrainState(params, params, OptimizerState.zeros_like(params),
                      ledger=TokenLedger(0, cfg.reference_sft_tokens))


def _minibatches(batch: Batch, cfg: TrainerConfig, params: PolicyParams, selected) -> list[TokenTable]:
    m = cfg.minibatch_count
    if cfg.algorithm == "c3po":
        table = c3po_table(selected, batch, params, cfg.objective.token_budget)
        if m == 1:
            return [table]
        scale = m / cfg.objective.token_budget
        return [table.subset(idx, np.full(idx.size, scale))
                for idx in np.array_split(np.arange(table.size), m)]
    chunks = [c for c in np.array_split(np.arange(batch.prompt_count), m) if c.size]
    if not chunks:
        return [grpo_table(batch, params)]
    return [grpo_table(Batch([batch.problems[i] for i in c], [batch.groups[i] for i in c],
                             batch.behavior_params_version), params) for c in chunks]


def _domain_mix(problems: Sequence[Problem]) -> str:
    counts: dict[str, int] = {}
    for p in problems:
        counts[p.domain] = counts.get(p.domain, 0) + 1
    return "|".join(f"{d}:{counts[d]}" for d in sorted(counts))


def train_step(state: TrainState, problems: Sequence[Problem], cfg: TrainerConfig,
               stage: str = "", max_len: int | None = None) -> tuple[TrainState, StepMetrics]:
    params_old = state.params
    step_seed = response_seed(cfg.seed, state.step)
    batch = rollout(params_old, problems, cfg.group_size, cfg, step_seed, max_len)
    all_resp = [r for g in batch.groups for r in g]
    lengths = np.array([r.length for r in all_resp], dtype=np.float64)
    rewards = np.array([r.reward for r in all_resp], dtype=np.float64)
    rollout_tokens = int(lengths.sum())

    selected = None
    train_batch = batch
    if cfg.algorithm == "grpo_dynamic_sampling":
        train_batch = dynamic_sampling_filter(batch)
    elif cfg.algorithm == "c3po":
        if not all_resp:
            raise ValueError("no responses to select from (all groups dropped)")
        selected = select_budget(batch, cfg.objective.token_budget, cfg.selection_order,
                                 response_seed(step_seed, 0x5E1))
        if selected.underbudget:
            log.info("step %d under budget: %d < %d tokens", state.step, selected.total_tokens,
                     cfg.objective.token_budget)
    tables = _minibatches(train_batch, cfg, params_old, selected)

    params, opt = state.params, state.optimizer
    norms, breakdowns = [], []
    for table in tables:
        br, grad = token_loss(params, state.ref_params, table, cfg.objective)
        norms.append(grad.norm())
        breakdowns.append(br)
        params, opt = optimizer_step(params, grad, opt, cfg)

    trained = sum(t.size for t in tables)
    if selected is not None:
        report = budget_report(selected)
    else:
        report = {"total_tokens": trained, "responses_used": sum(len(g) for g in train_batch.groups),
                  "truncated_tokens_discarded": 0, "underbudget": False}
    cost = (cfg.throughput_overhead + cfg.throughput_rollout_cost * rollout_tokens
            + cfg.throughput_train_cost * trained)
    sim_time = state.sim_time + cost
    metrics = StepMetrics(
        step=state.step,
        stage=stage,
        domain_mix=_domain_mix(problems),
        reward_mean=float(rewards.mean()) if rewards.size else 0.0,
        reward_std=float(rewards.std()) if rewards.size else 0.0,
        response_len_mean=float(lengths.mean()) if lengths.size else 0.0,
        response_len_p95=float(np.percentile(lengths, 95)) if lengths.size else 0.0,
        tokens_selected=int(trained),
        tokens_discarded=int(rollout_tokens - trained),
        responses_used=int(report["responses_used"]),
        truncated_tokens_discarded=int(report["truncated_tokens_discarded"]),
        underbudget=bool(report["underbudget"]),
        grad_norm=float(np.mean(norms)),
        entropy_mean=float(np.mean([b.entropy for b in breakdowns])),
        kl_mean=float(np.mean([b.kl_mean for b in breakdowns])),
        balance_loss=float(np.mean([b.balance for b in breakdowns])),
        z_loss=float(np.mean([b.zloss for b in breakdowns])),
        loss_total=float(np.mean([b.total for b in breakdowns])),
        simulated_throughput=trained / cost,
        wall_time=sim_time,
    )
    new_state = replace(state, params=params, optimizer=opt, step=state.step + 1,
                        ledger=state.ledger.add(trained), sim_time=sim_time,
                        sampler=dict(state.sampler))
    return new_state, metrics


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------


def sample_problems(state: TrainState, stage_index: int, pool: Sequence[Problem], L: int,
                    seed: int) -> tuple[list[Problem], dict]:
    """Uniform sampling without replacement within an epoch over ``pool``."""
    key = str(stage_index)
    epoch, pos = state.sampler.get(key, (0, 0))
    chosen = []
    while len(chosen) < L:
        perm = np.random.default_rng([seed, stage_index, epoch]).permutation(len(pool))
        take = min(L - len(chosen), len(pool) - pos)
        chosen.extend(pool[i] for i in perm[pos:pos + take])
        pos += take
        if pos == len(pool):
            epoch, pos = epoch + 1, 0
    sampler = dict(state.sampler)
    sampler[key] = (epoch, pos)
    return chosen, sampler


def run_stage(state: TrainState, stage: Stage, problems: Sequence[Problem], cfg: TrainerConfig,
              stage_index: int = 0, step_count: int | None = None, on_step=None
              ) -> tuple[TrainState, list[StepMetrics]]:
    pool = stage.select(problems)
    steps = stage.steps if step_count is None else step_count
    rows = []
    for _ in range(steps):
        batch_problems, sampler = sample_problems(state, stage_index, pool, cfg.prompts_per_step, cfg.seed)
        new_state, metrics = train_step(state, batch_problems, cfg, stage.name, stage.max_response_len)
        state = replace(new_state, sampler=sampler)
        rows.append(metrics)
        if on_step is not None:
            on_step(state, metrics)
    return state, rows


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return repr(value)
    return str(value)


class MetricsWriter:
    """Append-only CSV with one row per step."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        new = not self.path.exists() or self.path.stat().st_size == 0
        self._fh = open(self.path, "a", newline="", encoding="utf-8")
        self._writer = csv.writer(self._fh, lineterminator="\n")
        if new:
            self._writer.writerow(METRIC_COLUMNS)
            self._fh.flush()

    def write(self, m: StepMetrics) -> None:
        self._writer.writerow([_fmt(getattr(m, c)) for c in METRIC_COLUMNS])
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_metrics(path: str | Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != METRIC_COLUMNS:
            raise ValueError(f"{path}: metrics columns {reader.fieldnames} do not match {list(METRIC_COLUMNS)}")
        rows = []
        for raw in reader:
            row = {}
            for f in fields(StepMetrics):
                v = raw[f.name]
                if f.type in ("int", int):
                    row[f.name] = int(v)
                elif f.type in ("float", float):
                    row[f.name] = float(v)
                elif f.type in ("bool", bool):
                    row[f.name] = v == "1"
                else:
                    row[f.name] = v
            rows.append(row)
    return rows


def save_checkpoint(path: str | Path, state: TrainState) -> None:
    meta = {
        "step": state.step,
        "ledger": asdict(state.ledger),
        "sim_time": state.sim_time,
        "sampler": {k: list(v) for k, v in state.sampler.items()},
        "optimizer_step": state.optimizer.step,
    }
    opt = state.optimizer
    save_params(path, state.params, trainer_meta=np.array(json.dumps(meta)),
                ref_router=state.ref_params.router, ref_experts=state.ref_params.experts,
                m_router=opt.m_router, v_router=opt.v_router,
                m_experts=opt.m_experts, v_experts=opt.v_experts)


def load_checkpoint(path: str | Path) -> TrainState:
    params, extra = load_params(path)
    meta = json.loads(str(extra["trainer_meta"]))
    ref = params.evolve(extra["ref_router"], extra["ref_experts"], bump=False)
    ref = replace(ref, version=0)
    opt = OptimizerState(meta["optimizer_step"], extra["m_router"], extra["v_router"],
                         extra["m_experts"], extra["v_experts"])
    return TrainState(params, ref, opt, meta["step"], TokenLedger(**meta["ledger"]), meta["sim_time"],
                      {k: tuple(v) for k, v in meta["sampler"].items()})


def run_plan(cfg: TrainerConfig, stages: Sequence[Stage], problems: Sequence[Problem],
             state: TrainState | None = None, on_step=None) -> tuple[TrainState, list[StepMetrics]]:
    """Run every stage in order, resuming mid-plan if ``state.step`` > 0."""
    state = init_state(cfg) if state is None else state
    rows: list[StepMetrics] = []
    done = state.step
    for idx, stage in enumerate(stages):
        if done >= stage.steps:
            done -= stage.steps
            continue
        state, stage_rows = run_stage(state, stage, problems, cfg, idx, stage.steps - done, on_step)
        done = 0
        rows.extend(stage_rows)
    return state, rows
