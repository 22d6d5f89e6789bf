"""Policy-optimization losses with analytic gradients.

Both the per-response normalized group objective and the fixed-token-budget
objective reduce to a weighted sum over response tokens: each trained token
gets a weight (``1/(L*K*|y_i|)`` or ``1/budget``), and the clipped surrogate
minus the KL penalty is summed with those weights. The entropy regularizer and
the router load-balance and z-losses are averaged over the same token set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .policy import (MixtureOut, ParamGrad, PolicyParams, batch_entropy, batch_kl, logsumexp,
                     mixture_forward, mixture_vjp, response_features)
from .scheduler import Batch, SelectedSet


class ObjectiveError(ValueError):
    pass


@dataclass
class ObjectiveConfig:
    clip_eps: float = 0.2
    kl_beta: float = 1e-3
    alpha_entropy: float = 5e-4
    alpha_balance: float = 1e-5
    alpha_zloss: float = 1e-7
    token_budget: int = 409600
    advantage_std_mode: str = "population"
    degenerate_group_mode: str = "zero_advantage"
    # "bonus" subtracts alpha*H (rewards entropy); "penalty" adds it as printed
    entropy_sign: str = "bonus"
    balance_variant: str = "literal"
    temperature: float = 1.0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.clip_eps > 0:
            raise ValueError("clip_eps must be > 0")
        if self.token_budget < 1:
            raise ValueError("token_budget must be >= 1")
        for name in ("kl_beta", "alpha_entropy", "alpha_balance", "alpha_zloss"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        choices = {
            "advantage_std_mode": ("population", "sample"),
            "degenerate_group_mode": ("zero_advantage", "drop_group"),
            "entropy_sign": ("bonus", "penalty"),
            "balance_variant": ("literal", "switch"),
        }
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                raise ValueError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        if not self.temperature > 0:
            raise ValueError("training temperature must be > 0")

    @property
    def entropy_factor(self) -> float:
        return -1.0 if self.entropy_sign == "bonus" else 1.0


@dataclass
class RouterStats:
    expert_count: int
    token_count: int
    mean_router_prob: np.ndarray   # P_i
    routed_fraction: np.ndarray    # F_i = routings to expert i / M
    router_logits: np.ndarray      # (M, N_e)

    @classmethod
    def from_logits(cls, router_logits: np.ndarray, selected: np.ndarray) -> "RouterStats":
        z = np.asarray(router_logits, dtype=np.float64)
        M, n_e = z.shape
        g = np.exp(z - logsumexp(z)[:, None])
        counts = np.bincount(np.asarray(selected).ravel(), minlength=n_e)
        return cls(n_e, M, g.mean(axis=0), counts / M, z)


@dataclass
class LossBreakdown:
    policy_term: float
    kl_term: float
    entropy_term: float
    balance_term: float
    zloss_term: float
    total: float
    token_count_used: int
    entropy: float = 0.0
    balance: float = 0.0
    zloss: float = 0.0
    kl_mean: float = 0.0
    ratios: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("policy_term", "kl_term", "entropy_term", "balance_term",
                                              "zloss_term", "total", "token_count_used")}


# ---------------------------------------------------------------------------
# Scalar pieces
# ---------------------------------------------------------------------------


def group_advantages(rewards: Sequence[float], std_mode: str = "population",
                     degenerate: str = "zero_advantage") -> np.ndarray | None:
    """Group-normalized advantages. Returns ``None`` for a zero-variance group
    when ``degenerate='drop_group'``."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise ObjectiveError("group advantages need at least two rewards")
    # compare values, not the computed std: rounding in the mean can leave a
    # tiny nonzero spread for identical rewards
    if np.all(r == r[0]):
        if degenerate == "drop_group":
            return None
        return np.zeros_like(r)
    # rescale first so the spread of tiny rewards cannot underflow
    d = r - r.mean()
    z = d / np.abs(d).max()
    return z / z.std(ddof=0 if std_mode == "population" else 1)


def clipped_term(ratio, advantage, eps: float):
    ratio = np.asarray(ratio, dtype=np.float64)
    advantage = np.asarray(advantage, dtype=np.float64)
    out = np.minimum(ratio * advantage, np.clip(ratio, 1 - eps, 1 + eps) * advantage)
    return float(out) if out.ndim == 0 else out


def balance_loss(stats: RouterStats, variant: str = "literal") -> float:
    # (1/N_e) * sum_i P_i * F_i * N_e, kept as written
    n_e = stats.expert_count
    value = float(np.sum(stats.mean_router_prob * stats.routed_fraction * n_e) / n_e)
    return value * n_e if variant == "switch" else value


def z_loss(stats: RouterStats) -> float:
    if stats.token_count < 1:
        raise ObjectiveError("z-loss needs at least one token")
    return float(np.mean(logsumexp(stats.router_logits) ** 2))


def total_loss(policy_term: float, kl_term: float, entropy: float, balance: float, zloss: float,
               cfg: ObjectiveConfig, token_count: int = 0) -> LossBreakdown:
    parts = (policy_term, kl_term, entropy, balance, zloss)
    if not all(math.isfinite(x) for x in parts):
        raise ObjectiveError(f"non-finite loss component in {parts}")
    ent = cfg.entropy_factor * cfg.alpha_entropy * entropy
    bal = cfg.alpha_balance * balance
    zl = cfg.alpha_zloss * zloss
    return LossBreakdown(policy_term, kl_term, ent, bal, zl,
                         policy_term + kl_term + ent + bal + zl, token_count,
                         entropy=entropy, balance=balance, zloss=zloss)


# ---------------------------------------------------------------------------
# Token tables
# ---------------------------------------------------------------------------


@dataclass
class TokenTable:
    """Flattened trained tokens: context features, targets, behavior
    log-probs, advantages and per-token loss weights."""

    features: np.ndarray
    eos_ok: np.ndarray
    targets: np.ndarray
    old_logprobs: np.ndarray
    advantages: np.ndarray
    weights: np.ndarray

    @property
    def size(self) -> int:
        return len(self.targets)

    def subset(self, idx: np.ndarray, weights: np.ndarray | None = None) -> "TokenTable":
        return TokenTable(self.features[idx], self.eos_ok[idx], self.targets[idx],
                          self.old_logprobs[idx], self.advantages[idx],
                          self.weights[idx] if weights is None else weights)


def build_table(params: PolicyParams, spans: Sequence[tuple], n_features: int | None = None) -> TokenTable:
    """``spans`` holds ``(response, token_count, per_token_weight)`` triples."""
    feats, eos, tgt, old, adv, w = [], [], [], [], [], []
    for resp, count, weight in spans:
        if count > resp.length:
            raise ObjectiveError(
                f"selection asks for {count} tokens of a {resp.length}-token response")
        if count == 0:
            continue
        lp = resp.behavior_logprobs[:count]
        if lp.shape[0] < count or not np.all(np.isfinite(lp)):
            raise ObjectiveError(f"response {resp.prompt_id} lacks behavior log-probs")
        rows, ok = response_features(params, resp, count)
        feats.append(rows)
        eos.append(ok)
        tgt.append(np.asarray(resp.token_ids[:count], dtype=np.int64))
        old.append(lp)
        adv.append(np.full(count, resp.advantage))
        w.append(np.full(count, weight))
    F = params.featurizer.n_features if n_features is None else n_features
    if not feats:
        return TokenTable(np.zeros((0, F), np.int64), np.zeros(0, bool), np.zeros(0, np.int64),
                          np.zeros(0), np.zeros(0), np.zeros(0))
    return TokenTable(np.concatenate(feats), np.concatenate(eos), np.concatenate(tgt),
                      np.concatenate(old), np.concatenate(adv), np.concatenate(w))


def grpo_table(batch: Batch, params: PolicyParams) -> TokenTable:
    L = batch.prompt_count
    spans = []
    for group in batch.groups:
        K = len(group)
        for resp in group:
            if resp.length:
                spans.append((resp, resp.length, 1.0 / (L * K * resp.length)))
    return build_table(params, spans)


def c3po_table(selected: SelectedSet, batch: Batch, params: PolicyParams, budget: int) -> TokenTable:
    spans = []
    for entry in selected.entries:
        l, i = entry.ref
        if not (0 <= l < batch.prompt_count and 0 <= i < len(batch.groups[l])):
            raise ObjectiveError(f"selection references response {entry.ref} outside the batch")
        resp = batch.groups[l][i]
        if entry.included > resp.length or entry.length != resp.length:
            raise ObjectiveError(f"selection entry {entry} does not match response length {resp.length}")
        spans.append((resp, entry.included, 1.0 / budget))
    return build_table(params, spans)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def _support_log(p: np.ndarray) -> np.ndarray:
    return np.log(np.where(p > 0, p, 1.0))


def token_loss(params: PolicyParams, ref_params: PolicyParams, table: TokenTable,
               cfg: ObjectiveConfig, with_grad: bool = True) -> tuple[LossBreakdown, ParamGrad | None]:
    """Weighted clipped-surrogate + KL over ``table`` plus the auxiliary
    terms averaged over the same tokens."""
    T = table.size
    if T == 0:
        br = total_loss(0.0, 0.0, 0.0, 0.0, 0.0, cfg, 0)
        return br, (ParamGrad.zeros_like(params) if with_grad else None)
    out = mixture_forward(params, table.features, table.eos_ok, cfg.temperature)
    ref = mixture_forward(ref_params, table.features, table.eos_ok, cfg.temperature)
    rows = np.arange(T)
    p_y = out.probs[rows, table.targets]
    if np.any(p_y <= 0):
        raise ObjectiveError("a trained token has zero probability under the current policy")
    ratio = np.exp(np.log(p_y) - table.old_logprobs)
    A = table.advantages
    eps = cfg.clip_eps
    unclipped = ratio * A
    clipped = np.clip(ratio, 1 - eps, 1 + eps) * A
    surrogate = np.minimum(unclipped, clipped)
    active = unclipped <= clipped

    kl = batch_kl(out.probs, ref.probs)
    ent = batch_entropy(out.probs)
    w = table.weights
    policy_term = -float(np.sum(w * surrogate))
    kl_term = cfg.kl_beta * float(np.sum(w * kl))
    entropy = float(np.mean(ent))
    stats = RouterStats.from_logits(out.router_logits, out.selected)
    bal = balance_loss(stats, cfg.balance_variant)
    zl = z_loss(stats)
    br = total_loss(policy_term, kl_term, entropy, bal, zl, cfg, T)
    br.kl_mean = float(np.mean(kl))
    br.ratios = ratio
    if not with_grad:
        return br, None
    return br, _token_loss_grad(params, out, ref, table, cfg, ratio, active, stats)


def _token_loss_grad(params, out: MixtureOut, ref: MixtureOut, table: TokenTable, cfg: ObjectiveConfig,
                     ratio, active, stats: RouterStats) -> ParamGrad:
    T = table.size
    rows = np.arange(T)
    p = out.probs
    logp = _support_log(p)
    h = np.zeros_like(p)
    # d(-w * r * A)/dp_y = -w * A * r / p_y on unclipped tokens
    coef = np.where(active, -table.weights * table.advantages * ratio, 0.0)
    h[rows, table.targets] = coef / p[rows, table.targets]
    support = p > 0
    h += np.where(support, (cfg.kl_beta * table.weights)[:, None]
                  * (logp - _support_log(ref.probs) + 1.0), 0.0)
    ent_scale = cfg.entropy_factor * cfg.alpha_entropy / T
    h += np.where(support, -ent_scale * (logp + 1.0), 0.0)

    g = out.router_probs
    n_e = stats.expert_count
    bal_scale = cfg.alpha_balance * (n_e if cfg.balance_variant == "switch" else 1.0) / T
    F = stats.routed_fraction
    dz = bal_scale * g * (F[None, :] - (g @ F)[:, None])
    dz += (cfg.alpha_zloss * 2.0 / T) * logsumexp(out.router_logits)[:, None] * g
    return mixture_vjp(params, out, h, extra_router=dz)


def grpo_loss(batch: Batch, params: PolicyParams, ref_params: PolicyParams,
              cfg: ObjectiveConfig, with_grad: bool = True):
    """Per-response length-normalized objective averaged over groups and
    prompts; every token of every response trains."""
    return token_loss(params, ref_params, grpo_table(batch, params), cfg, with_grad)


def c3po_loss(selected: SelectedSet, batch: Batch, params: PolicyParams, ref_params: PolicyParams,
              cfg: ObjectiveConfig, with_grad: bool = True):
    """Fixed-budget objective: only the selected tokens train, each weighted
    by ``1/token_budget`` regardless of how the step's lengths fell."""
    return token_loss(params, ref_params, c3po_table(selected, batch, params, cfg.token_budget), cfg, with_grad)


# ---------------------------------------------------------------------------
# Standalone regularizers (used directly and by the gradient-check suite)
# ---------------------------------------------------------------------------


def entropy_reg(params: PolicyParams, table: TokenTable, temperature: float = 1.0,
                with_grad: bool = False):
    """Mean next-token entropy over the table's contexts, in nats."""
    if table.size == 0:
        raise ObjectiveError("entropy regularizer needs at least one context")
    out = mixture_forward(params, table.features, table.eos_ok, temperature)
    value = float(np.mean(batch_entropy(out.probs)))
    if not with_grad:
        return value
    h = np.where(out.probs > 0, -(_support_log(out.probs) + 1.0) / table.size, 0.0)
    return value, mixture_vjp(params, out, h)


def router_stats(params: PolicyParams, table: TokenTable) -> RouterStats:
    out = mixture_forward(params, table.features, table.eos_ok)
    return RouterStats.from_logits(out.router_logits, out.selected)


def balance_loss_and_grad(params: PolicyParams, table: TokenTable, variant: str = "literal"):
    """Load-balance loss with its gradient; routed fractions are counts and
    carry no gradient."""
    out = mixture_forward(params, table.features, table.eos_ok)
    stats = RouterStats.from_logits(out.router_logits, out.selected)
    scale = (stats.expert_count if variant == "switch" else 1.0) / stats.token_count
    g = out.router_probs
    F = stats.routed_fraction
    dz = scale * g * (F[None, :] - (g @ F)[:, None])
    grad = mixture_vjp(params, out, np.zeros_like(out.probs), extra_router=dz)
    return balance_loss(stats, variant), grad


def z_loss_and_grad(params: PolicyParams, table: TokenTable):
    out = mixture_forward(params, table.features, table.eos_ok)
    stats = RouterStats.from_logits(out.router_logits, out.selected)
    dz = (2.0 / stats.token_count) * logsumexp(out.router_logits)[:, None] * out.router_probs
    grad = mixture_vjp(params, out, np.zeros_like(out.probs), extra_router=dz)
    return z_loss(stats), grad
