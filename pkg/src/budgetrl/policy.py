"""Mixture-of-experts linear-softmax policy over a small token vocabulary.

The policy conditions on a sparse set of hashed context features (bias, last
token, hashed n-grams of the recent window, and a prompt/position conjunction)
and mixes the top-k experts selected by a softmax router. Everything is plain
numpy in float64, and every derivative is written out in closed form so loss
gradients can be checked against finite differences.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

EOS = "<eos>"
BOX_OPEN = "\\boxed{"
BOX_CLOSE = "}"
UNK = "?"

CHECKPOINT_FORMAT = "budgetrl.policy/1"

_DIGITS = tuple(str(d) for d in range(10))
_OPS = ("+", "-", "*", "/")


class PolicyError(ValueError):
    """Raised when the policy produces or receives invalid numbers."""


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]

    def __post_init__(self):
        toks = tuple(self.tokens)
        object.__setattr__(self, "tokens", toks)
        if len(set(toks)) != len(toks):
            raise ValueError("vocabulary tokens must be unique")
        for special in (EOS, BOX_OPEN, BOX_CLOSE, UNK):
            if special not in toks:
                raise ValueError(f"vocabulary is missing required token {special!r}")
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(toks)})

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def eos_id(self) -> int:
        return self._index[EOS]

    @property
    def box_open_id(self) -> int:
        return self._index[BOX_OPEN]

    @property
    def box_close_id(self) -> int:
        return self._index[BOX_CLOSE]

    @property
    def unk_id(self) -> int:
        return self._index[UNK]

    def id(self, token: str) -> int:
        return self._index[token]

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def encode(self, text: str) -> tuple[int, ...]:
        """Whitespace-split ``text``; words outside the vocabulary fall back to
        per-character lookup, and unknown characters map to the UNK token."""
        ids = []
        for word in text.split():
            if word in self._index:
                ids.append(self._index[word])
                continue
            for ch in word:
                ids.append(self._index.get(ch, self.unk_id))
        return tuple(ids)

    def decode(self, ids: Sequence[int]) -> str:
        eos = self.eos_id
        return " ".join(self.tokens[i] for i in ids if i != eos)

    @classmethod
    def default(cls) -> "Vocabulary":
        """Digits, operators, punctuation, DSL input references and letters."""
        letters = tuple(chr(c) for c in range(ord("a"), ord("z") + 1))
        refs = tuple(f"x{i}" for i in range(10))
        return cls((EOS, BOX_OPEN, BOX_CLOSE, UNK) + _DIGITS + _OPS
                   + ("=", "(", ")", ",", ";", ":") + refs + letters)

    @classmethod
    def arithmetic(cls) -> "Vocabulary":
        """Compact alphabet for the arithmetic task: keeps random exploration
        from a uniform policy likely enough to ever hit a correct answer."""
        return cls((EOS, BOX_OPEN, BOX_CLOSE, UNK) + _DIGITS + _OPS + ("=",))

    @classmethod
    def preset(cls, name: str) -> "Vocabulary":
        presets = {"default": cls.default, "arithmetic": cls.arithmetic}
        if name not in presets:
            raise ValueError(f"unknown vocabulary preset {name!r}; expected one of {sorted(presets)}")
        return presets[name]()


# ---------------------------------------------------------------------------
# Feature hashing
# ---------------------------------------------------------------------------

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix(x: np.ndarray) -> np.ndarray:
    # splitmix64 finalizer; uint64 arrays wrap silently
    z = x + _GOLDEN
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def _combine(h: np.ndarray, values: np.ndarray) -> np.ndarray:
    return _mix(h ^ values.astype(np.uint64))


def prompt_hash(prompt_ids: Sequence[int]) -> np.uint64:
    h = np.array([len(prompt_ids)], dtype=np.uint64)
    for tok in prompt_ids:
        h = _combine(h, np.array([tok + 1]))
    return h[0]


@dataclass(frozen=True)
class Featurizer:
    """Maps a context window to ``n_features`` active feature indices.

    Layout: index 0 is the bias, ``1 .. V+1`` the last-token one-hot (V is the
    padding id used before the first token), and the remaining ``hash_buckets``
    rows are shared by the hashed groups.
    """

    vocab_size: int
    context_order: int
    hash_buckets: int

    @property
    def dim(self) -> int:
        return 2 + self.vocab_size + self.hash_buckets

    @property
    def n_features(self) -> int:
        return 3 + max(self.context_order - 1, 0)

    @property
    def pad_id(self) -> int:
        return self.vocab_size

    def features(self, windows: np.ndarray, prompt_hashes: np.ndarray, rel_pos: np.ndarray) -> np.ndarray:
        """``windows`` is ``(B, context_order)`` with the newest token last."""
        windows = np.asarray(windows, dtype=np.int64)
        B = windows.shape[0]
        out = np.empty((B, self.n_features), dtype=np.int64)
        out[:, 0] = 0
        out[:, 1] = 1 + windows[:, -1]
        base = 2 + self.vocab_size
        buckets = np.uint64(self.hash_buckets)
        col = 2
        for order in range(2, self.context_order + 1):
            h = np.full(B, order * 7919, dtype=np.uint64)
            for j in range(order):
                h = _combine(h, windows[:, -order + j] + 1)
            out[:, col] = base + (h % buckets).astype(np.int64)
            col += 1
        h = _combine(np.asarray(prompt_hashes, dtype=np.uint64), np.asarray(rel_pos, dtype=np.int64) + 2)
        out[:, col] = base + (h % buckets).astype(np.int64)
        return out

    def windows_for(self, prompt_ids: Sequence[int], response_ids: Sequence[int]) -> np.ndarray:
        """Context windows for every response position, shape ``(T, order)``."""
        n = max(self.context_order, 1)
        seq = np.concatenate([np.full(n, self.pad_id, dtype=np.int64),
                              np.asarray(prompt_ids, dtype=np.int64),
                              np.asarray(response_ids, dtype=np.int64)])
        start = n + len(prompt_ids)
        T = len(response_ids)
        idx = np.arange(start, start + T)[:, None] - np.arange(n, 0, -1)[None, :]
        return seq[idx]


def relative_position(t: np.ndarray, min_len: np.ndarray) -> np.ndarray:
    """Position measured from the point where end-of-sequence becomes legal;
    every earlier position shares the bucket -1."""
    t = np.asarray(t)
    min_len = np.asarray(min_len)
    return np.where(t >= min_len, t - min_len, -1)


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PolicyParams:
    """Immutable weight snapshot. ``router`` is ``(D, N_e)``, ``experts`` is
    ``(N_e, D, V)``; new versions are built with :meth:`evolve`."""

    vocab: Vocabulary
    router: np.ndarray
    experts: np.ndarray
    top_k: int
    context_order: int = 3
    hash_buckets: int = 4096
    version: int = 0

    def __post_init__(self):
        router = np.array(self.router, dtype=np.float64, copy=True)
        experts = np.array(self.experts, dtype=np.float64, copy=True)
        router.setflags(write=False)
        experts.setflags(write=False)
        object.__setattr__(self, "router", router)
        object.__setattr__(self, "experts", experts)
        feat = Featurizer(self.vocab.size, self.context_order, self.hash_buckets)
        object.__setattr__(self, "featurizer", feat)
        n_e = experts.shape[0]
        if router.shape != (feat.dim, n_e) or experts.shape != (n_e, feat.dim, self.vocab.size):
            raise ValueError(
                f"weight shapes router={router.shape} experts={experts.shape} do not match "
                f"feature dim {feat.dim}, vocab {self.vocab.size}")
        if not 1 <= self.top_k <= n_e:
            raise ValueError(f"top_k={self.top_k} must lie in [1, {n_e}]")
        if not (np.isfinite(router).all() and np.isfinite(experts).all()):
            raise PolicyError("policy weights contain non-finite entries")

    @property
    def n_experts(self) -> int:
        return self.experts.shape[0]

    @classmethod
    def zeros(cls, vocab: Vocabulary, n_experts: int = 4, top_k: int = 2,
              context_order: int = 3, hash_buckets: int = 4096) -> "PolicyParams":
        dim = Featurizer(vocab.size, context_order, hash_buckets).dim
        return cls(vocab, np.zeros((dim, n_experts)), np.zeros((n_experts, dim, vocab.size)),
                   top_k, context_order, hash_buckets)

    @classmethod
    def random(cls, vocab: Vocabulary, seed: int, scale: float = 0.5, **kw) -> "PolicyParams":
        base = cls.zeros(vocab, **kw)
        rng = np.random.default_rng(seed)
        return base.evolve(rng.normal(0, scale, base.router.shape),
                           rng.normal(0, scale, base.experts.shape), bump=False)

    def evolve(self, router: np.ndarray, experts: np.ndarray, bump: bool = True) -> "PolicyParams":
        return replace(self, router=router, experts=experts,
                       version=self.version + (1 if bump else 0))

    def flat(self) -> np.ndarray:
        return np.concatenate([self.router.ravel(), self.experts.ravel()])

    def with_flat(self, vec: np.ndarray) -> "PolicyParams":
        n = self.router.size
        return replace(self, router=vec[:n].reshape(self.router.shape),
                       experts=vec[n:].reshape(self.experts.shape))

    def same_weights(self, other: "PolicyParams") -> bool:
        return (np.array_equal(self.router, other.router)
                and np.array_equal(self.experts, other.experts)
                and self.vocab == other.vocab and self.top_k == other.top_k
                and self.context_order == other.context_order
                and self.hash_buckets == other.hash_buckets)


@dataclass
class ParamGrad:
    """Dense gradient with the same block layout as :class:`PolicyParams`."""

    router: np.ndarray
    experts: np.ndarray

    @classmethod
    def zeros_like(cls, params: PolicyParams) -> "ParamGrad":
        return cls(np.zeros_like(params.router), np.zeros_like(params.experts))

    def __add__(self, other: "ParamGrad") -> "ParamGrad":
        return ParamGrad(self.router + other.router, self.experts + other.experts)

    def scaled(self, c: float) -> "ParamGrad":
        return ParamGrad(self.router * c, self.experts * c)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.router.ravel(), self.experts.ravel()])

    def norm(self) -> float:
        return float(np.sqrt(np.sum(self.router ** 2) + np.sum(self.experts ** 2)))


@dataclass
class SparseGrad:
    """Gradient restricted to the rows of the active features."""

    features: np.ndarray
    router: np.ndarray    # (m, N_e)
    experts: np.ndarray   # (N_e, m, V)

    def to_dense(self, params: PolicyParams) -> ParamGrad:
        g = ParamGrad.zeros_like(params)
        g.router[self.features] = self.router
        g.experts[:, self.features] = self.experts
        return g


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------


@dataclass
class TokenDistribution:
    probs: np.ndarray
    logits: np.ndarray
    router_probs: np.ndarray
    router_logits: np.ndarray
    selected_experts: np.ndarray


@dataclass
class MixtureOut:
    """Batched forward intermediates, kept for the backward pass."""

    features: np.ndarray       # (B, F)
    router_logits: np.ndarray  # (B, N_e)
    router_probs: np.ndarray   # (B, N_e)
    selected: np.ndarray       # (B, k)
    weights: np.ndarray        # (B, k) router probs renormalized over the selection
    expert_probs: np.ndarray   # (B, k, V)
    probs: np.ndarray          # (B, V)
    temperature: float


def _softmax(x: np.ndarray) -> np.ndarray:
    m = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / np.sum(e, axis=-1, keepdims=True)


def logsumexp(x: np.ndarray) -> np.ndarray:
    m = np.max(x, axis=-1)
    return m + np.log(np.sum(np.exp(x - m[..., None]), axis=-1))


def mixture_forward(params: PolicyParams, features: np.ndarray, eos_ok: np.ndarray | None = None,
                    temperature: float = 1.0) -> MixtureOut:
    """Forward pass over a batch of feature rows.

    Sums are accumulated one feature column at a time so a row's output does
    not depend on how many other rows share the batch.
    """
    if temperature <= 0:
        raise ValueError("mixture_forward needs temperature > 0; use argmax for greedy decoding")
    features = np.asarray(features, dtype=np.int64)
    B, F = features.shape
    z = params.router[features[:, 0]].copy()
    for f in range(1, F):
        z += params.router[features[:, f]]
    g = _softmax(z)
    k = params.top_k
    sel = np.argsort(-z, axis=1, kind="stable")[:, :k]
    g_sel = np.take_along_axis(g, sel, axis=1)
    w = g_sel / np.sum(g_sel, axis=1, keepdims=True)

    u = params.experts[sel, features[:, None, 0]].copy()
    with np.errstate(over="ignore", invalid="ignore"):   # overflow is reported below
        for f in range(1, F):
            u += params.experts[sel, features[:, None, f]]
        if temperature != 1.0:
            u = u / temperature
    if not (np.isfinite(u).all() and np.isfinite(z).all()):
        _raise_nonfinite(params, features)
    if eos_ok is not None:
        blocked = ~np.asarray(eos_ok, dtype=bool)
        if blocked.any():
            u[blocked, :, params.vocab.eos_id] = -np.inf
    q = _softmax(u)
    p = w[:, 0, None] * q[:, 0]
    for j in range(1, k):
        p = p + w[:, j, None] * q[:, j]
    if not np.all(np.isfinite(p)):
        _raise_nonfinite(params, features)
    return MixtureOut(features, z, g, sel, w, q, p, temperature)


def _raise_nonfinite(params: PolicyParams, features: np.ndarray):
    rows = np.unique(features)
    bad_r = ~np.isfinite(params.router[rows]).all(axis=1)
    bad_e = ~np.isfinite(params.experts[:, rows]).all(axis=(0, 2))
    raise PolicyError(
        f"non-finite logits (policy version {params.version}); "
        f"router rows {rows[bad_r].tolist()}, expert rows {rows[bad_e].tolist()}, "
        f"max |router| {np.max(np.abs(params.router)):.3g}, max |experts| {np.max(np.abs(params.experts)):.3g}")


def context_features(params: PolicyParams, prompt_ids: Sequence[int], prefix_ids: Sequence[int] = (),
                     min_len: int = 0) -> tuple[np.ndarray, bool]:
    """Features and end-of-sequence legality for a single context."""
    feat = params.featurizer
    t = len(prefix_ids)
    window = feat.windows_for(tuple(prompt_ids) + tuple(prefix_ids), [0])[0]
    row = feat.features(window[None, :], np.array([prompt_hash(prompt_ids)]),
                        relative_position(np.array([t]), np.array([min_len])))
    return row, t >= min_len


def forward(params: PolicyParams, prompt_ids: Sequence[int], prefix_ids: Sequence[int] = (),
            min_len: int = 0, temperature: float = 1.0) -> TokenDistribution:
    """Next-token distribution given the prompt and the response prefix."""
    for tok in (*prompt_ids, *prefix_ids):
        if not 0 <= tok < params.vocab.size:
            raise ValueError(f"token id {tok} outside vocabulary of size {params.vocab.size}")
    row, eos_ok = context_features(params, prompt_ids, prefix_ids, min_len)
    out = mixture_forward(params, row, np.array([eos_ok]), temperature)
    with np.errstate(divide="ignore"):
        logits = np.log(out.probs[0])
    return TokenDistribution(out.probs[0], logits, out.router_probs[0],
                             out.router_logits[0], out.selected[0])


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------


def mixture_vjp(params: PolicyParams, out: MixtureOut, h: np.ndarray,
                extra_router: np.ndarray | None = None, grad: ParamGrad | None = None) -> ParamGrad:
    """Pull ``h = d loss / d probs`` (B, V) back onto the weights.

    ``extra_router`` adds a direct ``d loss / d router_logits`` (B, N_e) term,
    used by the router auxiliary losses. Entries of ``h`` where the policy
    assigns zero probability must be finite (they are multiplied by zero).
    """
    if grad is None:
        grad = ParamGrad.zeros_like(params)
    q, w, p = out.expert_probs, out.weights, out.probs
    s = np.einsum("bkv,bv->bk", q, h)
    du = (w / out.temperature)[:, :, None] * q * (h[:, None, :] - s[:, :, None])
    sp = np.einsum("bv,bv->b", p, h)
    dz = np.zeros_like(out.router_logits)
    np.put_along_axis(dz, out.selected, w * (s - sp[:, None]), axis=1)
    if extra_router is not None:
        dz = dz + extra_router
    feats = out.features
    B, F = feats.shape
    np.add.at(grad.router, feats.ravel(), np.repeat(dz, F, axis=0))
    k = out.selected.shape[1]
    e_idx = np.broadcast_to(out.selected[:, :, None], (B, k, F))
    f_idx = np.broadcast_to(feats[:, None, :], (B, k, F))
    vals = np.broadcast_to(du[:, :, None, :], (B, k, F, du.shape[-1]))
    np.add.at(grad.experts, (e_idx.ravel(), f_idx.ravel()), vals.reshape(-1, du.shape[-1]))
    return grad


def logprob_and_grad(params: PolicyParams, prompt_ids: Sequence[int], prefix_ids: Sequence[int],
                     target: int, min_len: int = 0, temperature: float = 1.0) -> tuple[float, SparseGrad]:
    row, eos_ok = context_features(params, prompt_ids, prefix_ids, min_len)
    out = mixture_forward(params, row, np.array([eos_ok]), temperature)
    p_t = out.probs[0, target]
    if p_t <= 0:
        raise PolicyError(f"target token {target} has zero probability in this context")
    h = np.zeros_like(out.probs)
    h[0, target] = 1.0 / p_t
    dense = mixture_vjp(params, out, h)
    rows = np.unique(row[0])
    return float(np.log(p_t)), SparseGrad(rows, dense.router[rows], dense.experts[:, rows])


# ---------------------------------------------------------------------------
# Distribution functionals
# ---------------------------------------------------------------------------


def _probs(d) -> np.ndarray:
    return np.asarray(d.probs if isinstance(d, TokenDistribution) else d, dtype=np.float64)


def entropy(dist) -> float:
    """Shannon entropy in nats; zero-probability entries contribute nothing."""
    p = _probs(dist)
    nz = p > 0
    return float(-np.sum(p[nz] * np.log(p[nz])))


def exact_kl(dist_p, dist_ref) -> float:
    p, q = _probs(dist_p), _probs(dist_ref)
    if p.shape != q.shape:
        raise ValueError(f"distributions over different vocabularies: {p.shape} vs {q.shape}")
    nz = p > 0
    if np.any(q[nz] <= 0):
        raise PolicyError("reference distribution lacks support where the policy has mass")
    return float(np.sum(p[nz] * np.log(p[nz] / q[nz])))


def batch_entropy(p: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return -terms.sum(axis=-1)


def batch_kl(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    if np.any((p > 0) & (q <= 0)):
        raise PolicyError("reference distribution lacks support where the policy has mass")
    safe_p = np.where(p > 0, p, 1.0)
    safe_q = np.where(p > 0, q, 1.0)
    return np.sum(np.where(p > 0, p * np.log(safe_p / safe_q), 0.0), axis=-1)


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


@dataclass
class Response:
    prompt_id: str
    prompt_ids: tuple[int, ...]
    token_ids: tuple[int, ...]
    behavior_logprobs: np.ndarray
    terminated: bool
    min_len: int = 0
    reward: float = 0.0
    advantage: float = 0.0
    text: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def length(self) -> int:
        return len(self.token_ids)

    def __post_init__(self):
        self.behavior_logprobs = np.asarray(self.behavior_logprobs, dtype=np.float64)
        if len(self.token_ids) != len(self.behavior_logprobs):
            raise ValueError("token_ids and behavior_logprobs must have equal length")


def _draw(p: np.ndarray, u: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(p, axis=1)
    idx = (cdf <= (u * cdf[:, -1])[:, None]).sum(axis=1)
    # floating-point slack can push past the last supported token
    last_nz = p.shape[1] - 1 - np.argmax(p[:, ::-1] > 0, axis=1)
    return np.minimum(idx, last_nz)


def sample_batch(params: PolicyParams, prompts: Sequence[Sequence[int]], seeds: Sequence[int],
                 max_len: int, temperature: float = 1.0, min_lens: Sequence[int] | None = None,
                 prompt_ids: Sequence[str] | None = None) -> list[Response]:
    """Sample one response per prompt, all sequences advanced in lock-step.

    Each sequence draws its uniforms from its own seed, so a response does not
    depend on which other prompts share the batch.
    """
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    if temperature < 0:
        raise ValueError("temperature must be >= 0")
    B = len(prompts)
    min_lens = np.zeros(B, dtype=np.int64) if min_lens is None else np.asarray(min_lens, dtype=np.int64)
    min_lens = np.minimum(min_lens, max_len - 1)
    feat = params.featurizer
    n = feat.context_order
    eos = params.vocab.eos_id
    uniforms = np.stack([np.random.default_rng(s).random(max_len) for s in seeds]) if B else np.zeros((0, max_len))
    windows = np.stack([feat.windows_for(p, [0])[0] for p in prompts]) if B else np.zeros((0, n), np.int64)
    hashes = np.array([prompt_hash(p) for p in prompts], dtype=np.uint64)
    tokens = np.zeros((B, max_len), dtype=np.int64)
    logps = np.zeros((B, max_len))
    alive = np.ones(B, dtype=bool)
    lengths = np.full(B, max_len)
    for t in range(max_len):
        act = np.flatnonzero(alive)
        if act.size == 0:
            break
        rows = feat.features(windows[act], hashes[act], relative_position(np.full(act.size, t), min_lens[act]))
        eos_ok = t >= min_lens[act]
        if temperature == 0:
            out = mixture_forward(params, rows, eos_ok, 1.0)
            choice = np.argmax(out.probs, axis=1)
            lp = np.zeros(act.size)
        else:
            out = mixture_forward(params, rows, eos_ok, temperature)
            choice = _draw(out.probs, uniforms[act, t])
            lp = np.log(out.probs[np.arange(act.size), choice])
        tokens[act, t] = choice
        logps[act, t] = lp
        windows[act] = np.concatenate([windows[act, 1:], choice[:, None]], axis=1)
        done = choice == eos
        lengths[act[done]] = t + 1
        alive[act[done]] = False
    out_list = []
    for b in range(B):
        L = int(lengths[b])
        ids = tuple(int(x) for x in tokens[b, :L])
        out_list.append(Response(
            prompt_id=prompt_ids[b] if prompt_ids is not None else str(b),
            prompt_ids=tuple(prompts[b]),
            token_ids=ids,
            behavior_logprobs=logps[b, :L].copy(),
            terminated=bool(ids and ids[-1] == eos),
            min_len=int(min_lens[b]),
            text=params.vocab.decode(ids),
        ))
    return out_list


def sample_response(params: PolicyParams, prompt_ids: Sequence[int], max_len: int,
                    temperature: float = 1.0, rng_seed: int = 0, min_len: int = 0,
                    prompt_id: str = "0") -> Response:
    return sample_batch(params, [prompt_ids], [rng_seed], max_len, temperature, [min_len], [prompt_id])[0]


def response_features(params: PolicyParams, resp: Response, count: int | None = None
                      ) -> tuple[np.ndarray, np.ndarray]:
    """Feature rows and end-of-sequence legality for the first ``count``
    positions of a response."""
    n = resp.length if count is None else count
    feat = params.featurizer
    windows = feat.windows_for(resp.prompt_ids, resp.token_ids[:n])
    t = np.arange(n)
    rows = feat.features(windows, np.full(n, prompt_hash(resp.prompt_ids), dtype=np.uint64),
                         relative_position(t, np.full(n, resp.min_len)))
    return rows, t >= resp.min_len


# ---------------------------------------------------------------------------
# Scripted policies and checkpoints
# ---------------------------------------------------------------------------


def imprint(params: PolicyParams, prompt_ids: Sequence[int], response_ids: Sequence[int],
            logit: float | Sequence[float] = 20.0, min_len: int = 0) -> PolicyParams:
    """Return params that emit ``response_ids`` after ``prompt_ids`` with high
    probability, by raising each target logit on the prompt/position feature
    of every expert. ``logit`` may be given per position."""
    logits = np.broadcast_to(np.asarray(logit, dtype=np.float64), (len(response_ids),))
    experts = params.experts.copy()
    for t, tok in enumerate(response_ids):
        row, _ = context_features(params, prompt_ids, response_ids[:t], min_len)
        experts[:, row[0, -1], tok] += logits[t]
    return params.evolve(params.router, experts, bump=False)


def save_params(path: str | Path, params: PolicyParams, **extra_arrays: np.ndarray) -> None:
    meta = {
        "format": CHECKPOINT_FORMAT,
        "vocab": list(params.vocab.tokens),
        "top_k": params.top_k,
        "context_order": params.context_order,
        "hash_buckets": params.hash_buckets,
        "version": params.version,
    }
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(meta)), router=params.router,
                 experts=params.experts, **extra_arrays)


def load_params(path: str | Path) -> tuple[PolicyParams, dict[str, np.ndarray]]:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: unsupported checkpoint format {meta.get('format')!r}")
        params = PolicyParams(Vocabulary(tuple(meta["vocab"])), data["router"], data["experts"],
                              meta["top_k"], meta["context_order"], meta["hash_buckets"], meta["version"])
        extra = {k: data[k].copy() for k in data.files if k not in ("meta", "router", "experts")}
    return params, extra
