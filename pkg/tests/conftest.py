import numpy as np
import pytest

from budgetrl.objective import group_advantages
from budgetrl.policy import PolicyParams, Response, Vocabulary, mixture_forward, response_features
from budgetrl.rewards import Problem
from budgetrl.scheduler import Batch

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def criterion():
    """Record and print one pass/fail line, then assert."""
    def check(name: str, ok: bool, detail: str = ""):
        line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line
    return check


def small_params(seed: int, n_experts: int = 4, top_k: int = 2, scale: float = 0.5,
                 hash_buckets: int = 32, vocab: Vocabulary | None = None) -> PolicyParams:
    return PolicyParams.random(vocab or Vocabulary.arithmetic(), seed, scale, n_experts=n_experts,
                               top_k=top_k, hash_buckets=hash_buckets)


def fake_response(params: PolicyParams, rng: np.random.Generator, length: int, prompt: tuple,
                  prompt_id: str = "p", jitter: float = 0.3) -> Response:
    """A response of non-EOS tokens whose behavior log-probs are the current
    policy's, perturbed so importance ratios differ from one."""
    V = params.vocab.size
    choices = [t for t in range(V) if t != params.vocab.eos_id]
    tokens = tuple(int(t) for t in rng.choice(choices, size=length))
    resp = Response(prompt_id, prompt, tokens, np.zeros(length), terminated=False)
    if length:
        rows, ok = response_features(params, resp, length)
        out = mixture_forward(params, rows, ok)
        lp = np.log(out.probs[np.arange(length), list(tokens)])
        resp.behavior_logprobs = lp + rng.normal(0.0, jitter, length)
    return resp


def fake_batch(params: PolicyParams, seed: int, L: int, K: int, lengths=None, max_len: int = 6,
               jitter: float = 0.3) -> Batch:
    """L groups of K responses with random rewards and group advantages."""
    rng = np.random.default_rng(seed)
    problems, groups = [], []
    for l in range(L):
        prompt = tuple(int(t) for t in rng.integers(0, params.vocab.size, size=3))
        group = []
        for i in range(K):
            n = int(lengths[l * K + i]) if lengths is not None else int(rng.integers(1, max_len + 1))
            group.append(fake_response(params, rng, n, prompt, f"q{l}", jitter))
        rewards = rng.integers(0, 2, size=K).astype(float)
        for r, a, rew in zip(group, group_advantages(rewards), rewards):
            r.advantage, r.reward = float(a), float(rew)
        problems.append(Problem(f"q{l}", "math", "1 + 1 =", "2"))
        groups.append(group)
    return Batch(problems, groups, params.version)


def length_batch(lengths, K: int | None = None) -> Batch:
    """A batch carrying only response lengths (for the scheduler)."""
    lengths = list(lengths)
    K = K or len(lengths)
    groups = []
    for l in range(len(lengths) // K):
        groups.append([Response(f"q{l}", (), tuple(range(n)), np.zeros(n), True)
                       for n in lengths[l * K:(l + 1) * K]])
    return Batch([Problem(f"q{l}", "math", "x", "1") for l in range(len(groups))], groups)


def central_difference(f, x: np.ndarray, idx, h: float = 2e-4) -> np.ndarray:
    """Richardson-extrapolated central differences (truncation error O(h^4)),
    which keeps round-off small even where the slope itself is tiny."""
    out = np.empty(len(idx))
    for j, i in enumerate(idx):
        e = np.zeros_like(x)
        e[i] = 1.0
        out[j] = directional_difference(f, x, e, h)
    return out


def directional_difference(f, x: np.ndarray, d: np.ndarray, h: float = 2e-4) -> float:
    def D(step):
        return (f(x + step * d) - f(x - step * d)) / (2 * step)
    return (4 * D(h / 2) - D(h)) / 3


def gradient_error(f, x: np.ndarray, grad: np.ndarray, rng: np.random.Generator,
                   n_coords: int = 24, h: float = 2e-4) -> float:
    """Relative error between an analytic gradient and central differences,
    over a sample of coordinates (biased toward active ones) plus one random
    direction."""
    active = np.flatnonzero(grad)
    picks = list(rng.choice(active, size=min(n_coords, active.size), replace=False)) if active.size else []
    picks += list(rng.integers(0, x.size, size=4))
    fd = central_difference(f, x, picks, h)
    an = grad[picks]
    err = np.linalg.norm(an - fd) / max(np.linalg.norm(an), np.linalg.norm(fd), 1e-12)
    d = rng.normal(size=x.size)
    d /= np.linalg.norm(d)
    fd_dir = directional_difference(f, x, d, h)
    an_dir = float(grad @ d)
    err_dir = abs(an_dir - fd_dir) / max(abs(an_dir), abs(fd_dir), 1e-12)
    # the directional check only carries information when the slope is resolvable
    if max(abs(an_dir), abs(fd_dir)) < 1e-7:
        err_dir = 0.0
    return float(max(err, err_dir))
