"""Synthetic verifiable problems for the math, code and science domains.

Each generator is deterministic in its seed and self-checks every problem it
emits: the stored gold (or reference program) must earn reward 1. The
``length_profile`` knob attaches a minimum response length to each problem so
that rollout lengths can be made short, heavy-tailed or bimodal on demand.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rewards import Problem, TestCase, code_reward, reward, run_program

LENGTH_PROFILES = ("short", "heavy_tailed", "bimodal")


@dataclass
class GeneratorSpec:
    domain: str
    count: int
    seed: int = 0
    operand_max: int = 9
    depth: int = 1
    ops: tuple[str, ...] = ("+",)
    testcase_count: int = 3
    n_inputs: int = 2
    length_profile: str = "short"
    # truncated Pareto on [len_min, len_max] for heavy_tailed; the two
    # endpoints are the modes for bimodal
    pareto_alpha: float = 1.1
    len_min: int = 4
    len_max: int = 96

    def __post_init__(self):
        self.ops = tuple(self.ops)
        if self.count < 1:
            raise ValueError("count must be >= 1")
        if self.domain not in ("math", "code", "science"):
            raise ValueError(f"unknown domain {self.domain!r}")
        if not 1 <= self.operand_max <= 99:
            raise ValueError("operand_max must lie in [1, 99]")
        if not 1 <= self.depth <= 4:
            raise ValueError("depth must lie in [1, 4]")
        if not 1 <= self.testcase_count <= 16:
            raise ValueError("testcase_count must lie in [1, 16]")
        if not 1 <= self.n_inputs <= 10:
            raise ValueError("n_inputs must lie in [1, 10]")
        if not set(self.ops) <= {"+", "-", "*"} or not self.ops:
            raise ValueError("ops must be a non-empty subset of + - *")
        if self.length_profile not in LENGTH_PROFILES:
            raise ValueError(f"length_profile must be one of {LENGTH_PROFILES}")
        if not 1 <= self.len_min <= self.len_max:
            raise ValueError("need 1 <= len_min <= len_max")
        if self.pareto_alpha <= 0:
            raise ValueError("pareto_alpha must be > 0")


def truncated_pareto_cdf(x, alpha: float, lo: float, hi: float):
    x = np.clip(np.asarray(x, dtype=np.float64), lo, hi)
    return (1 - (lo / x) ** alpha) / (1 - (lo / hi) ** alpha)


def _length_targets(spec: GeneratorSpec, rng: np.random.Generator, n: int) -> np.ndarray:
    if spec.length_profile == "short":
        return np.zeros(n, dtype=np.int64)
    if spec.length_profile == "bimodal":
        return np.where(rng.random(n) < 0.5, spec.len_min, spec.len_max).astype(np.int64)
    a, lo, hi = spec.pareto_alpha, float(spec.len_min), float(spec.len_max)
    u = rng.random(n)
    x = lo * (1 - u * (1 - (lo / hi) ** a)) ** (-1 / a)
    return np.minimum(np.floor(x), hi).astype(np.int64)


def _length_meta(spec: GeneratorSpec, target: int) -> dict:
    meta = {"length_profile": spec.length_profile, "min_response_len": int(target)}
    if spec.length_profile != "short":
        meta["length_params"] = {"alpha": spec.pareto_alpha, "len_min": spec.len_min, "len_max": spec.len_max}
    return meta


def _eval_infix(tokens: list[str]) -> int:
    # two precedence levels are enough for + - *
    terms: list[int] = [int(tokens[0])]
    signs: list[str] = []
    for op, tok in zip(tokens[1::2], tokens[2::2]):
        if op == "*":
            terms[-1] *= int(tok)
        else:
            signs.append(op)
            terms.append(int(tok))
    total = terms[0]
    for op, t in zip(signs, terms[1:]):
        total = total + t if op == "+" else total - t
    return total


def _spaced(n: int) -> str:
    return " ".join(str(n))


def _unique(spec: GeneratorSpec, make) -> list[Problem]:
    rng = np.random.default_rng(spec.seed)
    targets = _length_targets(spec, rng, spec.count)
    problems: list[Problem] = []
    seen: set[str] = set()
    attempts = 0
    while len(problems) < spec.count:
        attempts += 1
        if attempts > 200 * spec.count:
            raise ValueError(f"only {len(problems)} distinct {spec.domain} problems exist for this spec")
        prob = make(rng, len(problems))
        if prob is None or prob.prompt in seen:
            continue
        prob.meta.update(_length_meta(spec, targets[len(problems)]))
        if not _self_check(prob):
            continue
        seen.add(prob.prompt)
        problems.append(prob)
    return problems


def _self_check(prob: Problem) -> bool:
    if prob.domain == "code":
        return code_reward(prob.meta["reference"].split(), prob.gold) == 1.0
    return reward(f"\\boxed{{{prob.gold}}}", prob) == 1.0


def gen_math(spec: GeneratorSpec) -> list[Problem]:
    """Arithmetic chains ``a op b [op c ...] =`` with integer gold."""
    def make(rng, i):
        operands = rng.integers(0, spec.operand_max + 1, spec.depth + 1)
        ops = rng.choice(list(spec.ops), spec.depth)
        toks = [str(operands[0])]
        for op, x in zip(ops, operands[1:]):
            toks += [str(op), str(x)]
        gold = _eval_infix(toks)
        prompt = " ".join(_spaced(int(t)) if t.isdigit() else t for t in toks) + " ="
        return Problem(f"math-{spec.seed}-{i}", "math", prompt, str(gold),
                       tags=["arithmetic", f"depth{spec.depth}"], source="synthetic")
    return _unique(spec, make)


_SCIENCE_TEMPLATES = (
    ("force", "f = m * a ; m = {x} ; a = {y} ; f =", lambda x, y: x * y),
    ("work", "w = f * d ; f = {x} ; d = {y} ; w =", lambda x, y: x * y),
    ("speed", "v = d / t ; d = {xy} ; t = {y} ; v =", lambda x, y: x),
    ("hours", "1 h = 6 0 m ; {x} h = ? m", lambda x, y: 60 * x),
)


def gen_science(spec: GeneratorSpec) -> list[Problem]:
    """Formula-plug and unit-conversion problems with integer gold."""
    def make(rng, i):
        name, template, fn = _SCIENCE_TEMPLATES[rng.integers(len(_SCIENCE_TEMPLATES))]
        x = int(rng.integers(1, spec.operand_max + 1))
        y = int(rng.integers(1, spec.operand_max + 1))
        prompt = template.format(x=_spaced(x), y=_spaced(y), xy=_spaced(x * y))
        return Problem(f"science-{spec.seed}-{i}", "science", prompt, str(fn(x, y)),
                       tags=["science", name], source="synthetic")
    return _unique(spec, make)


def _random_program(rng, depth: int, n_inputs: int, operand_max: int, ops) -> list[str]:
    if depth == 0 or rng.random() < 0.25:
        if rng.random() < 0.7:
            return [f"x{rng.integers(n_inputs)}"]
        return [str(rng.integers(1, min(operand_max, 9) + 1))]
    left = _random_program(rng, depth - 1, n_inputs, operand_max, ops)
    right = _random_program(rng, depth - 1, n_inputs, operand_max, ops)
    return left + right + [str(rng.choice(list(ops)))]


def gen_code(spec: GeneratorSpec) -> list[Problem]:
    """Postfix-program synthesis from input/output examples; test cases are
    produced by running a hidden reference program."""
    def make(rng, i):
        program = _random_program(rng, spec.depth, spec.n_inputs, spec.operand_max, spec.ops)
        if len(program) == 1:
            program = [f"x{rng.integers(spec.n_inputs)}", f"x{rng.integers(spec.n_inputs)}", "+"]
        cases = []
        for _ in range(spec.testcase_count):
            inputs = tuple(int(v) for v in rng.integers(0, spec.operand_max + 1, spec.n_inputs))
            out = run_program(program, TestCase(inputs, 0))
            if out is None:
                return None
            cases.append(TestCase(inputs, out))
        args = " , ".join(f"x{k}" for k in range(spec.n_inputs))
        shown = " ; ".join(" ".join(_spaced(v) for v in tc.input) + " = " + _signed(tc.expected_output)
                           for tc in cases)
        prompt = f"f ( {args} ) : {shown}"
        return Problem(f"code-{spec.seed}-{i}", "code", prompt, cases,
                       tags=["postfix"], source="synthetic", meta={"reference": " ".join(program)})
    return _unique(spec, make)


def _signed(n: int) -> str:
    return ("- " if n < 0 else "") + _spaced(abs(n))


GENERATORS = {"math": gen_math, "code": gen_code, "science": gen_science}


def generate(spec: GeneratorSpec) -> list[Problem]:
    return GENERATORS[spec.domain](spec)
