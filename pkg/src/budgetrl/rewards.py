"""Rule-based verifiable rewards.

Math and science answers are read from the last ``\\boxed{...}`` span and
compared after a small normalization. Code answers are postfix programs in a
tiny integer DSL, scored all-or-nothing against the problem's test cases.
"""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

DOMAINS = ("math", "code", "science")
BOX_MARKER = "\\boxed{"
DEFAULT_STEP_LIMIT = 256

_LITERAL = re.compile(r"^\d+$")
_INPUT_REF = re.compile(r"^x(\d)$")
_NUMERIC = re.compile(r"^([+-]?)(\d+)(?:/([+-]?)(\d+))?$")
_DECIMAL = re.compile(r"^([+-]?)(\d+)\.(\d+)$")


@dataclass(frozen=True)
class TestCase:
    __test__ = False  # keep pytest from collecting this

    input: tuple[int, ...]
    expected_output: int

    def to_json(self) -> dict:
        return {"input": list(self.input), "expected_output": self.expected_output}


@dataclass
class Problem:
    """One verifiable task. ``gold`` is an answer string for math/science and
    a list of :class:`TestCase` for code."""

    id: str
    domain: str
    prompt: str
    gold: str | list[TestCase]
    difficulty: float | None = None
    tags: list[str] = field(default_factory=list)
    source: str = ""
    meta: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.domain not in DOMAINS:
            raise ValueError(f"problem {self.id}: unknown domain {self.domain!r}")
        if self.domain == "code":
            if not isinstance(self.gold, list) or not self.gold:
                raise ValueError(f"problem {self.id}: code problems need at least one test case")
        elif not isinstance(self.gold, str) or not self.gold.strip():
            raise ValueError(f"problem {self.id}: {self.domain} problems need a non-empty gold answer")
        if self.difficulty is not None and not 0.0 <= self.difficulty <= 1.0:
            raise ValueError(f"problem {self.id}: difficulty must lie in [0, 1]")

    @property
    def min_response_len(self) -> int:
        return int(self.meta.get("min_response_len", 0))

    def to_json(self) -> dict:
        rec = asdict(self)
        if self.domain == "code" and isinstance(self.gold, list):
            rec["gold"] = [tc.to_json() for tc in self.gold]
        return rec

    @classmethod
    def from_json(cls, rec: dict) -> "Problem":
        unknown = set(rec) - set(PROBLEM_FIELDS)
        if unknown:
            raise ValueError(f"unknown problem field(s): {sorted(unknown)}")
        gold = rec.get("gold")
        if rec.get("domain") == "code" and isinstance(gold, list):
            gold = [TestCase(tuple(int(x) for x in tc["input"]), int(tc["expected_output"])) for tc in gold]
        return cls(id=str(rec["id"]), domain=rec["domain"], prompt=rec.get("prompt", ""),
                   gold=gold if gold is not None else "", difficulty=rec.get("difficulty"),
                   tags=list(rec.get("tags", [])), source=rec.get("source", ""),
                   meta=dict(rec.get("meta", {})))


PROBLEM_FIELDS = ("id", "domain", "prompt", "gold", "difficulty", "tags", "source", "meta")


def read_dataset(path: str | Path) -> list[Problem]:
    """Read a JSON-lines dataset (one problem per line, UTF-8)."""
    problems = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                prob = Problem.from_json(json.loads(line))
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
            if prob.id in seen:
                raise ValueError(f"{path}:{lineno}: duplicate problem id {prob.id!r}")
            seen.add(prob.id)
            problems.append(prob)
    return problems


def write_dataset(path: str | Path, problems: Iterable[Problem]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for prob in problems:
            fh.write(json.dumps(prob.to_json(), ensure_ascii=False, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Math / science
# ---------------------------------------------------------------------------


def boxed_spans(text: str) -> list[str]:
    """Contents of every complete top-level ``\\boxed{...}`` span, in order."""
    spans = []
    pos = 0
    while True:
        start = text.find(BOX_MARKER, pos)
        if start < 0:
            return spans
        i = start + len(BOX_MARKER)
        depth = 1
        while i < len(text) and depth:
            if text[i] == "{":
                depth += 1
            elif text[i] == "}":
                depth -= 1
            i += 1
        if depth:
            return spans
        spans.append(text[start + len(BOX_MARKER):i - 1])
        pos = i


def extract_boxed(text: str) -> str | None:
    spans = boxed_spans(text)
    return spans[-1].strip() if spans else None


def normalize_answer(ans: str) -> str:
    """Whitespace removed, signs canonical, integer fractions reduced and
    leading zeros stripped. Anything non-numeric is compared verbatim."""
    s = "".join(ans.split())
    m = _NUMERIC.match(s)
    if m:
        sign, num, dsign, den = m.groups()
        if den is None:
            value = Fraction(int(num))
        elif int(den) == 0:
            return s
        else:
            value = Fraction(int(num), int(den))
            if dsign == "-":
                value = -value
        if sign == "-":
            value = -value
        return str(value)
    m = _DECIMAL.match(s)
    if m:
        sign, whole, frac = m.groups()
        body = f"{int(whole)}.{frac}"
        return body if sign != "-" or set(whole + frac) == {"0"} else "-" + body
    return s


def verify_math(response_text: str, gold: str) -> float:
    if not gold or not gold.strip():
        raise ValueError("gold answer must be non-empty")
    got = extract_boxed(response_text)
    if got is None:
        return 0.0
    return 1.0 if normalize_answer(got) == normalize_answer(gold) else 0.0


# ---------------------------------------------------------------------------
# Code
# ---------------------------------------------------------------------------


def run_program(tokens: str | Sequence[str], testcase: TestCase,
                step_limit: int = DEFAULT_STEP_LIMIT) -> int | None:
    """Evaluate a postfix program; any failure returns ``None``.

    Literals are non-negative integers, ``xN`` reads input ``N``, and ``/`` is
    integer division truncating toward zero.
    """
    if isinstance(tokens, str):
        tokens = tokens.split()
    if not tokens or len(tokens) > step_limit:
        return None
    stack: list[int] = []
    for tok in tokens:
        if _LITERAL.match(tok):
            stack.append(int(tok))
            continue
        ref = _INPUT_REF.match(tok)
        if ref:
            i = int(ref.group(1))
            if i >= len(testcase.input):
                return None
            stack.append(int(testcase.input[i]))
            continue
        if tok not in ("+", "-", "*", "/") or len(stack) < 2:
            return None
        b = stack.pop()
        a = stack.pop()
        if tok == "+":
            stack.append(a + b)
        elif tok == "-":
            stack.append(a - b)
        elif tok == "*":
            stack.append(a * b)
        else:
            if b == 0:
                return None
            q = abs(a) // abs(b)
            stack.append(q if (a >= 0) == (b >= 0) else -q)
    return stack[0] if len(stack) == 1 else None


def code_reward(tokens: str | Sequence[str] | None, testcases: Sequence[TestCase]) -> float:
    if not testcases:
        raise ValueError("code_reward needs at least one test case")
    if tokens is None:
        return 0.0
    for tc in testcases:
        if run_program(tokens, tc) != tc.expected_output:
            return 0.0
    return 1.0


def reward(response_text: str, problem: Problem) -> float:
    """Score a decoded response against its problem; always 0 or 1."""
    if problem.domain in ("math", "science"):
        return verify_math(response_text, problem.gold)
    if problem.domain == "code":
        program = extract_boxed(response_text)
        return code_reward(program.split() if program is not None else None, problem.gold)
    raise ValueError(f"unknown problem domain {problem.domain!r}")
