"""Rule-based data curation: cleansing, shingle deduplication and
decontamination, model-aware pass rates and difficulty filtering."""

from __future__ import annotations

import json
import re
import unicodedata
import zlib
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from .policy import PolicyParams, sample_batch
from .rewards import Problem, reward

DEFAULT_SUBQUESTION_PATTERNS = (
    r"\(a\).*\(b\)",
    r"\(i\).*\(ii\)",
    r"(?im)^\s*(part|question)\s*\d+\s*[:.)]",
    r"(?m)^\s*[a-d]\)\s.*\n\s*[b-e]\)\s",
)
IMAGE_PATTERN = re.compile(r"<img\b|!\[[^\]]*\]\(|\\includegraphics|\[image\]|\.(png|jpe?g|gif|bmp|svg)\b", re.I)
CHOICE_GOLD = re.compile(r"^\(?[A-Ea-e]\)?\.?$")
CHOICE_OPTIONS = re.compile(r"\(A\).*\(B\)|^\s*A[.)]\s.*\n\s*B[.)]\s", re.S | re.M)
BINARY_ANSWERS = {"yes", "no", "true", "false"}

HISTOGRAM_BUCKETS = ("0", "(0,0.25]", "(0.25,0.5]", "(0.5,0.75]", "(0.75,1)", "1")

SemanticHook = Callable[[Problem, Sequence[Problem]], bool]


@dataclass
class CurationReport:
    input_count: int = 0
    removed_by_rule: dict[str, int] = field(default_factory=dict)
    retained_count: int = 0
    pass_rate_histogram: dict[str, int] = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    def remove(self, rule: str, n: int = 1) -> None:
        self.removed_by_rule[rule] = self.removed_by_rule.get(rule, 0) + n

    def check(self) -> None:
        if self.input_count != self.retained_count + sum(self.removed_by_rule.values()):
            raise AssertionError(f"curation counts do not reconcile: {self.to_json()}")

    def merged(self, other: "CurationReport") -> "CurationReport":
        """Chain a later stage's report onto this one."""
        out = CurationReport(self.input_count, dict(self.removed_by_rule), other.retained_count,
                             {**self.pass_rate_histogram, **other.pass_rate_histogram},
                             self.notes + other.notes)
        for rule, n in other.removed_by_rule.items():
            out.remove(rule, n)
        return out

    def to_json(self) -> dict:
        return {"input_count": self.input_count, "removed_by_rule": dict(sorted(self.removed_by_rule.items())),
                "retained_count": self.retained_count, "pass_rate_histogram": self.pass_rate_histogram,
                "notes": self.notes}

    def to_text(self) -> str:
        lines = [f"input problems      {self.input_count}"]
        for rule, n in sorted(self.removed_by_rule.items()):
            lines.append(f"  removed {rule:<20s} {n}")
        lines.append(f"retained            {self.retained_count}")
        if self.pass_rate_histogram:
            lines.append("pass-rate histogram")
            for bucket in HISTOGRAM_BUCKETS:
                lines.append(f"  {bucket:<12s} {self.pass_rate_histogram.get(bucket, 0)}")
        lines.extend(f"note: {n}" for n in self.notes)
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Cleansing
# ---------------------------------------------------------------------------


def _invalid_text(text: str) -> bool:
    if not text or not text.strip():
        return True
    for ch in text:
        if ch == "�" or 0xD800 <= ord(ch) <= 0xDFFF:
            return True
        if unicodedata.category(ch) == "Cc" and ch not in "\n\t\r":
            return True
    return False


def _missing_gold(p: Problem) -> bool:
    if p.domain == "code":
        return not isinstance(p.gold, list) or not p.gold
    return not isinstance(p.gold, str) or not p.gold.strip()


def cleanse_rule(p: Problem, subquestion_patterns: Sequence[str] = DEFAULT_SUBQUESTION_PATTERNS) -> str | None:
    """Name of the first rule that rejects ``p``, or ``None``."""
    if _invalid_text(p.prompt):
        return "invalid_prompt"
    if IMAGE_PATTERN.search(p.prompt):
        return "image"
    if _missing_gold(p):
        return "missing_gold"
    if any(re.search(pat, p.prompt, re.S) for pat in subquestion_patterns):
        return "multi_subquestion"
    if isinstance(p.gold, str):
        gold = p.gold.strip().lower().rstrip(".")
        if gold in BINARY_ANSWERS:
            return "binary_answer"
        if CHOICE_GOLD.match(p.gold.strip()) or CHOICE_OPTIONS.search(p.prompt):
            return "multiple_choice"
    return None


def cleanse(problems: Iterable[Problem], subquestion_patterns: Sequence[str] = DEFAULT_SUBQUESTION_PATTERNS
            ) -> tuple[list[Problem], CurationReport]:
    problems = list(problems)
    report = CurationReport(input_count=len(problems))
    kept = []
    for p in problems:
        rule = cleanse_rule(p, subquestion_patterns)
        if rule is None:
            kept.append(p)
        else:
            report.remove(rule)
    report.retained_count = len(kept)
    report.check()
    return kept, report


# ---------------------------------------------------------------------------
# Deduplication
# ---------------------------------------------------------------------------


def normalize_text(text: str) -> str:
    return "".join(ch for ch in text.lower() if ch.isalnum())


def shingles(text: str, n: int = 8) -> frozenset[str]:
    s = normalize_text(text)
    if len(s) <= n:
        return frozenset([s])
    return frozenset(s[i:i + n] for i in range(len(s) - n + 1))


def jaccard(a: frozenset, b: frozenset) -> float:
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


class _ShingleIndex:
    def __init__(self):
        self.sets: list[frozenset] = []
        self.postings: dict[str, list[int]] = {}

    def add(self, sh: frozenset) -> None:
        idx = len(self.sets)
        self.sets.append(sh)
        for s in sh:
            self.postings.setdefault(s, []).append(idx)

    def best(self, sh: frozenset) -> float:
        cands = {i for s in sh for i in self.postings.get(s, ())}
        return max((jaccard(sh, self.sets[i]) for i in cands), default=0.0)


def dedupe(problems: Iterable[Problem], eval_set: Iterable[Problem] = (), n: int = 8,
           threshold: float = 0.8, semantic_hook: SemanticHook | None = None
           ) -> tuple[list[Problem], CurationReport]:
    """Remove eval-set overlaps, then near-duplicates (first occurrence wins)."""
    problems = list(problems)
    report = CurationReport(input_count=len(problems))
    contaminants = _ShingleIndex()
    for e in eval_set:
        contaminants.add(shingles(e.prompt, n))
    seen = _ShingleIndex()
    kept: list[Problem] = []
    for p in problems:
        sh = shingles(p.prompt, n)
        if contaminants.best(sh) >= threshold:
            report.remove("decontamination")
        elif seen.best(sh) >= threshold:
            report.remove("duplicate")
        elif semantic_hook is not None and semantic_hook(p, kept):
            report.remove("semantic_duplicate")
        else:
            seen.add(sh)
            kept.append(p)
    report.retained_count = len(kept)
    report.check()
    return kept, report


# ---------------------------------------------------------------------------
# Pass rates and difficulty
# ---------------------------------------------------------------------------


def pass_rate(problem: Problem, params: PolicyParams, n_samples: int, seed: int = 0,
              max_len: int = 16, temperature: float = 1.0) -> float:
    """Fraction of ``n_samples`` sampled responses that earn reward 1."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    prompt = params.vocab.encode(problem.prompt)
    # per-problem sub-seeds keep sample streams independent across problems
    key = zlib.crc32(problem.id.encode("utf-8"))
    seeds = [int(np.random.SeedSequence([seed, key, i]).generate_state(1)[0]) for i in range(n_samples)]
    responses = sample_batch(params, [prompt] * n_samples, seeds, max_len, temperature,
                             [problem.min_response_len] * n_samples)
    return float(np.mean([reward(r.text, problem) for r in responses]))


def histogram(rates: Iterable[float]) -> dict[str, int]:
    counts = dict.fromkeys(HISTOGRAM_BUCKETS, 0)
    for r in rates:
        if r <= 0:
            counts["0"] += 1
        elif r >= 1:
            counts["1"] += 1
        else:
            counts[HISTOGRAM_BUCKETS[1 + min(int(np.ceil(r * 4)) - 1, 3)]] += 1
    return counts


def difficulty_filter(problems: Sequence[Problem], rates: Sequence[float],
                      keep_range: tuple[float, float] = (0.0, 1.0)) -> list[Problem]:
    if len(problems) != len(rates):
        raise ValueError("every problem needs a pass rate")
    lo, hi = keep_range
    return [p for p, r in zip(problems, rates) if lo < r < hi]


def curate(problems: Iterable[Problem], eval_set: Iterable[Problem] = (), params: PolicyParams | None = None,
           n_samples: int = 32, seed: int = 0, max_len: int = 16, keep_range=(0.0, 1.0),
           shingle_n: int = 8, threshold: float = 0.8,
           subquestion_patterns: Sequence[str] = DEFAULT_SUBQUESTION_PATTERNS,
           semantic_hook: SemanticHook | None = None) -> tuple[list[Problem], CurationReport]:
    """cleanse -> dedupe -> (pass rate -> difficulty filter, if a policy is given)."""
    kept, report = cleanse(problems, subquestion_patterns)
    kept, rep = dedupe(kept, eval_set, shingle_n, threshold, semantic_hook)
    report = report.merged(rep)
    if params is None:
        report.notes.append("pass-rate stage skipped: no checkpoint given")
    else:
        rates = [pass_rate(p, params, n_samples, seed, max_len) for p in kept]
        kept = [replace(p, difficulty=1.0 - r, meta={**p.meta, "pass_rate": r}) for p, r in zip(kept, rates)]
        stage = CurationReport(len(kept), pass_rate_histogram=histogram(rates))
        lo, hi = keep_range
        stage.remove("all_correct", sum(r >= hi for r in rates))
        stage.remove("unsolvable", sum(r <= lo for r in rates))
        kept = difficulty_filter(kept, rates, keep_range)
        stage.retained_count = len(kept)
        report = report.merged(stage)
    report.retained_count = len(kept)
    report.check()
    return kept, report


def write_report(path_stem, report: CurationReport) -> None:
    with open(f"{path_stem}.json", "w", encoding="utf-8") as fh:
        json.dump(report.to_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(f"{path_stem}.txt", "w", encoding="utf-8") as fh:
        fh.write(report.to_text())
