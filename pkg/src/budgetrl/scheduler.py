"""Token-budgeted response selection and the sample-level filtering baseline."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .policy import Response
from .rewards import Problem


@dataclass
class Batch:
    """All rollouts of one step: ``groups[l]`` holds the K responses to
    ``problems[l]``."""

    problems: list[Problem]
    groups: list[list[Response]]
    behavior_params_version: int = 0

    def __post_init__(self):
        if len(self.problems) != len(self.groups):
            raise ValueError("one group per problem is required")
        sizes = {len(g) for g in self.groups}
        if len(sizes) > 1:
            raise ValueError(f"every group must have the same size, got {sorted(sizes)}")

    @property
    def prompt_count(self) -> int:
        return len(self.groups)

    @property
    def group_size(self) -> int:
        return len(self.groups[0]) if self.groups else 0

    @property
    def total_tokens(self) -> int:
        return sum(r.length for g in self.groups for r in g)

    def refs(self) -> list[tuple[int, int]]:
        return [(l, i) for l, g in enumerate(self.groups) for i in range(len(g))]

    def response(self, ref: tuple[int, int]) -> Response:
        return self.groups[ref[0]][ref[1]]


@dataclass(frozen=True)
class Selection:
    ref: tuple[int, int]
    included: int
    length: int


@dataclass
class SelectedSet:
    entries: list[Selection] = field(default_factory=list)
    budget: int = 0
    underbudget: bool = False

    @property
    def total_tokens(self) -> int:
        return sum(e.included for e in self.entries)


def select_budget(batch: Batch, budget: int, order: str = "seeded_shuffle", seed: int = 0) -> SelectedSet:
    """Greedily take whole responses until the running token count reaches
    ``budget``; the response that crosses it is cut at its tail."""
    if budget < 1:
        raise ValueError("token budget must be >= 1")
    refs = batch.refs()
    if not refs:
        raise ValueError("cannot select from an empty batch")
    if order == "seeded_shuffle":
        perm = np.random.default_rng(seed).permutation(len(refs))
        refs = [refs[i] for i in perm]
    elif order != "natural":
        raise ValueError(f"unknown selection order {order!r}")
    entries = []
    total = 0
    for ref in refs:
        length = batch.response(ref).length
        if length == 0:
            continue
        take = min(length, budget - total)
        entries.append(Selection(ref, take, length))
        total += take
        if total == budget:
            return SelectedSet(entries, budget, underbudget=False)
    return SelectedSet(entries, budget, underbudget=True)


def dynamic_sampling_filter(batch: Batch) -> Batch:
    """Drop groups whose rewards are all equal."""
    keep = [l for l, g in enumerate(batch.groups) if len({r.reward for r in g}) > 1]
    return Batch([batch.problems[l] for l in keep], [batch.groups[l] for l in keep],
                 batch.behavior_params_version)


def budget_report(selected: SelectedSet) -> dict:
    discarded = sum(e.length - e.included for e in selected.entries)
    return {
        "total_tokens": selected.total_tokens,
        "responses_used": len(selected.entries),
        "truncated_tokens_discarded": discarded,
        "underbudget": selected.underbudget,
    }
