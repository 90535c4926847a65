"""Verifiable plan reward: format check, step similarity, matching, length penalty."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Union

from .grammar import (
    FormatError,
    Ontology,
    Plan,
    PlanParseError,
    PlanStep,
    SkillGrammar,
    extract_answer,
    parse_plan,
    parse_response,
)
from .matching import Matching, max_weight_matching, ordered_matching


class EmptyGroundTruth(ValueError):
    pass


@dataclass(frozen=True)
class RewardWeights:
    format: float = 0.1
    content: float = 0.9
    action: float = 0.3
    object: float = 0.7
    length: float = 0.1

    def __post_init__(self) -> None:
        for name in ("format", "content", "action", "object", "length"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ValueError(f"weight {name} must be finite and >= 0, got {value}")
        if not math.isclose(self.action + self.object, 1.0, rel_tol=0, abs_tol=1e-12):
            raise ValueError("action and object weights must sum to 1")

    @property
    def max_total(self) -> float:
        return self.format + self.content

    @classmethod
    def from_dict(cls, data: dict) -> "RewardWeights":
        aliases = {"w_f": "format", "w_c": "content", "w_a": "action", "w_o": "object", "w_l": "length"}
        return cls(**{aliases.get(k, k): float(v) for k, v in data.items()})

    def to_dict(self) -> dict[str, float]:
        return {"w_f": self.format, "w_c": self.content, "w_a": self.action, "w_o": self.object, "w_l": self.length}


DEFAULT_WEIGHTS = RewardWeights()


@dataclass(frozen=True)
class RewardBreakdown:
    format: int
    content: float
    total: float
    bm: float | None = None
    length_penalty: float | None = None
    matching: Matching | None = None
    diagnostics: tuple[str, ...] = field(default=())


def format_reward(text: str) -> int:
    try:
        parse_response(text)
    except FormatError:
        return 0
    return 1


def _similar_args(a: str, b: str, ontology: Ontology | None) -> bool:
    x, y = a.strip().casefold(), b.strip().casefold()
    if x == y or x in y or y in x:
        return True
    return ontology is not None and ontology.share_set(x, y)


def object_similarity(p: PlanStep, q: PlanStep, ontology: Ontology | None = None) -> float:
    """Positional slot agreement, averaged over the larger slot count."""
    width = max(len(p.args), len(q.args))
    if width == 0:
        return 1.0
    hits = sum(1 for a, b in zip(p.args, q.args) if _similar_args(a, b, ontology))
    return hits / width


def step_similarity(
    p: PlanStep, q: PlanStep, ontology: Ontology | None = None, weights: RewardWeights = DEFAULT_WEIGHTS
) -> float:
    action = 1.0 if p.verb == q.verb else 0.0
    return weights.action * action + weights.object * object_similarity(p, q, ontology)


def similarity_matrix(
    generated: Plan, truth: Plan, ontology: Ontology | None = None, weights: RewardWeights = DEFAULT_WEIGHTS
) -> list[list[float]]:
    return [[step_similarity(p, q, ontology, weights) for q in truth] for p in generated]


def bipartite_match_score(
    generated: Plan,
    truth: Plan,
    ontology: Ontology | None = None,
    weights: RewardWeights = DEFAULT_WEIGHTS,
    *,
    ordered: bool = False,
) -> tuple[float, Matching]:
    """Matched similarity normalized by the longer plan's length."""
    if len(truth) == 0:
        raise EmptyGroundTruth("ground-truth plan is empty")
    if len(generated) == 0:
        return 0.0, Matching()
    sims = similarity_matrix(generated, truth, ontology, weights)
    matching = ordered_matching(sims) if ordered else max_weight_matching(sims)
    return matching.total_weight / max(len(generated), len(truth)), matching


def length_penalty(generated: Plan, truth: Plan, weights: RewardWeights = DEFAULT_WEIGHTS) -> float:
    return weights.length * abs(len(generated) - len(truth))


def content_reward(
    generated: Plan,
    truth: Plan,
    ontology: Ontology | None = None,
    weights: RewardWeights = DEFAULT_WEIGHTS,
    *,
    ordered: bool = False,
) -> float:
    bm, _ = bipartite_match_score(generated, truth, ontology, weights, ordered=ordered)
    return bm - length_penalty(generated, truth, weights)


def completion_reward(pred: str, label: bool) -> int:
    # Case-sensitive: the prompt asks for exactly "True" or "False".
    return int(pred.strip() == ("True" if label else "False"))


Target = Union[Plan, bool]


def total_reward(
    text: str,
    target: Target,
    grammar: SkillGrammar,
    ontology: Ontology | None = None,
    weights: RewardWeights = DEFAULT_WEIGHTS,
    *,
    ordered: bool = False,
) -> RewardBreakdown:
    """Score one raw response against a plan or a completion label.

    Never raises on bad model output: parse failures fold into a zero content
    score with a diagnostic, so every rollout gets a reward.
    """
    notes: list[str] = []
    try:
        answer = parse_response(text).answer
        fmt = 1
    except FormatError as exc:
        fmt = 0
        notes.append(f"format: {exc.kind}: {exc}")
        answer = extract_answer(text)

    if isinstance(target, bool):
        if answer is None:
            notes.append("content: no <answer> block")
            content = 0.0
        else:
            content = float(completion_reward(answer, target))
        return RewardBreakdown(
            format=fmt,
            content=content,
            total=weights.format * fmt + weights.content * content,
            diagnostics=tuple(notes),
        )

    if len(target) == 0:
        raise EmptyGroundTruth("ground-truth plan is empty")
    if answer is None:
        notes.append("content: no <answer> block")
        return RewardBreakdown(format=fmt, content=0.0, total=weights.format * fmt, diagnostics=tuple(notes))
    try:
        plan = parse_plan(answer, grammar)
    except PlanParseError as exc:
        notes.extend(f"plan: {e}" for e in exc.errors)
        return RewardBreakdown(format=fmt, content=0.0, total=weights.format * fmt, diagnostics=tuple(notes))
    bm, matching = bipartite_match_score(plan, target, ontology, weights, ordered=ordered)
    penalty = length_penalty(plan, target, weights)
    content = bm - penalty
    return RewardBreakdown(
        format=fmt,
        content=content,
        total=weights.format * fmt + weights.content * content,
        bm=bm,
        length_penalty=penalty,
        matching=matching,
        diagnostics=tuple(notes),
    )
