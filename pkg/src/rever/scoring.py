"""Batch scoring of model responses and aggregation into evaluation reports."""

from __future__ import annotations

import json
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .datagen import MalformedRecord, Triplet, read_dataset
from .grammar import Ontology, PlanParseError, SkillGrammar, parse_plan
from .reward import DEFAULT_WEIGHTS, RewardBreakdown, RewardWeights, total_reward


class MissingPrediction(KeyError):
    pass


class UnknownId(KeyError):
    pass


def sig(x: float | None, digits: int = 9) -> float | None:
    """Round to ``digits`` significant digits for stable serialized output."""
    if x is None or x == 0 or not math.isfinite(x):
        return x
    return float(f"{x:.{digits - 1}e}")


def breakdown_record(b: RewardBreakdown) -> dict:
    rec = {"format": b.format, "content": sig(b.content), "total": sig(b.total)}
    if b.bm is not None:
        rec["bm"] = sig(b.bm)
        rec["length_penalty"] = sig(b.length_penalty)
        rec["matching"] = [[i, j, sig(w)] for i, j, w in b.matching.pairs]
    if b.diagnostics:
        rec["diagnostics"] = list(b.diagnostics)
    return rec


def wrap_answer(plan_text: str) -> str:
    """A well-formed response around a bare answer, for predictions given as plans."""
    return f"<think></think><answer>{plan_text}</answer>"


@dataclass(frozen=True)
class ScoreRecord:
    id: str
    task_type: str
    response: str
    y: str
    tag: str = "default"


_ALIASES = {"response_text": "response", "ground_truth": "y"}


def parse_score_record(rec: object, line_no: int) -> ScoreRecord:
    """One batch-scoring line: ``{id, task_type, response_text, ground_truth, tag}``.

    ``response`` and ``y`` are accepted as short spellings of the two text fields.
    """
    if not isinstance(rec, dict):
        raise MalformedRecord(line_no, "record is not an object")
    rec = {_ALIASES.get(k, k): v for k, v in rec.items()}
    for key, shown in (("task_type", "task_type"), ("response", "response_text"), ("y", "ground_truth")):
        if key not in rec:
            raise MalformedRecord(line_no, f"missing field {shown}")
    if rec["task_type"] not in ("plan", "completion"):
        raise MalformedRecord(line_no, f"unknown task_type {rec['task_type']!r}")
    if not isinstance(rec["response"], str) or not isinstance(rec["y"], str):
        raise MalformedRecord(line_no, "response_text and ground_truth must be strings")
    if rec["task_type"] == "completion" and rec["y"] not in ("True", "False"):
        raise MalformedRecord(line_no, "completion ground_truth must be 'True' or 'False'")
    return ScoreRecord(str(rec.get("id", line_no)), rec["task_type"], rec["response"], rec["y"], str(rec.get("tag", "default")))


def read_score_records(path: str | Path) -> list[ScoreRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedRecord(line_no, f"invalid JSON: {exc.msg}") from exc
            out.append(parse_score_record(rec, line_no))
    return out


def score_one(
    rec: ScoreRecord, grammar: SkillGrammar, ontology: Ontology | None, weights: RewardWeights, line_no: int = 0
) -> RewardBreakdown:
    if rec.task_type == "completion":
        target = rec.y == "True"
    else:
        try:
            target = parse_plan(rec.y, grammar)
        except PlanParseError as exc:
            raise MalformedRecord(line_no, f"ground-truth plan does not parse: {exc}") from exc
        if len(target) == 0:
            raise MalformedRecord(line_no, "ground-truth plan is empty")
    return total_reward(rec.response, target, grammar, ontology, weights)


def score_records(
    records: Sequence[ScoreRecord],
    grammar: SkillGrammar,
    ontology: Ontology | None = None,
    weights: RewardWeights = DEFAULT_WEIGHTS,
) -> list[RewardBreakdown]:
    return [score_one(r, grammar, ontology, weights, n) for n, r in enumerate(records, 1)]


def cmd_score(
    input_path: str | Path,
    output_path: str | Path,
    grammar: SkillGrammar,
    ontology: Ontology | None = None,
    weights: RewardWeights = DEFAULT_WEIGHTS,
) -> list[RewardBreakdown]:
    records = read_score_records(input_path)
    breakdowns = score_records(records, grammar, ontology, weights)
    with open(output_path, "w", encoding="utf-8") as fh:
        for r, b in zip(records, breakdowns):
            fh.write(json.dumps({"id": r.id, "tag": r.tag, **breakdown_record(b)}) + "\n")
    return breakdowns


# -- evaluation --------------------------------------------------------------


@dataclass
class TagSummary:
    count: int
    mean_bm: float
    mean_content: float
    mean_total: float
    format_pass_rate: float


@dataclass
class EvalReport:
    ids: list[str]
    tags: list[str]
    breakdowns: list[RewardBreakdown]
    by_tag: dict[str, TagSummary] = field(default_factory=dict)
    overall: TagSummary | None = None

    @staticmethod
    def _summarize(items: Sequence[RewardBreakdown]) -> TagSummary:
        n = len(items)
        if n == 0:
            return TagSummary(0, 0.0, 0.0, 0.0, 0.0)
        return TagSummary(
            count=n,
            mean_bm=math.fsum(b.bm or 0.0 for b in items) / n,
            mean_content=math.fsum(b.content for b in items) / n,
            mean_total=math.fsum(b.total for b in items) / n,
            format_pass_rate=sum(b.format for b in items) / n,
        )

    @classmethod
    def build(cls, ids: list[str], tags: list[str], breakdowns: list[RewardBreakdown]) -> "EvalReport":
        grouped: OrderedDict[str, list[RewardBreakdown]] = OrderedDict()
        for t, b in zip(tags, breakdowns):
            grouped.setdefault(t, []).append(b)
        return cls(
            ids=ids,
            tags=tags,
            breakdowns=breakdowns,
            by_tag={t: cls._summarize(v) for t, v in sorted(grouped.items())},
            overall=cls._summarize(breakdowns),
        )

    def to_dict(self) -> dict:
        def s(t: TagSummary) -> dict:
            return {
                "count": t.count,
                "mean_bm": sig(t.mean_bm),
                "mean_content": sig(t.mean_content),
                "mean_total": sig(t.mean_total),
                "format_pass_rate": sig(t.format_pass_rate),
            }

        return {
            "overall": s(self.overall),
            "by_tag": {k: s(v) for k, v in self.by_tag.items()},
            "records": [{"id": i, "tag": t, **breakdown_record(b)} for i, t, b in zip(self.ids, self.tags, self.breakdowns)],
        }


def read_predictions(path: str | Path) -> "OrderedDict[str, str]":
    """Predictions: one ``{"task_id", "response"}`` or ``{"task_id", "plan"}`` per line."""
    preds: OrderedDict[str, str] = OrderedDict()
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedRecord(line_no, f"invalid JSON: {exc.msg}") from exc
            if not isinstance(rec, dict) or "task_id" not in rec:
                raise MalformedRecord(line_no, "missing field task_id")
            if "response" in rec:
                preds[str(rec["task_id"])] = rec["response"]
            elif "plan" in rec:
                preds[str(rec["task_id"])] = wrap_answer(rec["plan"])
            else:
                raise MalformedRecord(line_no, "prediction needs a response or plan field")
    return preds


def evaluate(
    predictions: "dict[str, str]",
    triplets: Iterable[Triplet],
    grammar: SkillGrammar,
    ontology: Ontology | None = None,
    weights: RewardWeights = DEFAULT_WEIGHTS,
    tag_of=lambda t: t.grammar_ref,
) -> EvalReport:
    """Score planning predictions against the dataset's planning labels."""
    truth = OrderedDict((t.task_id, t) for t in triplets if t.task_type == "plan")
    for pid in predictions:
        if pid not in truth:
            raise UnknownId(pid)
    ids, tags, breakdowns = [], [], []
    for tid, t in truth.items():
        if tid not in predictions:
            raise MissingPrediction(tid)
        ids.append(tid)
        tags.append(tag_of(t))
        breakdowns.append(total_reward(predictions[tid], parse_plan(t.y, grammar), grammar, ontology, weights))
    return EvalReport.build(ids, tags, breakdowns)


def cmd_eval(
    predictions_path: str | Path,
    dataset_path: str | Path,
    grammar: SkillGrammar,
    ontology: Ontology | None = None,
    weights: RewardWeights = DEFAULT_WEIGHTS,
) -> EvalReport:
    return evaluate(read_predictions(predictions_path), read_dataset(dataset_path), grammar, ontology, weights)
