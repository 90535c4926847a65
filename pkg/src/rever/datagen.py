"""Compose multi-step tasks from a skill-demo library and emit training triplets."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .grammar import Ontology, PlanStep, SkillGrammar, _read_data, parse_step, render_plan, render_prompt
from .reward import DEFAULT_WEIGHTS, RewardWeights, step_similarity


class InfeasibleComposition(ValueError):
    pass


class MalformedRecord(ValueError):
    def __init__(self, line_no: int, reason: str):
        self.line_no = line_no
        super().__init__(f"line {line_no}: {reason}")


@dataclass(frozen=True)
class SkillDemo:
    demo_id: str
    step: PlanStep
    init_ref: str
    mid_ref: str
    final_ref: str

    def __post_init__(self) -> None:
        refs = (self.init_ref, self.mid_ref, self.final_ref)
        if not all(refs) or len(set(refs)) != 3:
            raise ValueError(f"demo {self.demo_id}: keyframe references must be present and distinct")


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    instruction: str
    sequence: tuple[SkillDemo, ...]

    def __post_init__(self) -> None:
        if not self.sequence:
            raise ValueError("a task needs at least one skill")

    @property
    def K(self) -> int:
        return len(self.sequence)

    @property
    def steps(self) -> tuple[PlanStep, ...]:
        return tuple(d.step for d in self.sequence)


@dataclass(frozen=True)
class Triplet:
    task_id: str
    task_type: str  # "plan" | "completion"
    q: str
    observations: tuple[str, ...]
    y: str | bool
    grammar_ref: str = "default"

    def __post_init__(self) -> None:
        if self.task_type == "plan":
            if len(self.observations) != 1 or not isinstance(self.y, str):
                raise ValueError("planning triplets carry one observation and a plan label")
        elif self.task_type == "completion":
            if len(self.observations) != 2 or not isinstance(self.y, bool):
                raise ValueError("completion triplets carry two observations and a True/False label")
        else:
            raise ValueError(f"unknown task_type {self.task_type!r}")


# -- library -----------------------------------------------------------------


def build_library(
    grammar: SkillGrammar,
    objects: Sequence[str],
    locations: Sequence[str],
    demos_per_skill: int = 1,
) -> list[SkillDemo]:
    """Synthetic demo library: every template instantiated over the pools."""
    pools = {"object": list(objects), "location": list(locations)}
    demos = []
    for template in grammar:
        combos = [()]
        for slot in template.slots:
            combos = [c + (v,) for c in combos for v in pools[slot]]
        for args in combos:
            for _ in range(demos_per_skill):
                demo_id = f"demo-{len(demos):05d}"
                demos.append(
                    SkillDemo(
                        demo_id=demo_id,
                        step=PlanStep(template, args),
                        init_ref=f"{demo_id}/init.jpg",
                        mid_ref=f"{demo_id}/mid.jpg",
                        final_ref=f"{demo_id}/final.jpg",
                    )
                )
    return demos


def distinct_library(
    demos: Sequence[SkillDemo], ontology: Ontology | None = None, weights: RewardWeights = DEFAULT_WEIGHTS
) -> list[SkillDemo]:
    """Drop every demo whose step the reward cannot tell apart from an earlier one.

    "Put apple on basket" and "Put apple into basket" share verb and arguments,
    so they score as identical steps; a task set drawn from such a library has
    ground truths that no learner could single out.
    """
    kept: list[SkillDemo] = []
    for d in demos:
        if all(step_similarity(d.step, k.step, ontology, weights) < 1.0 for k in kept):
            kept.append(d)
    return kept


def load_library(path: str | Path, grammar: SkillGrammar) -> list[SkillDemo]:
    demos = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                demos.append(
                    SkillDemo(
                        demo_id=rec["demo_id"],
                        step=parse_step(rec["step"], grammar),
                        init_ref=rec["init_ref"],
                        mid_ref=rec["mid_ref"],
                        final_ref=rec["final_ref"],
                    )
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise MalformedRecord(line_no, str(exc)) from exc
    return demos


def write_library(demos: Iterable[SkillDemo], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in demos:
            rec = {
                "demo_id": d.demo_id,
                "step": d.step.render(),
                "init_ref": d.init_ref,
                "mid_ref": d.mid_ref,
                "final_ref": d.final_ref,
            }
            fh.write(json.dumps(rec) + "\n")


# -- composition -------------------------------------------------------------


@dataclass(frozen=True)
class HandRule:
    requires: str  # empty | holding | any
    effect: str  # hold | release | keep


class ConstraintTable:
    """Which skills may follow which, tracked through the object in hand."""

    def __init__(self, rules: dict[str, HandRule]):
        for pattern, rule in rules.items():
            if rule.requires not in ("empty", "holding", "any") or rule.effect not in ("hold", "release", "keep"):
                raise ValueError(f"bad rule for {pattern!r}: {rule}")
        self.rules = dict(rules)

    @classmethod
    def from_json(cls, text: str) -> "ConstraintTable":
        data = json.loads(text)
        return cls({k: HandRule(**v) for k, v in data.items() if not k.startswith("_")})

    @classmethod
    def load(cls, path: str | Path) -> "ConstraintTable":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))

    @classmethod
    def default(cls) -> "ConstraintTable":
        return cls.from_json(_read_data("constraints.json"))

    def advance(self, held: str | None, step: PlanStep) -> tuple[bool, str | None]:
        """Return ``(allowed, held_after)`` for executing ``step`` with ``held`` in hand."""
        rule = self.rules.get(step.template.surface_pattern, HandRule("any", "keep"))
        obj = step.slot_args.get("object")
        if rule.requires == "empty" and held is not None:
            return False, held
        if rule.requires == "holding":
            if held is None or (obj is not None and obj != held):
                return False, held
        if rule.effect == "hold":
            return True, obj
        if rule.effect == "release":
            return True, None
        return True, held


class InstructionPool:
    """Maps a step sequence to an abstract instruction via ordered rules."""

    def __init__(self, rules: Sequence[dict]):
        if not rules or not any(set(r) == {"templates"} for r in rules):
            raise ValueError("instruction pool needs an unconditional fallback rule")
        self.rules = list(rules)

    @classmethod
    def from_json(cls, text: str) -> "InstructionPool":
        return cls(json.loads(text)["rules"])

    @classmethod
    def load(cls, path: str | Path) -> "InstructionPool":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))

    @classmethod
    def default(cls) -> "InstructionPool":
        return cls.from_json(_read_data("instructions.json"))

    def _applies(self, rule: dict, steps: Sequence[PlanStep], ontology: Ontology | None) -> bool:
        verbs = {s.verb for s in steps}
        if "verbs_any" in rule and not verbs & set(rule["verbs_any"]):
            return False
        if "verbs_all" in rule and not verbs <= set(rule["verbs_all"]):
            return False
        if "objects_in_set" in rule:
            objects = [s.slot_args["object"] for s in steps if "object" in s.slot_args]
            if ontology is None or not objects:
                return False
            if not all(rule["objects_in_set"] in ontology.sets_of(o) for o in objects):
                return False
        return True

    def pick(self, steps: Sequence[PlanStep], rng: np.random.Generator, ontology: Ontology | None = None) -> str:
        rule = next(r for r in self.rules if self._applies(r, steps, ontology))
        template = rule["templates"][int(rng.integers(len(rule["templates"])))]
        objects = [s.slot_args["object"] for s in steps if "object" in s.slot_args]
        locations = [s.slot_args["location"] for s in steps if "location" in s.slot_args]
        return template.format(
            object=objects[0] if objects else "items",
            location=locations[-1] if locations else "container",
        )


def compose_task(
    library: Sequence[SkillDemo],
    K: int,
    instructions: InstructionPool,
    rng: np.random.Generator,
    constraints: ConstraintTable | None = None,
    ontology: Ontology | None = None,
    task_id: str = "task-000000",
) -> TaskSpec:
    """Draw K distinct demos forming a feasible sequence under the hand-state rules.

    Candidates are tried in a seeded random order with backtracking, so the
    result is deterministic for a given generator state.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    constraints = constraints or ConstraintTable.default()
    chosen: list[int] = []

    def search(held: str | None) -> bool:
        if len(chosen) == K:
            return True
        for i in rng.permutation(len(library)):
            i = int(i)
            if i in chosen:
                continue
            ok, after = constraints.advance(held, library[i].step)
            if not ok:
                continue
            chosen.append(i)
            if search(after):
                return True
            chosen.pop()
        return False

    if len(library) < K or not search(None):
        raise InfeasibleComposition(f"no feasible sequence of {K} skills in a library of {len(library)}")
    sequence = tuple(library[i] for i in chosen)
    instruction = instructions.pick([d.step for d in sequence], rng, ontology)
    return TaskSpec(task_id=task_id, instruction=instruction, sequence=sequence)


def synthesize(
    library: Sequence[SkillDemo],
    count: int,
    kmin: int,
    kmax: int,
    seed: int,
    instructions: InstructionPool | None = None,
    constraints: ConstraintTable | None = None,
    ontology: Ontology | None = None,
) -> list[TaskSpec]:
    """Each task draws from its own generator keyed by (seed, index)."""
    if not 1 <= kmin <= kmax:
        raise ValueError("need 1 <= kmin <= kmax")
    instructions = instructions or InstructionPool.default()
    constraints = constraints or ConstraintTable.default()
    tasks = []
    for index in range(count):
        rng = np.random.default_rng([seed, index])
        K = int(rng.integers(kmin, kmax + 1))
        tasks.append(
            compose_task(library, K, instructions, rng, constraints, ontology, task_id=f"task-{seed}-{index:06d}")
        )
    return tasks


# -- triplets ----------------------------------------------------------------


def make_triplets(
    task: TaskSpec, grammar: SkillGrammar, grammar_ref: str = "default", negatives_per_subtask: int = 1
) -> list[Triplet]:
    """One planning triplet plus positive/negative completion triplets per sub-task."""
    if negatives_per_subtask not in (0, 1):
        raise ValueError("each demo carries one mid-execution frame, so at most one negative per sub-task")
    out = [
        Triplet(
            task_id=task.task_id,
            task_type="plan",
            q=render_prompt("planning", grammar, task.instruction),
            observations=(task.sequence[0].init_ref,),
            y=render_plan(task.steps),
            grammar_ref=grammar_ref,
        )
    ]
    for demo in task.sequence:
        q = render_prompt("completion", None, demo.step.render())
        out.append(Triplet(task.task_id, "completion", q, (demo.init_ref, demo.final_ref), True, grammar_ref))
        if negatives_per_subtask:
            out.append(Triplet(task.task_id, "completion", q, (demo.init_ref, demo.mid_ref), False, grammar_ref))
    return out


_FIELDS = ("task_id", "task_type", "q", "observations", "y", "grammar_ref")


def triplet_record(t: Triplet) -> dict:
    y = t.y if isinstance(t.y, str) else ("True" if t.y else "False")
    return {"task_id": t.task_id, "task_type": t.task_type, "q": t.q, "observations": list(t.observations), "y": y, "grammar_ref": t.grammar_ref}


def parse_triplet_record(rec: object, line_no: int) -> Triplet:
    if not isinstance(rec, dict):
        raise MalformedRecord(line_no, "record is not an object")
    missing = [f for f in _FIELDS if f not in rec]
    if missing:
        raise MalformedRecord(line_no, f"missing field(s) {', '.join(missing)}")
    y = rec["y"]
    if rec["task_type"] == "completion":
        if y not in ("True", "False"):
            raise MalformedRecord(line_no, f"completion label must be 'True' or 'False', got {y!r}")
        y = y == "True"
    elif not isinstance(y, str):
        raise MalformedRecord(line_no, "plan label must be a string")
    obs = rec["observations"]
    if not isinstance(obs, list) or not all(isinstance(o, str) for o in obs):
        raise MalformedRecord(line_no, "observations must be a list of strings")
    try:
        return Triplet(str(rec["task_id"]), rec["task_type"], rec["q"], tuple(obs), y, rec["grammar_ref"])
    except ValueError as exc:
        raise MalformedRecord(line_no, str(exc)) from exc


def write_dataset(triplets: Iterable[Triplet], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in triplets:
            fh.write(json.dumps(triplet_record(t), ensure_ascii=False) + "\n")


def read_dataset(path: str | Path) -> list[Triplet]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedRecord(line_no, f"invalid JSON: {exc.msg}") from exc
            out.append(parse_triplet_record(rec, line_no))
    return out


def _rank(task_id: str) -> str:
    return hashlib.sha256(task_id.encode("utf-8")).hexdigest()


def split_task_ids(task_ids: Iterable[str], test_fraction: float = 0.1) -> tuple[list[str], list[str]]:
    """Split by task (never by triplet): the lowest-hash ``test_fraction`` of ids go to test."""
    ids = sorted(set(task_ids), key=lambda t: (_rank(t), t))
    n_test = round(len(ids) * test_fraction)
    test = set(ids[:n_test])
    train_ids = sorted(i for i in ids if i not in test)
    return train_ids, sorted(test)


def split_dataset(triplets: Sequence[Triplet], test_fraction: float = 0.1) -> tuple[list[Triplet], list[Triplet]]:
    _, test_ids = split_task_ids((t.task_id for t in triplets), test_fraction)
    test = set(test_ids)
    return [t for t in triplets if t.task_id not in test], [t for t in triplets if t.task_id in test]
