import json

import numpy as np
import pytest

from rever.datagen import (
    ConstraintTable,
    InfeasibleComposition,
    InstructionPool,
    MalformedRecord,
    SkillDemo,
    TaskSpec,
    Triplet,
    build_library,
    compose_task,
    distinct_library,
    load_library,
    make_triplets,
    read_dataset,
    split_dataset,
    split_task_ids,
    synthesize,
    write_dataset,
    write_library,
)
from rever.grammar import parse_plan, parse_step


def demo(grammar, text, n=0):
    return SkillDemo(f"d{n}", parse_step(text, grammar), f"d{n}/i", f"d{n}/m", f"d{n}/f")


@pytest.fixture(scope="module")
def library(grammar):
    return build_library(grammar, ["apple", "pen", "cup"], ["basket", "tray"])


def test_demo_keyframes_distinct(grammar):
    with pytest.raises(ValueError):
        SkillDemo("x", parse_step("Open box.", grammar), "a", "a", "b")


def test_compose_single(grammar):
    lib = [demo(grammar, "Open box.")]
    t = compose_task(lib, 1, InstructionPool.default(), np.random.default_rng(0))
    assert t.K == 1 and t.sequence == tuple(lib)


def test_compose_pick_then_place(grammar):
    lib = [demo(grammar, "Pick up apple.", 0), demo(grammar, "Place into basket.", 1)]
    t = compose_task(lib, 2, InstructionPool.default(), np.random.default_rng(0))
    assert [d.step.render() for d in t.sequence] == ["Pick up apple.", "Place into basket."]


def test_compose_infeasible(grammar):
    lib = [demo(grammar, "Open box.", 0), demo(grammar, "Pour into cup.", 1)]
    with pytest.raises(InfeasibleComposition):
        compose_task(lib, 2, InstructionPool.default(), np.random.default_rng(0))


def test_constraints_track_held_object(grammar):
    c = ConstraintTable.default()
    ok, held = c.advance(None, parse_step("Pick up apple.", grammar))
    assert ok and held == "apple"
    assert c.advance(held, parse_step("Pick up pen.", grammar))[0] is False
    ok, held = c.advance(held, parse_step("Place on tray.", grammar))
    assert ok and held is None


def test_compose_deterministic(library, ontology):
    a = synthesize(library, 10, 2, 4, seed=3, ontology=ontology)
    b = synthesize(library, 10, 2, 4, seed=3, ontology=ontology)
    assert a == b
    assert all(2 <= t.K <= 4 for t in a)


def test_instruction_pool_rules(grammar, ontology):
    pool = InstructionPool.default()
    steps = [parse_step("Put apple into basket.", grammar), parse_step("Put banana into basket.", grammar)]
    text = pool.pick(steps, np.random.default_rng(0), ontology)
    assert "fruit" in text
    with pytest.raises(ValueError):
        InstructionPool([{"verbs_any": ["Open"], "templates": ["x"]}])


def test_make_triplets(library, grammar):
    task = synthesize(library, 1, 3, 3, seed=0)[0]
    trips = make_triplets(task, grammar)
    assert len(trips) == 7
    plan = trips[0]
    assert plan.task_type == "plan" and plan.observations == (task.sequence[0].init_ref,)
    assert parse_plan(plan.y, grammar).steps == task.steps
    pos = [t for t in trips if t.y is True]
    neg = [t for t in trips if t.y is False]
    assert [t.observations for t in pos] == [(d.init_ref, d.final_ref) for d in task.sequence]
    assert [t.observations for t in neg] == [(d.init_ref, d.mid_ref) for d in task.sequence]
    assert "Output ONLY" in pos[0].q


def test_k1_roundtrip(grammar):
    task = TaskSpec("t", "Open it", (demo(grammar, "Open box."),))
    y = make_triplets(task, grammar)[0].y
    assert parse_plan(y, grammar).steps == task.steps


def test_dataset_roundtrip(tmp_path, library, grammar):
    trips = [t for task in synthesize(library, 20, 1, 4, seed=1) for t in make_triplets(task, grammar)]
    path = tmp_path / "d.jsonl"
    write_dataset(trips, path)
    assert read_dataset(path) == trips
    first = json.loads(path.read_text(encoding="utf-8").splitlines()[0])
    assert list(first) == ["task_id", "task_type", "q", "observations", "y", "grammar_ref"]


def test_malformed_records(tmp_path):
    path = tmp_path / "bad.jsonl"
    good = {"task_id": "a", "task_type": "completion", "q": "q", "observations": ["x", "y"], "y": "True", "grammar_ref": "g"}
    bad = dict(good)
    del bad["y"]
    path.write_text(json.dumps(good) + "\n" + json.dumps(bad) + "\n", encoding="utf-8")
    with pytest.raises(MalformedRecord) as info:
        read_dataset(path)
    assert info.value.line_no == 2
    path.write_text(json.dumps({**good, "observations": ["x"]}) + "\n", encoding="utf-8")
    with pytest.raises(MalformedRecord):
        read_dataset(path)
    path.write_text("{not json\n", encoding="utf-8")
    with pytest.raises(MalformedRecord):
        read_dataset(path)


def test_split_12000():
    ids = [f"task-{i:06d}" for i in range(12000)]
    train, test = split_task_ids(ids)
    assert (len(train), len(test)) == (10800, 1200)
    assert not set(train) & set(test)
    assert set(train) | set(test) == set(ids)


def test_split_by_task_not_triplet(library, grammar):
    trips = [t for task in synthesize(library, 50, 1, 3, seed=2) for t in make_triplets(task, grammar)]
    train, test = split_dataset(trips)
    assert not {t.task_id for t in train} & {t.task_id for t in test}
    assert len(train) + len(test) == len(trips)


def test_library_file_roundtrip(tmp_path, library, grammar):
    path = tmp_path / "lib.jsonl"
    write_library(library, path)
    assert load_library(path, grammar) == library


def test_distinct_library(library, ontology):
    kept = distinct_library(library, ontology)
    renders = {d.step.render() for d in kept}
    assert "Put apple on basket." in renders and "Put apple into basket." not in renders
    assert len(kept) < len(library)


def test_triplet_invariants():
    with pytest.raises(ValueError):
        Triplet("t", "plan", "q", ("a", "b"), "1. Open box.")
    with pytest.raises(ValueError):
        Triplet("t", "completion", "q", ("a", "b"), "True")
