import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rever.grammar import Plan, parse_plan, render_plan
from rever.reward import (
    DEFAULT_WEIGHTS,
    EmptyGroundTruth,
    RewardWeights,
    bipartite_match_score,
    completion_reward,
    content_reward,
    format_reward,
    step_similarity,
    total_reward,
)
from rever.selfcheck import random_plan

import numpy as np


def plan(grammar, *lines):
    return parse_plan("\n".join(f"{i}. {s}" for i, s in enumerate(lines, 1)), grammar)


def wrap(answer):
    return f"<think>t</think><answer>{answer}</answer>"


def test_weights_validation():
    assert DEFAULT_WEIGHTS.max_total == 1.0
    with pytest.raises(ValueError):
        RewardWeights(action=0.5, object=0.6)
    with pytest.raises(ValueError):
        RewardWeights(format=-1)
    w = RewardWeights.from_dict({"w_f": 0.2, "w_c": 0.8})
    assert w.to_dict()["w_f"] == 0.2


def test_format_reward_cases():
    assert format_reward("<think>t</think><answer>a</answer>") == 1
    assert format_reward("answer only, no tags") == 0
    assert format_reward("<think>t</think>") == 0


def test_step_similarity_examples(step, ontology):
    a = step("Put apple into basket.")
    assert step_similarity(a, a) == 1.0
    assert step_similarity(a, step("Put pen into basket.")) == pytest.approx(0.65, abs=1e-12)
    assert step_similarity(step("Pick up teacup."), step("Pick up cup.")) == 1.0
    assert step_similarity(step("Put apple on tray."), step("Open box.")) == 0.0


def test_ontology_set_counts_as_similar(step, ontology):
    a, b = step("Pick up mug."), step("Pick up glass.")
    assert step_similarity(a, b) == pytest.approx(0.3)
    assert step_similarity(a, b, ontology) == 1.0


def test_one_slot_vs_two_slots(step):
    # positional alignment: object vs location compared, averaged over 2 slots
    s = step_similarity(step("Place into basket."), step("Put basket into bowl."))
    assert s == pytest.approx(0.7 * 0.5)


def test_bm_examples(grammar):
    p = plan(grammar, "Pick up apple.", "Put apple into basket.", "Open box.")
    bm, m = bipartite_match_score(p, p)
    assert bm == 1.0 and m.as_dict() == {0: 0, 1: 1, 2: 2}
    rev = Plan(tuple(reversed(p.steps)))
    assert bipartite_match_score(rev, p)[0] == 1.0
    gen = plan(grammar, "Pick up apple.")
    truth = plan(grammar, "Pick up apple.", "Put apple into basket.")
    assert bipartite_match_score(gen, truth)[0] == pytest.approx(0.5, abs=1e-12)
    assert content_reward(gen, truth) == pytest.approx(0.4, abs=1e-12)


def test_content_negative_unclamped(grammar):
    gen = plan(grammar, "Open drawer.", "Open door.", "Push cart.", "Push chair.", "Open lid.")
    truth = plan(grammar, "Pick up apple.", "Place into basket.")
    assert content_reward(gen, truth) == pytest.approx(-0.3, abs=1e-12)


def test_empty_ground_truth(grammar):
    with pytest.raises(EmptyGroundTruth):
        bipartite_match_score(plan(grammar, "Open box."), Plan(()))


def test_completion_reward():
    assert completion_reward("True", True) == 1
    assert completion_reward("true", True) == 0
    assert completion_reward("The task is done", True) == 0
    assert completion_reward(" False ", False) == 1


def test_total_reward_cases(grammar):
    truth = plan(grammar, "Pick up apple.", "Place into basket.")
    text = render_plan(truth.steps)
    b = total_reward(wrap(text), truth, grammar)
    assert (b.format, b.content, b.total) == (1, 1.0, 1.0)
    b = total_reward(f"<answer>{text}</answer>", truth, grammar)
    assert (b.format, b.content, b.total) == (0, 1.0, 0.9)
    b = total_reward(wrap("1. Fly to the moon."), truth, grammar)
    assert (b.format, b.content, b.total) == (1, 0.0, 0.1)
    assert b.diagnostics
    b = total_reward(wrap("True"), True, grammar)
    assert b.total == 1.0


def test_ordered_variant(grammar):
    p = plan(grammar, "Pick up apple.", "Open box.")
    rev = Plan(tuple(reversed(p.steps)))
    assert content_reward(rev, p) == 1.0
    assert content_reward(rev, p, ordered=True) == pytest.approx(0.5)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 6), st.integers(1, 6))
def test_properties(seed, m, n):
    from rever.grammar import SkillGrammar

    g = SkillGrammar.default()
    rng = np.random.default_rng(seed)
    a, b = random_plan(rng, g, m), random_plan(rng, g, n)
    ab, ba = bipartite_match_score(a, b)[0], bipartite_match_score(b, a)[0]
    assert ab == ba
    assert 0.0 <= ab <= 1.0
    assert content_reward(a, a) == 1.0
    perm = Plan(tuple(a.steps[i] for i in rng.permutation(m)))
    assert bipartite_match_score(perm, b)[0] == ab
    # duplicating a step of an exact answer only lowers bm
    dup = Plan(b.steps + (b.steps[0],))
    assert bipartite_match_score(dup, b)[0] < 1.0


def test_duplicate_can_raise_bm_in_general(grammar):
    # the copy may pick up a ground-truth step nothing else covered
    gen = plan(grammar, "Pick up apple.")
    truth = plan(grammar, "Pick up apple.", "Pick up pear.", "Open box.")
    assert bipartite_match_score(Plan(gen.steps * 2), truth)[0] > bipartite_match_score(gen, truth)[0]
    # or displace a weak pairing, even when the generated plan is not shorter
    gen = plan(grammar, "Put apple into basket.", "Open drawer.")
    truth = plan(grammar, "Put apple into basket.", "Put pen into basket.")
    dup = Plan((gen.steps[0],) + gen.steps)
    assert bipartite_match_score(dup, truth)[0] > bipartite_match_score(gen, truth)[0]
