import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rever.grammar import (
    DuplicateTag,
    GrammarError,
    MissingTag,
    Ontology,
    Plan,
    PlanParseError,
    PlanStep,
    SkillGrammar,
    SkillTemplate,
    TagOrderViolation,
    TrailingContent,
    extract_answer,
    match_step,
    parse_plan,
    parse_response,
    render_plan,
    render_prompt,
)

from conftest import GOLDEN


def test_parse_response_minimal():
    parts = parse_response("<think>reason</think><answer>1. Pick up apple.</answer>")
    assert parts.think == "reason"
    assert parts.answer == "1. Pick up apple."


@pytest.mark.parametrize(
    "text, error",
    [
        ("<answer>x</answer><think>y</think>", TagOrderViolation),
        ("<think>a</think><answer>b</answer><answer>c</answer>", DuplicateTag),
        ("<think>a</think>", MissingTag),
        ("plain text", MissingTag),
        ("<think>a</think><answer>b</answer> and more", TrailingContent),
    ],
)
def test_parse_response_errors(text, error):
    with pytest.raises(error):
        parse_response(text)


def test_extract_answer_is_lenient():
    assert extract_answer("<answer>1. Open box.</answer>") == "1. Open box."
    assert extract_answer("no tags") is None


def test_parse_plan_put_into(grammar):
    plan = parse_plan("1. Put apple into basket.", grammar)
    assert len(plan) == 1
    s = plan.steps[0]
    assert s.template.surface_pattern == "Put [object] into [location]."
    assert s.slot_args == {"object": "apple", "location": "basket"}
    assert s.verb == "Put"


def test_parse_plan_no_template(grammar):
    with pytest.raises(PlanParseError) as info:
        parse_plan("1. Throw apple away.", grammar)
    assert [e.kind for e in info.value.errors] == ["no_template_match"]


def test_parse_plan_nonconsecutive(grammar):
    with pytest.raises(PlanParseError) as info:
        parse_plan("1. Put apple into basket.\n3. Pick up pen.", grammar)
    kinds = [e.kind for e in info.value.errors]
    assert "nonconsecutive_numbering" in kinds


def test_parse_plan_unnumbered_and_empty_slot(grammar):
    with pytest.raises(PlanParseError) as info:
        parse_plan("Pick up pen.", grammar)
    assert info.value.errors[0].kind == "unnumbered_line"
    with pytest.raises(PlanParseError) as info:
        parse_plan("1. Pick up .", grammar)
    assert info.value.errors[0].kind == "empty_slot"


def test_trailing_period_optional(grammar):
    a = parse_plan("1. Open box", grammar)
    b = parse_plan("1. Open box.", grammar)
    assert a == b
    assert render_plan(a.steps) == "1. Open box."


def test_pour_template_beats_pick_up(grammar):
    s, kind, _ = match_step("Pick up cup and pour into bowl", grammar)
    assert s is not None, kind
    assert s.template.surface_pattern == "Pick up [object] and pour into [location]."
    assert s.verb == "Pick up ... and pour"


def test_verbs_share_lexeme(grammar):
    put_on, put_into = grammar[0], grammar[1]
    assert put_on.verb == put_into.verb == "Put"
    assert grammar["Place on [location]."].verb == "Place"


def test_grammar_file_roundtrip(tmp_path, grammar):
    path = tmp_path / "g.txt"
    path.write_text("# comment\n" + grammar.to_text(), encoding="utf-8")
    assert SkillGrammar.load(path) == grammar


def test_grammar_rejects_unknown_slot():
    with pytest.raises(GrammarError):
        SkillTemplate.from_pattern("Wipe [surface].")


def test_ontology(tmp_path):
    path = tmp_path / "o.txt"
    path.write_text("cup: cup, teacup, mug\n# x\nfruit: apple, pear\n", encoding="utf-8")
    o = Ontology.load(path)
    assert o.share_set("Mug", "teacup")
    assert not o.share_set("mug", "apple")


def test_render_prompt_golden(grammar):
    planning = render_prompt("planning", grammar, "Tidy up the small items on the desktop")
    assert planning == (GOLDEN / "planning_prompt.txt").read_text(encoding="utf-8")
    completion = render_prompt("completion", None, "Pick up the teacup and place it on the saucer.")
    assert completion == (GOLDEN / "completion_prompt.txt").read_text(encoding="utf-8")


def test_prompt_lists_each_skill_once():
    g = SkillGrammar.from_text("Open [object].\n")
    text = render_prompt("planning", g, "x")
    assert sum(1 for line in text.splitlines() if line.startswith("- ")) == 1


WORDS = st.text(alphabet="abcdefghijklmnopqrstuvwxyz", min_size=1, max_size=8).filter(
    lambda w: w not in {"on", "into", "and", "pour", "up"}
)


@st.composite
def plans(draw):
    g = SkillGrammar.default()
    steps = []
    for _ in range(draw(st.integers(1, 6))):
        t = g[draw(st.integers(0, len(g) - 1))]
        steps.append(PlanStep(t, tuple(draw(WORDS) for _ in t.slots)))
    return Plan(tuple(steps))


@settings(max_examples=200, deadline=None)
@given(plans())
def test_roundtrip_property(plan):
    g = SkillGrammar.default()
    assert parse_plan(render_plan(plan.steps), g) == plan


@settings(max_examples=200, deadline=None)
@given(plans())
def test_default_grammar_unambiguous(plan):
    g = SkillGrammar.default()
    for s in plan:
        hits = [t for t in g if t.match(s.render()[:-1]) is not None and None not in t.match(s.render()[:-1])]
        best = max(t.specificity for t in hits)
        assert sum(1 for t in hits if t.specificity == best) == 1
