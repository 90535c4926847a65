"""Skill grammar, ontology, response/plan parsing and prompt rendering."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Iterator, Sequence

SLOT_NAMES = ("object", "location")
PREPOSITIONS = frozenset({"on", "into", "in", "onto", "to", "from", "under", "at", "with"})

_PLACEHOLDER = re.compile(r"\[([A-Za-z_]+)\]")
_NUMBERED = re.compile(r"^(\d+)\.(?:\s+(.*))?$")
_WS = re.compile(r"\s+")


def normalize_ws(text: str) -> str:
    return _WS.sub(" ", text).strip()


class GrammarError(ValueError):
    """Invalid grammar or ontology definition."""


# -- response parsing errors -------------------------------------------------


class FormatError(ValueError):
    """Response text does not follow the <think>/<answer> template."""

    kind = "format"


class MissingTag(FormatError):
    kind = "missing_tag"


class DuplicateTag(FormatError):
    kind = "duplicate_tag"


class TagOrderViolation(FormatError):
    kind = "tag_order"


class TrailingContent(FormatError):
    kind = "trailing_content"


# -- plan parsing errors -------------------------------------------------------


@dataclass(frozen=True)
class StepParseError:
    kind: str  # unnumbered_line | nonconsecutive_numbering | no_template_match | ambiguous_template_match | empty_slot
    line_no: int
    line: str
    detail: str = ""

    def __str__(self) -> str:
        msg = f"line {self.line_no}: {self.kind}: {self.line!r}"
        return f"{msg} ({self.detail})" if self.detail else msg


class PlanParseError(ValueError):
    def __init__(self, errors: Sequence[StepParseError]):
        self.errors = list(errors)
        super().__init__("; ".join(str(e) for e in self.errors))


# -- templates ---------------------------------------------------------------


def _derive_verb(literal_head: str) -> str:
    words = literal_head.split()
    if len(words) > 1 and words[-1].lower() in PREPOSITIONS:
        words = words[:-1]
    return " ".join(words)


@dataclass(frozen=True)
class SkillTemplate:
    """One executable skill form, e.g. ``Put [object] on [location].``"""

    verb: str
    slots: tuple[str, ...]
    surface_pattern: str
    _literals: tuple[str, ...] = field(init=False, repr=False, compare=False)
    _regex: re.Pattern = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        pattern = normalize_ws(self.surface_pattern)
        if pattern != self.surface_pattern:
            raise GrammarError(f"surface pattern is not whitespace-normalized: {self.surface_pattern!r}")
        if not self.verb.strip():
            raise GrammarError(f"empty verb for {pattern!r}")
        found = tuple(_PLACEHOLDER.findall(pattern))
        if found != tuple(self.slots):
            raise GrammarError(f"placeholders {found} do not match slots {self.slots} in {pattern!r}")
        for slot in self.slots:
            if slot not in SLOT_NAMES:
                raise GrammarError(f"unknown slot {slot!r} in {pattern!r}")
        body = pattern[:-1] if pattern.endswith(".") else pattern
        literals = tuple(s.strip() for s in _PLACEHOLDER.split(body)[::2])
        # Each slot is bounded by single spaces; an empty capture is reported as EmptySlot.
        parts = ["^"]
        for i, lit in enumerate(literals):
            if lit:
                if i > 0:
                    parts.append(" ")
                parts.append(re.escape(lit))
            if i < len(self.slots):
                sep = " " if (lit or i > 0) else ""
                parts.append(f"(?:{sep}(?P<s{i}>.+))?")
        parts.append("$")
        object.__setattr__(self, "_literals", literals)
        object.__setattr__(self, "_regex", re.compile("".join(parts)))

    @classmethod
    def from_pattern(cls, pattern: str, verb: str | None = None) -> "SkillTemplate":
        pattern = normalize_ws(pattern)
        slots = tuple(_PLACEHOLDER.findall(pattern))
        if verb is None:
            head = _PLACEHOLDER.split(pattern)[0]
            verb = _derive_verb(head.rstrip(". ")) if slots else pattern.rstrip(".")
        return cls(verb=normalize_ws(verb), slots=slots, surface_pattern=pattern)

    @property
    def specificity(self) -> int:
        """Number of literal words; used to prefer the tighter of two matching templates."""
        return sum(len(lit.split()) for lit in self._literals)

    def match(self, body: str) -> tuple[str | None, ...] | None:
        """Match a normalized step body (no numbering, no trailing period).

        Returns the captured slot texts (``None`` for an empty slot) or ``None``
        when the literal skeleton does not match.
        """
        m = self._regex.match(body)
        if m is None:
            return None
        return tuple(
            (m.group(f"s{i}").strip() or None) if m.group(f"s{i}") is not None else None
            for i in range(len(self.slots))
        )

    def render(self, args: Sequence[str]) -> str:
        if len(args) != len(self.slots):
            raise ValueError(f"{self.surface_pattern!r} takes {len(self.slots)} args, got {len(args)}")
        it = iter(args)
        text = _PLACEHOLDER.sub(lambda _m: next(it), self.surface_pattern)
        return text if text.endswith(".") else text + "."

    def __str__(self) -> str:
        return self.surface_pattern


@dataclass(frozen=True)
class SkillGrammar:
    templates: tuple[SkillTemplate, ...]

    def __post_init__(self) -> None:
        if not self.templates:
            raise GrammarError("grammar must contain at least one template")
        seen: set[str] = set()
        for t in self.templates:
            if t.surface_pattern in seen:
                raise GrammarError(f"duplicate template {t.surface_pattern!r}")
            seen.add(t.surface_pattern)

    def __iter__(self) -> Iterator[SkillTemplate]:
        return iter(self.templates)

    def __len__(self) -> int:
        return len(self.templates)

    def __getitem__(self, key: int | str) -> SkillTemplate:
        if isinstance(key, int):
            return self.templates[key]
        for t in self.templates:
            if t.surface_pattern == key:
                return t
        raise KeyError(key)

    def index(self, template: SkillTemplate) -> int:
        return self.templates.index(template)

    @classmethod
    def from_text(cls, text: str) -> "SkillGrammar":
        templates = []
        for raw in text.splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            verb = None
            if line.startswith("verb="):
                head, sep, line = line[len("verb="):].partition("|")
                if not sep:
                    raise GrammarError(f"verb override without '|' separator: {raw!r}")
                verb = head.strip()
            templates.append(SkillTemplate.from_pattern(line.strip(), verb=verb))
        return cls(tuple(templates))

    @classmethod
    def load(cls, path: str | Path) -> "SkillGrammar":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))

    @classmethod
    def default(cls) -> "SkillGrammar":
        return cls.from_text(_read_data("default_grammar.txt"))

    def to_text(self) -> str:
        lines = []
        for t in self.templates:
            if SkillTemplate.from_pattern(t.surface_pattern).verb != t.verb:
                lines.append(f"verb={t.verb} | {t.surface_pattern}")
            else:
                lines.append(t.surface_pattern)
        return "\n".join(lines) + "\n"


def _key(text: str) -> str:
    return normalize_ws(text).casefold()


@dataclass(frozen=True)
class Ontology:
    """Named sets of interchangeable object/location names."""

    sets: dict[str, frozenset[str]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        normalized = {}
        for name, members in self.sets.items():
            keys = frozenset(_key(m) for m in members if _key(m))
            if len(keys) < 2:
                raise GrammarError(f"semantic set {name!r} needs at least 2 members")
            normalized[name] = keys
        object.__setattr__(self, "sets", normalized)
        index: dict[str, frozenset[str]] = {}
        for name, keys in normalized.items():
            for k in keys:
                index[k] = index.get(k, frozenset()) | {name}
        object.__setattr__(self, "_index", index)

    def __hash__(self) -> int:
        return hash(tuple(sorted((k, tuple(sorted(v))) for k, v in self.sets.items())))

    def sets_of(self, term: str) -> frozenset[str]:
        return self._index.get(_key(term), frozenset())

    def share_set(self, a: str, b: str) -> bool:
        return bool(self.sets_of(a) & self.sets_of(b))

    @classmethod
    def from_text(cls, text: str) -> "Ontology":
        sets: dict[str, list[str]] = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            name, sep, rest = line.partition(":")
            if not sep or not name.strip():
                raise GrammarError(f"ontology line {lineno}: expected 'name: a, b, ...'")
            sets.setdefault(name.strip(), []).extend(m for m in rest.split(",") if m.strip())
        return cls({k: frozenset(v) for k, v in sets.items()})

    @classmethod
    def load(cls, path: str | Path) -> "Ontology":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))

    @classmethod
    def default(cls) -> "Ontology":
        return cls.from_text(_read_data("default_ontology.txt"))


def _read_data(name: str) -> str:
    return resources.files("rever").joinpath("data").joinpath(name).read_text(encoding="utf-8")


# -- plans ------------------------------------------------------------------


@dataclass(frozen=True)
class PlanStep:
    template: SkillTemplate
    args: tuple[str, ...]

    def __post_init__(self) -> None:
        args = tuple(normalize_ws(a) for a in self.args)
        if len(args) != len(self.template.slots):
            raise ValueError(
                f"{self.template.surface_pattern!r} expects slots {self.template.slots}, got {len(args)} args"
            )
        if any(not a for a in args):
            raise ValueError(f"empty argument in step for {self.template.surface_pattern!r}")
        object.__setattr__(self, "args", args)

    @property
    def verb(self) -> str:
        return self.template.verb

    @property
    def slot_args(self) -> dict[str, str]:
        return dict(zip(self.template.slots, self.args))

    def render(self) -> str:
        return self.template.render(self.args)

    def __str__(self) -> str:
        return self.render()


@dataclass(frozen=True)
class Plan:
    steps: tuple[PlanStep, ...] = ()

    def __len__(self) -> int:
        return len(self.steps)

    def __iter__(self) -> Iterator[PlanStep]:
        return iter(self.steps)

    def __getitem__(self, i: int) -> PlanStep:
        return self.steps[i]

    def render(self) -> str:
        return render_plan(self.steps)


def render_plan(steps: Iterable[PlanStep]) -> str:
    return "\n".join(f"{i}. {s.render()}" for i, s in enumerate(steps, 1))


@dataclass(frozen=True)
class ResponseParts:
    think: str
    answer: str


_TAGS = ("<think>", "</think>", "<answer>", "</answer>")


def parse_response(text: str) -> ResponseParts:
    """Split ``<think>..</think><answer>..</answer>`` into its two parts.

    Raises a :class:`FormatError` subclass naming the first defect found.
    """
    positions = {}
    for tag in _TAGS:
        hits = [m.start() for m in re.finditer(re.escape(tag), text)]
        if not hits:
            raise MissingTag(f"missing {tag}")
        positions[tag] = hits
    for tag, hits in positions.items():
        if len(hits) > 1:
            raise DuplicateTag(f"{tag} appears {len(hits)} times")
    t0, t1, a0, a1 = (positions[tag][0] for tag in _TAGS)
    if not (t0 < t1 < a0 < a1):
        raise TagOrderViolation("expected <think>...</think> followed by <answer>...</answer>")
    outside = (
        text[:t0],
        text[t1 + len("</think>"):a0],
        text[a1 + len("</answer>"):],
    )
    for where, chunk in zip(("before <think>", "between blocks", "after </answer>"), outside):
        if chunk.strip():
            raise TrailingContent(f"non-whitespace text {where}: {chunk.strip()[:40]!r}")
    return ResponseParts(
        think=text[t0 + len("<think>"):t1].strip(),
        answer=text[a0 + len("<answer>"):a1].strip(),
    )


_ANSWER_BLOCK = re.compile(r"<answer>(.*?)</answer>", re.DOTALL)


def extract_answer(text: str) -> str | None:
    """Lenient answer extraction: the last ``<answer>`` block, if any."""
    blocks = _ANSWER_BLOCK.findall(text)
    return blocks[-1].strip() if blocks else None


def match_step(body: str, grammar: SkillGrammar) -> tuple[PlanStep | None, str, str]:
    """Resolve one step body against the grammar.

    Returns ``(step, "", "")`` on success or ``(None, error_kind, detail)``.
    """
    text = normalize_ws(body)
    if text.endswith("."):
        text = text[:-1].rstrip()
    full: list[tuple[SkillTemplate, tuple[str, ...]]] = []
    empty: list[tuple[SkillTemplate, str]] = []
    for template in grammar:
        captured = template.match(text)
        if captured is None:
            continue
        missing = [slot for slot, arg in zip(template.slots, captured) if arg is None]
        if missing:
            empty.append((template, missing[0]))
        else:
            full.append((template, captured))  # type: ignore[arg-type]
    if full:
        best = max(t.specificity for t, _ in full)
        top = [(t, a) for t, a in full if t.specificity == best]
        if len(top) > 1:
            names = ", ".join(repr(t.surface_pattern) for t, _ in top)
            return None, "ambiguous_template_match", names
        template, args = top[0]
        return PlanStep(template, args), "", ""
    if empty:
        template, slot = empty[0]
        return None, "empty_slot", f"{slot} in {template.surface_pattern!r}"
    return None, "no_template_match", ""


def parse_plan(answer: str, grammar: SkillGrammar) -> Plan:
    """Parse a numbered plan ("1. ...", "2. ...") into validated steps.

    Blank lines are ignored. All line-level problems are collected and raised
    together as a :class:`PlanParseError`.
    """
    steps: list[PlanStep] = []
    errors: list[StepParseError] = []
    expected = 1
    for line_no, raw in enumerate(answer.splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        m = _NUMBERED.match(line)
        if m is None:
            errors.append(StepParseError("unnumbered_line", line_no, line))
            continue
        number = int(m.group(1))
        if number != expected:
            errors.append(
                StepParseError("nonconsecutive_numbering", line_no, line, f"expected {expected}, got {number}")
            )
        expected += 1
        step, kind, detail = match_step(m.group(2) or "", grammar)
        if step is None:
            errors.append(StepParseError(kind, line_no, line, detail))
        else:
            steps.append(step)
    if errors:
        raise PlanParseError(errors)
    return Plan(tuple(steps))


def parse_step(text: str, grammar: SkillGrammar) -> PlanStep:
    step, kind, detail = match_step(text, grammar)
    if step is None:
        raise PlanParseError([StepParseError(kind, 1, text, detail)])
    return step


# -- prompts -----------------------------------------------------------------

PLANNING_PROMPT = """\
<image> You are a helpful and meticulous robot assistant. Your goal is to help users with real-world tasks using your gripper.

Your available skills are:
{skills}

The user request is: {instruction}

Based on the image, describe what you see and generate a step-by-step plan to fulfill the users request. \
You must ONLY use the available skills listed above. Each step in your plan must exactly match one of the skill formats.

The plan should be numbered like this:
1. [Skill with object and location]
2. [Skill with object and location]
...

Avoid empty, duplicate, or irrelevant steps.
"""

COMPLETION_PROMPT = """\
<image><image>You are a precise robot assistant tasked with verifying if an action has been successfully completed.

The first image shows the initial state of the environment before the action. \
The second image shows the final state after the action was attempted.

Based on your observation of both images, determine if the following action was completed:

# {instruction} #

Output ONLY True if the second image clearly shows the object is in the target location as described in the action. \
Otherwise, output ONLY False.
"""


def render_prompt(kind: str, grammar: SkillGrammar | None, instruction: str) -> str:
    """Render the planning or completion-verification prompt."""
    if not instruction.strip():
        raise ValueError("instruction must be non-empty")
    if kind == "planning":
        if grammar is None:
            raise ValueError("planning prompt needs a grammar")
        skills = "\n".join(f"- {t.surface_pattern}" for t in grammar)
        return PLANNING_PROMPT.format(skills=skills, instruction=instruction)
    if kind == "completion":
        return COMPLETION_PROMPT.format(instruction=instruction)
    raise ValueError(f"unknown prompt kind {kind!r}")
