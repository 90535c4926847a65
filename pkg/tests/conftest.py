from pathlib import Path

import pytest

from rever.grammar import Ontology, SkillGrammar, parse_step

ROOT = Path(__file__).resolve().parent.parent
GOLDEN = Path(__file__).resolve().parent / "golden"
SCENARIOS = ROOT / "scenarios"


@pytest.fixture(scope="session")
def grammar():
    return SkillGrammar.default()


@pytest.fixture(scope="session")
def ontology():
    return Ontology.default()


@pytest.fixture
def step(grammar):
    return lambda text: parse_step(text, grammar)


AC_LINES: list[str] = []


@pytest.fixture
def ac_report():
    """Record one PASS/FAIL line per acceptance criterion; printed at session end."""

    def record(name: str, ok: bool, detail: str) -> None:
        line = f"{name} {'PASS' if ok else 'FAIL'}: {detail}"
        AC_LINES.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if AC_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(AC_LINES, key=lambda s: int(s.split()[0].split("-")[1])):
            terminalreporter.write_line(line)
