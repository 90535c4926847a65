"""Self-verification suites: matching oracle, GRPO gradient check, grammar round-trip."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .grammar import Ontology, Plan, PlanStep, SkillGrammar, parse_plan, render_plan
from .grpo import GrpoConfig, GrpoGroup, Sample, ToyPlanPolicy, build_vocabulary, gradient_check, group_advantages
from .matching import Matching, max_weight_matching
from .oracle import brute_force_matching
from .reward import DEFAULT_WEIGHTS, similarity_matrix

Solver = Callable[[list[list[float]]], Matching]

OBJECTS = ("apple", "banana", "cup", "mug", "pen", "box")
LOCATIONS = ("basket", "bowl", "plate", "tray", "desk")


@dataclass
class SuiteResult:
    name: str
    cases: int
    failures: int = 0
    counterexample: dict | None = None
    detail: str = ""

    @property
    def ok(self) -> bool:
        return self.failures == 0

    def line(self) -> str:
        status = "PASS" if self.ok else "FAIL"
        extra = f" ({self.detail})" if self.detail else ""
        return f"{status} {self.name}: {self.cases - self.failures}/{self.cases}{extra}"


def random_plan(rng: np.random.Generator, grammar: SkillGrammar, length: int) -> Plan:
    pools = {"object": OBJECTS, "location": LOCATIONS}
    steps = []
    for _ in range(length):
        t = grammar[int(rng.integers(len(grammar)))]
        steps.append(PlanStep(t, tuple(pools[s][int(rng.integers(len(pools[s])))] for s in t.slots)))
    return Plan(tuple(steps))


def random_weight_matrix(rng: np.random.Generator, m: int, n: int) -> list[list[float]]:
    # a coarse grid makes exact ties common, which exercises the tie-break
    grid = rng.integers(0, 5, size=(m, n)) / 4.0
    if rng.random() < 0.5:
        grid = rng.random((m, n)) * (rng.random((m, n)) < 0.7)
    return grid.tolist()


def matching_suite(
    seed: int = 0, cases: int = 300, max_size: int = 7, solver: Solver = max_weight_matching, grammar: SkillGrammar | None = None
) -> SuiteResult:
    """Compare the solver to brute force on random and plan-derived matrices of every size up to ``max_size``."""
    grammar = grammar or SkillGrammar.default()
    ontology = Ontology.default()
    rng = np.random.default_rng(seed)
    result = SuiteResult("matching-oracle", cases)
    for case in range(cases):
        m = int(rng.integers(1, max_size + 1))
        n = int(rng.integers(1, max_size + 1))
        if case % 2:
            w = similarity_matrix(random_plan(rng, grammar, m), random_plan(rng, grammar, n), ontology, DEFAULT_WEIGHTS)
        else:
            w = random_weight_matrix(rng, m, n)
        got = solver(w)
        want = brute_force_matching(w)
        if got.total_weight != want.total_weight or got.pairs != want.pairs:
            result.failures += 1
            if result.counterexample is None:
                result.counterexample = {
                    "case": case,
                    "weights": w,
                    "expected_total": want.total_weight,
                    "expected_pairs": [list(p) for p in want.pairs],
                    "got_total": got.total_weight,
                    "got_pairs": [list(p) for p in got.pairs],
                }
    return result


def gradient_case(rng: np.random.Generator, beta: float, eps: float = 0.2, margin: float = 0.02):
    """Random policy and group whose ratios sit at least ``margin`` away from the clip edges."""
    grammar = SkillGrammar.default()
    vocab = build_vocabulary(grammar, OBJECTS[:2], LOCATIONS[:1])[: int(rng.integers(3, 7))]
    B = int(rng.choice([2, 4, 8]))
    horizon = int(rng.integers(1, 4))
    policy = ToyPlanPolicy(tuple(vocab), rng.normal(size=(1, horizon, len(vocab) + 1)), rng.normal(size=(1, horizon, len(vocab) + 1)))
    samples = [policy.sample(rng) for _ in range(B)]
    rewards = rng.random(B)
    logp_new = np.array([s.logp for s in samples])
    while True:
        logp_old = logp_new + rng.normal(scale=0.3, size=B)
        ratio = np.exp(logp_new - logp_old)
        if np.all(np.minimum(np.abs(ratio - (1 - eps)), np.abs(ratio - (1 + eps))) > margin):
            break
    group = GrpoGroup(
        responses=samples,
        rewards=rewards,
        advantages=group_advantages(rewards),
        logp_old=logp_old.tolist(),
        logp_new=logp_new.tolist(),
        logp_ref=[policy.ref_log_prob(0, s.actions) for s in samples],
    )
    cfg = GrpoConfig(group_size=B, clip_eps=eps, kl_weight=beta)
    return policy, group, cfg


def gradient_suite(seed: int = 0, cases: int = 50, tol: float = 1e-5) -> SuiteResult:
    rng = np.random.default_rng(seed)
    result = SuiteResult("grpo-gradient", cases)
    worst = 0.0
    for case in range(cases):
        beta = (0.0, 0.04, 1.0)[case % 3]
        policy, group, cfg = gradient_case(rng, beta)
        err = gradient_check(policy, group, cfg)
        worst = max(worst, err)
        if not err <= tol:
            result.failures += 1
            if result.counterexample is None:
                result.counterexample = {"case": case, "beta": beta, "relative_error": err}
    result.detail = f"max relative error {worst:.3g}"
    return result


def roundtrip_suite(seed: int = 0, cases: int = 500, grammar: SkillGrammar | None = None) -> SuiteResult:
    grammar = grammar or SkillGrammar.default()
    rng = np.random.default_rng(seed)
    result = SuiteResult("grammar-roundtrip", cases)
    for case in range(cases):
        plan = random_plan(rng, grammar, int(rng.integers(1, 8)))
        text = render_plan(plan.steps)
        back = parse_plan(text, grammar)
        if back.steps != plan.steps or render_plan(back.steps) != text:
            result.failures += 1
            if result.counterexample is None:
                result.counterexample = {"case": case, "text": text}
    return result


@dataclass
class SelfcheckReport:
    suites: list[SuiteResult] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(s.ok for s in self.suites)

    def lines(self) -> list[str]:
        return [s.line() for s in self.suites]

    def counterexamples(self) -> dict:
        return {s.name: s.counterexample for s in self.suites if s.counterexample is not None}


def run_selfcheck(seed: int = 0, solver: Solver = max_weight_matching, dump: str | Path | None = None) -> SelfcheckReport:
    report = SelfcheckReport([matching_suite(seed, solver=solver), gradient_suite(seed), roundtrip_suite(seed)])
    if dump is not None and not report.ok:
        Path(dump).write_text(json.dumps(report.counterexamples(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return report
