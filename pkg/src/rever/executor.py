"""Deterministic simulator for the plan / monitored-execute / replan loop.

Time is a logical tick counter. Each monitor poll advances the clock by one
tick; ``ExecConfig.tick_ms`` only records how long a tick would be on hardware.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Protocol, Sequence

import numpy as np

from .grammar import Plan, PlanStep, SkillGrammar, parse_step


class PortFault(RuntimeError):
    def __init__(self, port: str, cause: BaseException):
        self.port = port
        self.cause = cause
        super().__init__(f"{port}: {type(cause).__name__}: {cause}")


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class ExecConfig:
    tick_ms: int = 200
    timeout_ticks: int = 10
    max_replans: int = 3

    def __post_init__(self) -> None:
        if self.tick_ms <= 0:
            raise ValueError("tick_ms must be > 0")
        if self.timeout_ticks < 1:
            raise ValueError("timeout_ticks must be >= 1")
        if self.max_replans < 0:
            raise ValueError("max_replans must be >= 0")


# -- ports -------------------------------------------------------------------


class Planner(Protocol):
    def plan(self, instruction: str, observation: str) -> Plan: ...
    def replan(self, instruction: str, plan: Plan, k: int, observation: str) -> Plan: ...


class Controller(Protocol):
    def start(self, step: PlanStep) -> None: ...
    def stop(self) -> None: ...


class Monitor(Protocol):
    def verify(self, step: PlanStep, o_start: str, o_now: str) -> bool: ...


class Observer(Protocol):
    def capture(self) -> str: ...


@dataclass
class Ports:
    planner: Planner
    controller: Controller
    monitor: Monitor
    observer: Observer


# -- trace -------------------------------------------------------------------


@dataclass(frozen=True)
class Event:
    kind: str
    tick: int
    k: int | None = None
    verdict: bool | None = None
    detail: str | None = None

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"event": self.kind, "tick": self.tick}
        if self.k is not None:
            d["k"] = self.k
        if self.verdict is not None:
            d["verdict"] = self.verdict
        if self.detail is not None:
            d["detail"] = self.detail
        return d

    def __str__(self) -> str:
        args = [str(a) for a in (self.k,) if a is not None]
        if self.kind == "VerifyPolled":
            args += [str(self.tick), str(self.verdict)]
        return f"{self.kind}({', '.join(args)})" if args else self.kind


TERMINAL = ("Success", "Failure")


@dataclass
class ExecutionTrace:
    tick_ms: int = 200
    events: list[Event] = field(default_factory=list)
    tick: int = 0

    def emit(self, kind: str, k: int | None = None, verdict: bool | None = None, detail: str | None = None) -> None:
        self.events.append(Event(kind, self.tick, k, verdict, detail))

    def kinds(self) -> list[str]:
        return [e.kind for e in self.events]

    def signature(self) -> list[str]:
        return [str(e) for e in self.events]

    def count(self, kind: str) -> int:
        return sum(1 for e in self.events if e.kind == kind)

    @property
    def status(self) -> str | None:
        return self.events[-1].kind if self.events and self.events[-1].kind in TERMINAL else None

    @property
    def elapsed_ms(self) -> int:
        return self.tick * self.tick_ms

    def jsonl(self) -> str:
        return "".join(json.dumps(e.to_dict()) + "\n" for e in self.events)

    def summary(self) -> dict[str, Any]:
        return {
            "status": self.status,
            "ticks": self.tick,
            "elapsed_ms": self.elapsed_ms,
            "replans": self.count("ReplanIssued"),
            "subtasks_done": self.count("SubtaskDone"),
        }


# -- the loop ----------------------------------------------------------------


def _call(port: str, fn: Callable, *args):
    try:
        return fn(*args)
    except PortFault:
        raise
    except Exception as exc:  # noqa: BLE001 - every port failure is wrapped
        raise PortFault(port, exc) from exc


def monitored_execute(
    step: PlanStep, o_start: str, ports: Ports, cfg: ExecConfig, trace: ExecutionTrace, k: int = 1
) -> bool:
    """Run one sub-task: start, poll once per tick until verified or timed out, stop."""
    trace.emit("SubtaskStarted", k)
    _call("controller.start", ports.controller.start, step)
    verdict = False
    try:
        for _ in range(cfg.timeout_ticks):
            o_now = _call("observer.capture", ports.observer.capture)
            verdict = bool(_call("monitor.verify", ports.monitor.verify, step, o_start, o_now))
            trace.tick += 1
            trace.emit("VerifyPolled", k, verdict)
            if verdict:
                break
    finally:
        # the controller is stopped on every exit path, faults included
        try:
            _call("controller.stop", ports.controller.stop)
        finally:
            trace.emit("ControllerStopped", k)
    if not verdict:
        trace.emit("TimeoutFired", k)
    return verdict


def run_task(instruction: str, ports: Ports, cfg: ExecConfig = ExecConfig()) -> tuple[str, ExecutionTrace]:
    trace = ExecutionTrace(tick_ms=cfg.tick_ms)
    try:
        status = _run(instruction, ports, cfg, trace)
    except PortFault as fault:
        trace.emit("PortFault", detail=str(fault))
        status = "Failure"
    trace.emit(status)
    return status, trace


def _run(instruction: str, ports: Ports, cfg: ExecConfig, trace: ExecutionTrace) -> str:
    o_init = _call("observer.capture", ports.observer.capture)
    plan = _call("planner.plan", ports.planner.plan, instruction, o_init)
    trace.emit("PlanIssued", detail=str(len(plan)))
    if len(plan) == 0:
        return "Failure"
    k = 1
    o_prev = o_init
    failures = 0
    while k <= len(plan):
        step = plan.steps[k - 1]
        if monitored_execute(step, o_prev, ports, cfg, trace, k):
            trace.emit("SubtaskDone", k)
            k += 1
            o_prev = _call("observer.capture", ports.observer.capture)
            continue
        failures += 1
        o_fail = _call("observer.capture", ports.observer.capture)
        if failures > cfg.max_replans:
            return "Failure"
        new_plan = _call("planner.replan", ports.planner.replan, instruction, plan, k, o_fail)
        if len(new_plan) < k - 1:
            raise PortFault("planner.replan", ValueError(f"replanned plan must keep the {k - 1} completed steps"))
        trace.emit("ReplanIssued", k, detail=str(len(new_plan)))
        plan = new_plan
        o_prev = o_fail
    return "Success"


# -- scripted ports ----------------------------------------------------------


class ScriptedPlanner:
    def __init__(self, plan: Plan, replans: Sequence[Plan] = ()):
        self.initial = plan
        self.replans = list(replans)
        self.calls: list[tuple] = []

    def plan(self, instruction: str, observation: str) -> Plan:
        self.calls.append(("plan", instruction, observation))
        return self.initial

    def replan(self, instruction: str, plan: Plan, k: int, observation: str) -> Plan:
        self.calls.append(("replan", instruction, k, observation))
        if not self.replans:
            raise RuntimeError("no scripted replan left")
        return self.replans.pop(0)


class RecordingController:
    def __init__(self) -> None:
        self.running: PlanStep | None = None
        self.log: list[str] = []

    def start(self, step: PlanStep) -> None:
        if self.running is not None:
            raise RuntimeError("controller already running")
        self.running = step
        self.log.append(f"start {step.render()}")

    def stop(self) -> None:
        self.running = None
        self.log.append("stop")


class ScriptedMonitor:
    """Verdict schedules per sub-task attempt.

    ``schedules[n]`` is the list of verdicts for the n-th monitored execution;
    once a schedule runs out its last value repeats (False when empty).
    """

    def __init__(self, schedules: Sequence[Sequence[bool]]):
        self.schedules = [list(s) for s in schedules]
        self.attempt = -1
        self.poll = 0

    def begin(self) -> None:
        self.attempt += 1
        self.poll = 0

    def verify(self, step: PlanStep, o_start: str, o_now: str) -> bool:
        schedule = self.schedules[self.attempt] if self.attempt < len(self.schedules) else []
        i = self.poll
        self.poll += 1
        if not schedule:
            return False
        return schedule[min(i, len(schedule) - 1)]


class _AttemptAwareController(RecordingController):
    def __init__(self, monitor: ScriptedMonitor):
        super().__init__()
        self.monitor = monitor

    def start(self, step: PlanStep) -> None:
        super().start(step)
        self.monitor.begin()


class CountingObserver:
    def __init__(self, prefix: str = "obs") -> None:
        self.prefix = prefix
        self.n = 0

    def capture(self) -> str:
        ref = f"{self.prefix}-{self.n:04d}"
        self.n += 1
        return ref


def scripted_ports(plan: Plan, schedules: Sequence[Sequence[bool]], replans: Sequence[Plan] = ()) -> Ports:
    monitor = ScriptedMonitor(schedules)
    return Ports(ScriptedPlanner(plan, replans), _AttemptAwareController(monitor), monitor, CountingObserver())


class WorldMonitor:
    """Simulated world: each attempt needs a random number of ticks, drawn at
    controller start, before the monitor verifies it."""

    def __init__(self, rng: np.random.Generator, max_ticks: int):
        self.rng = rng
        self.max_ticks = max_ticks
        self.need = 1
        self.elapsed = 0

    def begin(self) -> None:
        self.need = int(self.rng.integers(1, self.max_ticks + 1))
        self.elapsed = 0

    def verify(self, step: PlanStep, o_start: str, o_now: str) -> bool:
        self.elapsed += 1
        return self.elapsed >= self.need


class _WorldController(RecordingController):
    def __init__(self, monitor: WorldMonitor):
        super().__init__()
        self.monitor = monitor

    def start(self, step: PlanStep) -> None:
        super().start(step)
        self.monitor.begin()


class DropFailedPlanner(ScriptedPlanner):
    """Replans by keeping completed steps and retrying the failed one."""

    def replan(self, instruction: str, plan: Plan, k: int, observation: str) -> Plan:
        self.calls.append(("replan", instruction, k, observation))
        return plan


def random_ports(rng: np.random.Generator, steps: Sequence[PlanStep], timeout_ticks: int) -> Ports:
    """Random world where an attempt takes 1..timeout+2 ticks, so some attempts time out."""
    monitor = WorldMonitor(rng, timeout_ticks + 2)
    return Ports(DropFailedPlanner(Plan(tuple(steps))), _WorldController(monitor), monitor, CountingObserver())


# -- scenario files ----------------------------------------------------------


@dataclass
class Scenario:
    instruction: str
    ports: Ports
    cfg: ExecConfig
    expected: list[str] | None = None


def _plan_of(lines: Sequence[str], grammar: SkillGrammar) -> Plan:
    return Plan(tuple(parse_step(s, grammar) for s in lines))


def load_scenario(data: dict, grammar: SkillGrammar) -> Scenario:
    """Build a scenario from a JSON object::

        {"instruction": "...", "plan": ["Pick up apple.", ...],
         "verdicts": [[false, true], [true]], "replans": [[...]],
         "config": {"tick_ms": 200, "timeout_ticks": 5, "max_replans": 3},
         "expected": ["PlanIssued", ...]}
    """
    try:
        plan = _plan_of(data.get("plan", []), grammar)
        replans = [_plan_of(p, grammar) for p in data.get("replans", [])]
        schedules = [[bool(v) for v in s] for s in data.get("verdicts", [])]
        cfg = ExecConfig(**data.get("config", {}))
        return Scenario(
            instruction=str(data.get("instruction", "")),
            ports=scripted_ports(plan, schedules, replans),
            cfg=cfg,
            expected=data.get("expected"),
        )
    except (TypeError, ValueError) as exc:
        raise ScenarioError(str(exc)) from exc


def load_scenario_file(path: str | Path, grammar: SkillGrammar) -> Scenario:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: invalid JSON at line {exc.lineno}") from exc
    if not isinstance(data, dict):
        raise ScenarioError(f"{path}: scenario must be a JSON object")
    return load_scenario(data, grammar)


# -- invariants --------------------------------------------------------------


def check_invariants(trace: ExecutionTrace, cfg: ExecConfig) -> list[str]:
    """Return a list of violated trace invariants (empty when the trace conforms)."""
    problems = []
    events = trace.events
    terminals = [e for e in events if e.kind in TERMINAL]
    if len(terminals) != 1 or events[-1].kind not in TERMINAL:
        problems.append("exactly one terminal event, last")
    if any(b.tick < a.tick for a, b in zip(events, events[1:])):
        problems.append("ticks must be non-decreasing")
    running = False
    polls = 0
    last_k = 0
    for idx, e in enumerate(events):
        if e.kind == "SubtaskStarted":
            if running:
                problems.append(f"SubtaskStarted({e.k}) before previous stop")
            running, polls = True, 0
            if e.k < last_k:
                problems.append(f"k decreased to {e.k}")
            last_k = e.k
        elif e.kind == "VerifyPolled":
            polls += 1
            if polls > cfg.timeout_ticks:
                problems.append(f"more than {cfg.timeout_ticks} polls for sub-task {e.k}")
        elif e.kind == "ControllerStopped":
            if not running:
                problems.append("stop without start")
            running = False
        elif e.kind == "SubtaskDone":
            prev = [x for x in events[:idx] if x.kind == "VerifyPolled"]
            if not prev or prev[-1].k != e.k or prev[-1].verdict is not True:
                problems.append(f"SubtaskDone({e.k}) without a True poll")
        elif e.kind in TERMINAL and running:
            problems.append("terminal event while controller running")
    if trace.count("VerifyPolled") != trace.tick:
        problems.append("total ticks must equal total polls")
    timeouts = trace.count("TimeoutFired")
    replans = trace.count("ReplanIssued")
    if replans > cfg.max_replans:
        problems.append("replan budget exceeded")
    expected_replans = timeouts if trace.status == "Success" else min(timeouts, cfg.max_replans)
    if trace.count("PortFault") == 0 and replans != expected_replans:
        problems.append(f"{replans} replans for {timeouts} failed executions")
    return problems
