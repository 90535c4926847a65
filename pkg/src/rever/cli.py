"""Command-line front end: ``rever <command> [options]``.

Exit codes: 0 success, 1 validation or format failure, 2 internal check failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path
from typing import Any, Sequence

from . import __version__
from .datagen import (
    ConstraintTable,
    InfeasibleComposition,
    InstructionPool,
    MalformedRecord,
    build_library,
    load_library,
    make_triplets,
    read_dataset,
    split_dataset,
    synthesize,
    write_dataset,
)
from .executor import ExecConfig, ScenarioError, check_invariants, load_scenario_file, run_task
from .grammar import GrammarError, Ontology, PlanParseError, SkillGrammar, parse_plan
from .grpo import GrpoConfig, train_toy
from .reward import RewardWeights
from .scoring import MissingPrediction, UnknownId, cmd_eval, cmd_score, sig
from .selfcheck import run_selfcheck

OK, INVALID, CHECK_FAILED = 0, 1, 2

DEFAULT_OBJECTS = ("apple", "banana", "pen", "cup", "mug", "box")
DEFAULT_LOCATIONS = ("basket", "bowl", "plate", "tray")


def _round(obj: Any) -> Any:
    if isinstance(obj, float):
        return sig(obj)
    if isinstance(obj, dict):
        return {k: _round(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round(v) for v in obj]
    return obj


def _dump(obj: Any) -> str:
    return json.dumps(_round(obj), ensure_ascii=False)


def _emit(args: argparse.Namespace, name: str, text: str) -> None:
    """Write ``text`` to ``<out>/<name>`` (or ``<out>`` when it names a file), else stdout."""
    if args.out is None:
        sys.stdout.write(text)
        return
    out = Path(args.out)
    if out.suffix:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text, encoding="utf-8")
    else:
        out.mkdir(parents=True, exist_ok=True)
        (out / name).write_text(text, encoding="utf-8")


def _grammar(args) -> SkillGrammar:
    return SkillGrammar.load(args.grammar) if args.grammar else SkillGrammar.default()


def _ontology(args) -> Ontology:
    return Ontology.load(args.ontology) if args.ontology else Ontology.default()


def _weights(args) -> RewardWeights:
    if not args.weights:
        return RewardWeights()
    return RewardWeights.from_dict(json.loads(Path(args.weights).read_text(encoding="utf-8")))


# -- commands ----------------------------------------------------------------


def run_score(args) -> int:
    out_path = Path(args.out) if args.out else None
    if out_path is not None and not out_path.suffix:
        out_path.mkdir(parents=True, exist_ok=True)
        out_path = out_path / "scores.jsonl"
    target = out_path or Path("/dev/stdout")
    breakdowns = cmd_score(args.input, target, _grammar(args), _ontology(args), _weights(args))
    print(f"scored {len(breakdowns)} record(s)", file=sys.stderr)
    return OK


def run_eval(args) -> int:
    report = cmd_eval(args.predictions, args.dataset, _grammar(args), _ontology(args), _weights(args))
    _emit(args, "eval.json", _dump(report.to_dict()) + "\n")
    o = report.overall
    print(f"planning score (mean bm) {sig(o.mean_bm)} over {o.count} task(s)", file=sys.stderr)
    return OK


def run_synthesize(args) -> int:
    grammar = _grammar(args)
    ontology = _ontology(args)
    library = load_library(args.library, grammar) if args.library else build_library(grammar, DEFAULT_OBJECTS, DEFAULT_LOCATIONS)
    constraints = ConstraintTable.load(args.constraints) if args.constraints else ConstraintTable.default()
    instructions = InstructionPool.load(args.instructions) if args.instructions else InstructionPool.default()
    tasks = synthesize(library, args.count, args.kmin, args.kmax, args.seed, instructions, constraints, ontology)
    grammar_ref = Path(args.grammar).name if args.grammar else "default"
    triplets = [t for task in tasks for t in make_triplets(task, grammar, grammar_ref)]
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    if args.split:
        train, test = split_dataset(triplets, args.test_fraction)
        write_dataset(train, out / "train.jsonl")
        write_dataset(test, out / "test.jsonl")
        print(f"{len(tasks)} tasks -> {len(train)} train / {len(test)} test triplets", file=sys.stderr)
    else:
        write_dataset(triplets, out / "dataset.jsonl")
        print(f"{len(tasks)} tasks -> {len(triplets)} triplets", file=sys.stderr)
    return OK


def _grpo_config(args, extra: dict) -> GrpoConfig:
    names = {f.name for f in fields(GrpoConfig)}
    unknown = set(extra) - names - {"tasks", "weights", "limit"}
    if unknown:
        raise ValueError(f"unknown config key(s): {', '.join(sorted(unknown))}")
    values = {k: v for k, v in extra.items() if k in names}
    if args.steps is not None:
        values["steps"] = args.steps
    values.setdefault("seed", args.seed)
    return GrpoConfig(**values)


def run_train_toy(args) -> int:
    config = json.loads(Path(args.config).read_text(encoding="utf-8")) if args.config else {}
    cfg = _grpo_config(args, config)
    grammar = _grammar(args)
    weights = RewardWeights.from_dict(config["weights"]) if "weights" in config else _weights(args)
    tasks_path = args.tasks or config.get("tasks")
    if not tasks_path:
        raise ValueError("train-toy needs a task set (--tasks or 'tasks' in the config)")
    tasks = [(t.task_id, parse_plan(t.y, grammar)) for t in read_dataset(tasks_path) if t.task_type == "plan"]
    limit = args.limit or config.get("limit")
    if limit:
        tasks = tasks[:limit]
    started = time.perf_counter()
    report, _ = train_toy(tasks, cfg, grammar, _ontology(args), weights)
    elapsed = time.perf_counter() - started
    summary = {**report.summary(), "config": asdict(cfg), "seconds": elapsed}
    _emit(args, "train_log.jsonl", "".join(_dump(asdict(r)) + "\n" for r in report.records))
    if args.out is not None and not Path(args.out).suffix:
        (Path(args.out) / "summary.json").write_text(_dump(summary) + "\n", encoding="utf-8")
    print(
        f"mean reward {sig(report.initial_mean_reward)} -> {sig(report.final_mean_reward)}; "
        f"greedy exact {report.exact_count}/{len(tasks)}; {elapsed:.1f}s",
        file=sys.stderr,
    )
    return OK


def run_simulate(args) -> int:
    scenario = load_scenario_file(args.scenario, _grammar(args))
    status, trace = run_task(scenario.instruction, scenario.ports, scenario.cfg)
    summary = trace.summary()
    problems = check_invariants(trace, scenario.cfg)
    _emit(args, "trace.jsonl", trace.jsonl())
    print(_dump(summary), file=sys.stderr)
    if problems:
        print("invariant violations: " + "; ".join(problems), file=sys.stderr)
        return CHECK_FAILED
    if scenario.expected is not None and trace.signature() != scenario.expected:
        print("trace differs from the scenario's expected events", file=sys.stderr)
        return CHECK_FAILED
    return OK


def run_selfcheck_cmd(args) -> int:
    dump = None
    if args.out is not None:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        dump = out / "counterexamples.json"
    report = run_selfcheck(args.seed, dump=dump)
    for line in report.lines():
        print(line)
    if not report.ok:
        print(json.dumps(report.counterexamples(), sort_keys=True), file=sys.stderr)
    return OK if report.ok else CHECK_FAILED


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--grammar", help="skill grammar file (default: built-in nine templates)")
    common.add_argument("--ontology", help="ontology file of interchangeable argument sets")
    common.add_argument("--weights", help="JSON file of reward weights (w_f, w_c, w_a, w_o, w_l)")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", help="output file or directory (default: stdout where applicable)")

    p = argparse.ArgumentParser(prog="rever", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("score", parents=[common], help="score a batch of responses")
    s.add_argument("input", help="JSONL of {id, task_type, response_text, ground_truth, tag}")
    s.set_defaults(func=run_score)

    s = sub.add_parser("eval", parents=[common], help="planning score of predictions against a dataset")
    s.add_argument("--predictions", required=True)
    s.add_argument("--dataset", required=True)
    s.set_defaults(func=run_eval)

    s = sub.add_parser("synthesize", parents=[common], help="compose tasks and write triplets")
    s.add_argument("--library", help="JSONL skill-demo library (default: synthetic)")
    s.add_argument("--constraints", help="composition constraint table (JSON)")
    s.add_argument("--instructions", help="instruction pool (JSON)")
    s.add_argument("--count", type=int, default=100)
    s.add_argument("--kmin", type=int, default=2)
    s.add_argument("--kmax", type=int, default=4)
    s.add_argument("--split", action="store_true", help="write train.jsonl / test.jsonl split by task")
    s.add_argument("--test-fraction", type=float, default=0.1)
    s.set_defaults(func=run_synthesize)

    s = sub.add_parser("train-toy", parents=[common], help="GRPO on the tabular toy planner")
    s.add_argument("--config", help="JSON with GrpoConfig fields, tasks path and weights")
    s.add_argument("--tasks", help="dataset JSONL; its planning triplets are the tasks")
    s.add_argument("--steps", type=int)
    s.add_argument("--limit", type=int, help="use only the first N tasks")
    s.set_defaults(func=run_train_toy)

    s = sub.add_parser("simulate", parents=[common], help="run an executor scenario")
    s.add_argument("scenario", help="scenario JSON file")
    s.set_defaults(func=run_simulate)

    s = sub.add_parser("selfcheck", parents=[common], help="oracle, gradient and round-trip suites")
    s.set_defaults(func=run_selfcheck_cmd)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (
        MalformedRecord,
        GrammarError,
        PlanParseError,
        ScenarioError,
        InfeasibleComposition,
        MissingPrediction,
        UnknownId,
        FileNotFoundError,
        json.JSONDecodeError,
        ValueError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return INVALID


if __name__ == "__main__":
    sys.exit(main())
