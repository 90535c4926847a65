import json
import math

import pytest

from rever import cli
from rever.datagen import MalformedRecord, build_library, make_triplets, synthesize, write_dataset
from rever.grammar import SkillGrammar
from rever.matching import Matching
from rever.scoring import MissingPrediction, UnknownId, cmd_eval, cmd_score, evaluate, sig
from rever.selfcheck import run_selfcheck

from conftest import SCENARIOS


def jsonl(path, rows):
    path.write_text("".join(json.dumps(r) + "\n" for r in rows), encoding="utf-8")
    return path


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    g = SkillGrammar.default()
    lib = build_library(g, ["apple", "pen", "cup"], ["basket", "tray"])
    trips = [t for task in synthesize(lib, 6, 2, 4, seed=5) for t in make_triplets(task, g)]
    path = tmp_path_factory.mktemp("ds") / "dataset.jsonl"
    write_dataset(trips, path)
    return path, trips


def plan_rows(trips):
    return [t for t in trips if t.task_type == "plan"]


def test_sig():
    assert sig(0.1 + 0.2) == 0.3
    assert sig(1 / 3) == 0.333333333
    assert sig(None) is None and sig(0.0) == 0.0


def test_score_exact(tmp_path, grammar, dataset):
    _, trips = dataset
    rows = [
        {"id": t.task_id, "task_type": "plan", "response_text": f"<think>t</think><answer>{t.y}</answer>", "ground_truth": t.y}
        for t in plan_rows(trips)[:3]
    ]
    out = tmp_path / "out.jsonl"
    res = cmd_score(jsonl(tmp_path / "in.jsonl", rows), out, grammar)
    assert [b.total for b in res] == [1.0, 1.0, 1.0]
    recs = [json.loads(l) for l in out.read_text().splitlines()]
    assert [r["id"] for r in recs] == [r["id"] for r in rows]
    assert all(r["matching"] for r in recs)


def test_score_empty_and_unknown_type(tmp_path, grammar):
    empty = tmp_path / "e.jsonl"
    empty.write_text("")
    assert cmd_score(empty, tmp_path / "o.jsonl", grammar) == []
    assert (tmp_path / "o.jsonl").read_text() == ""
    bad = jsonl(tmp_path / "b.jsonl", [{"task_type": "plan", "response": "", "y": "1. Open box."}, {"task_type": "x", "response": "", "y": ""}])
    with pytest.raises(MalformedRecord) as info:
        cmd_score(bad, tmp_path / "o.jsonl", grammar)
    assert info.value.line_no == 2


def shuffled(y):
    bodies = [l.split(". ", 1)[1] for l in y.splitlines()][::-1]
    return "\n".join(f"{i}. {b}" for i, b in enumerate(bodies, 1))


def test_eval_identity_and_shuffle(tmp_path, grammar, dataset):
    path, trips = dataset
    rows = plan_rows(trips)
    same = jsonl(tmp_path / "p.jsonl", [{"task_id": t.task_id, "plan": t.y} for t in rows])
    assert cmd_eval(same, path, grammar).overall.mean_bm == 1.0
    shuf = jsonl(tmp_path / "s.jsonl", [{"task_id": t.task_id, "plan": shuffled(t.y)} for t in rows])
    rep = cmd_eval(shuf, path, grammar)
    assert rep.overall.mean_bm == 1.0 and rep.overall.mean_content == 1.0


def test_eval_half_empty(tmp_path, grammar, dataset):
    path, trips = dataset
    rows = plan_rows(trips)
    preds = {t.task_id: f"<think></think><answer>{t.y if i % 2 == 0 else ''}</answer>" for i, t in enumerate(rows)}
    rep = evaluate(preds, trips, grammar)
    assert rep.overall.mean_bm == 0.5
    # aggregates equal recomputation from the per-record values
    assert rep.overall.mean_total == math.fsum(b.total for b in rep.breakdowns) / len(rows)


def test_eval_id_errors(grammar, dataset):
    _, trips = dataset
    rows = plan_rows(trips)
    preds = {t.task_id: t.y for t in rows}
    with pytest.raises(UnknownId):
        evaluate({**preds, "nope": ""}, trips, grammar)
    preds.pop(rows[0].task_id)
    with pytest.raises(MissingPrediction):
        evaluate(preds, trips, grammar)


def test_cli_synthesize_and_train(tmp_path, capsys):
    assert cli.main(["synthesize", "--count", "20", "--seed", "2", "--out", str(tmp_path), "--split"]) == 0
    train = (tmp_path / "train.jsonl").read_text()
    assert cli.main(["synthesize", "--count", "20", "--seed", "2", "--out", str(tmp_path / "b"), "--split"]) == 0
    assert (tmp_path / "b" / "train.jsonl").read_text() == train
    out = tmp_path / "run"
    code = cli.main(["train-toy", "--tasks", str(tmp_path / "train.jsonl"), "--steps", "40", "--limit", "2", "--out", str(out)])
    assert code == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["steps"] == 40
    assert len((out / "train_log.jsonl").read_text().splitlines()) == 40


def test_cli_config_file(tmp_path, dataset):
    path, _ = dataset
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"tasks": str(path), "steps": 10, "group_size": 4, "weights": {"w_f": 0.2, "w_c": 0.8}}))
    assert cli.main(["train-toy", "--config", str(cfg), "--out", str(tmp_path / "r")]) == 0
    summary = json.loads((tmp_path / "r" / "summary.json").read_text())
    assert summary["config"]["group_size"] == 4 and summary["max_total"] == 1.0
    cfg.write_text(json.dumps({"tasks": str(path), "bogus": 1}))
    assert cli.main(["train-toy", "--config", str(cfg)]) == 1


def test_cli_simulate(tmp_path):
    for name in ("all_verified", "empty_plan", "replan_once"):
        assert cli.main(["simulate", str(SCENARIOS / f"{name}.json"), "--out", str(tmp_path / name)]) == 0
    trace = (tmp_path / "replan_once" / "trace.jsonl").read_text().splitlines()
    assert json.loads(trace[-1])["event"] == "Success"
    wrong = json.loads((SCENARIOS / "all_verified.json").read_text())
    wrong["expected"] = ["PlanIssued", "Failure"]
    (tmp_path / "w.json").write_text(json.dumps(wrong))
    assert cli.main(["simulate", str(tmp_path / "w.json")]) == 2


def test_cli_exit_codes(tmp_path, capsys):
    bad = jsonl(tmp_path / "bad.jsonl", [{"task_type": "oops", "response": "", "y": ""}])
    assert cli.main(["score", str(bad)]) == 1
    assert "line 1" in capsys.readouterr().err
    assert cli.main(["score", str(tmp_path / "missing.jsonl")]) == 1


def test_cli_score_weights(tmp_path, capsys):
    w = tmp_path / "w.json"
    w.write_text(json.dumps({"w_f": 0.5, "w_c": 0.5}))
    rows = jsonl(tmp_path / "in.jsonl", [{"id": "a", "task_type": "completion", "response_text": "<think></think><answer>True</answer>", "ground_truth": "True"}])
    out = tmp_path / "o.jsonl"
    assert cli.main(["score", str(rows), "--weights", str(w), "--out", str(out)]) == 0
    assert json.loads(out.read_text())["total"] == 1.0


def test_cli_eval(tmp_path, dataset):
    path, trips = dataset
    preds = jsonl(tmp_path / "p.jsonl", [{"task_id": t.task_id, "plan": t.y} for t in plan_rows(trips)])
    out = tmp_path / "eval.json"
    assert cli.main(["eval", "--predictions", str(preds), "--dataset", str(path), "--out", str(out)]) == 0
    assert json.loads(out.read_text())["overall"]["mean_bm"] == 1.0


def broken_solver(weights):
    # greedy row-by-row choice: right on easy inputs, wrong when rows compete
    used, pairs = set(), []
    for i, row in enumerate(weights):
        free = [j for j in range(len(row)) if j not in used and row[j] > 0]
        if free:
            j = max(free, key=lambda j: row[j])
            used.add(j)
            pairs.append((i, j, row[j]))
    return Matching.from_pairs(pairs)


def test_selfcheck_passes_and_catches_fault(tmp_path):
    assert run_selfcheck(seed=0).ok
    dump = tmp_path / "cx.json"
    bad = run_selfcheck(seed=0, solver=broken_solver, dump=dump)
    assert not bad.ok
    cx = json.loads(dump.read_text())["matching-oracle"]
    assert cx["got_total"] < cx["expected_total"]
    again = run_selfcheck(seed=0, solver=broken_solver)
    assert again.counterexamples() == bad.counterexamples()


def test_cli_selfcheck(capsys):
    assert cli.main(["selfcheck", "--seed", "1"]) == 0
    assert capsys.readouterr().out.count("PASS") == 3
