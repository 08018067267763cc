import csv
import json
from pathlib import Path

import numpy as np
import pytest

from fewshot_qp import cli
from fewshot_qp import embedding as emb

TINY = str(Path(__file__).parent / "data" / "tiny.yaml")


def run(tmp_path, *argv):
    out = tmp_path / argv[0]
    code = cli.main([*argv, "--config", TINY, "--out", str(out), "-q"])
    return code, out


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def read_jsonl(path):
    return [json.loads(line) for line in Path(path).read_text().splitlines()]


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("train")
    code, out = run(tmp, "train")
    assert code == 0
    return out


def test_train_artifacts(trained):
    summary = json.loads((trained / "summary.json").read_text())
    assert summary["seed"] == 3 and summary["schema_version"] == 1
    assert summary["config"]["meta"]["epochs"] == 2
    records = read_jsonl(trained / "metrics.jsonl")
    kinds = [r["record"] for r in records]
    assert kinds[0] == "config" and kinds.count("validation") == 3
    assert kinds[-2:] == ["test", "test"] and "selected" in kinds
    assert all(r["seed"] == 3 for r in records)
    spec, params, seed, extra = emb.load_checkpoint(trained / "checkpoint.json")
    assert seed == 3 and extra["config_hash"] == summary["config_hash"]


def test_train_is_bitwise_reproducible(tmp_path, trained):
    code, out = run(tmp_path, "train")
    assert code == 0
    assert (out / "metrics.jsonl").read_bytes() == (trained / "metrics.jsonl").read_bytes()


def test_eval_checkpoint_reproduces_train_test_records(tmp_path, trained):
    code, out = run(tmp_path, "eval", "--checkpoint", str(trained / "checkpoint.json"))
    assert code == 0
    train_test = [r for r in read_jsonl(trained / "metrics.jsonl") if r["record"] == "test"]
    ev = [r for r in read_jsonl(out / "metrics.jsonl") if r["record"] == "test"]
    assert [r["accuracy"] for r in ev] == [r["accuracy"] for r in train_test]


def test_untrained_eval_on_shuffled_labels_is_chance(tmp_path):
    code, out = run(tmp_path, "eval", "--shuffle-labels", "--set", "eval.episodes=400")
    assert code == 0
    for r in json.loads((out / "summary.json").read_text())["results"]["test"]:
        assert abs(r["accuracy"] - 0.2) <= 3 * r["ci95"]


def test_gen_data_round_trips(tmp_path):
    for fmt in ("csv", "idx"):
        code, out = run(tmp_path, "gen-data", "--format", fmt)
        assert code == 0
        summary = json.loads((out / "summary.json").read_text())["results"]
        assert summary["classes"] == {"meta_train": 20, "meta_val": 8, "meta_test": 10}
        ds = cli.build_dataset(cli.cfgmod.load(TINY, [f"data.path={summary['dataset']}",
                                                      f"data.format={fmt}"]))
        ref = cli.build_dataset(cli.cfgmod.load(TINY))
        assert all(np.array_equal(ds.items[c], ref.items[c]) for c in ref.items)


def test_sweep_shot_csv(tmp_path):
    code, out = run(tmp_path, "sweep-shot", "--set", "eval.shots=[5,1]")
    assert code == 0
    rows = read_csv(out / "sweep.csv")
    assert list(rows[0]) == ["schema_version", "train_shot", "test_shot", "accuracy", "std",
                             "ci95", "episodes"]
    keys = [(int(r["train_shot"]), int(r["test_shot"])) for r in rows]
    assert keys == [(1, 1), (1, 5), (5, 1), (5, 5)]
    assert (out / "train_shot_5" / "checkpoint.json").exists()


def test_sweep_qp_iters_csv(tmp_path, trained):
    code, out = run(tmp_path, "sweep-qp-iters", "--checkpoint", str(trained / "checkpoint.json"),
                    "--set", "eval.shots=[1]")
    assert code == 0
    rows = read_csv(out / "sweep.csv")
    assert [r["qp_iteration_cap"] for r in rows] == ["1", "3", "converged"]
    assert all(r["schema_version"] == "1" for r in rows)


def test_compare_learners_table_and_timing_order(tmp_path):
    code, out = run(tmp_path, "compare-learners", "--set", "eval.shots=[5]")
    assert code == 0
    rows = {r["learner"]: r for r in read_csv(out / "sweep.csv")}
    assert list(rows) == ["nearest_class_mean", "ridge", "svm_cs"]
    ms = {k: float(r["solver_ms"]) for k, r in rows.items()}
    assert ms["svm_cs"] >= ms["ridge"] >= ms["nearest_class_mean"]
    assert all(int(r["timing_episodes"]) >= 200 for r in rows.values())


def test_selftest_exits_zero(tmp_path, capsys):
    code, out = run(tmp_path, "selftest")
    assert code == 0
    lines = [l for l in capsys.readouterr().out.splitlines() if l.startswith(("PASS", "FAIL"))]
    assert lines and all(l.startswith("PASS") for l in lines)
    assert json.loads((out / "summary.json").read_text())["results"]["passed"]


def test_failure_writes_error_json(tmp_path, capsys):
    code, out = run(tmp_path, "train", "--set", "meta.learner.kind=logistic")
    assert code == 2
    doc = json.loads((out / "error.json").read_text())
    assert doc["error"] == "ValueError" and doc["command"] == "train"
    assert "logistic" in doc["message"] and doc["schema_version"] == 1
    assert json.loads(capsys.readouterr().err.strip().splitlines()[-1])["error"] == "ValueError"


def test_missing_dataset_file_is_structured_error(tmp_path):
    code, out = run(tmp_path, "eval", "--set", f"data.path={tmp_path / 'nope.csv'}")
    assert code == 2
    doc = json.loads((out / "error.json").read_text())
    assert doc["error"] == "FileNotFoundError" and doc["seed"] == 3
    assert doc["config"]["data"]["path"].endswith("nope.csv")


def test_seed_flag_overrides_config(tmp_path):
    out = tmp_path / "g"
    assert cli.main(["gen-data", "--config", TINY, "--out", str(out), "--seed", "11", "-q"]) == 0
    assert json.loads((out / "summary.json").read_text())["seed"] == 11
