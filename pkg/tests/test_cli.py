import csv
import json

import numpy as np
import pytest

from fairguard.cli import main
from fairguard.datasets import biased_schema, synthetic_biased
from fairguard.network import NetworkSpec, save_model
from fairguard.schema import write_dataset


@pytest.fixture
def corpus(tmp_path):
    (tmp_path / "schema.json").write_text(json.dumps(biased_schema().to_json()))
    train, test = synthetic_biased(300, seed=2).split(0.2, seed=0)
    write_dataset(train, tmp_path / "train.csv")
    write_dataset(test, tmp_path / "test.csv")
    return tmp_path


def run(corpus, *args):
    return main([args[0], "--schema", str(corpus / "schema.json"), *map(str, args[1:])])


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def unfair(path):
    # accepts group b regardless of the other features
    net = NetworkSpec([np.array([[0.0, 0.0, -4.0, 4.0]])], [np.array([0.0])])
    save_model(net, path)
    return path


def blind(path):
    net = NetworkSpec([np.array([[2.0, 2.0, 0.0, 0.0]])], [np.array([-2.0])])
    save_model(net, path)
    return path


def test_pretrain_writes_model_and_is_reproducible(corpus):
    for out in ("a", "b"):
        code = run(corpus, "pretrain", "--data", corpus / "train.csv", "--seed", 7, "--epochs", 5,
                   "--hidden", "6", "--out", corpus / out, "--no-timings")
        assert code == 0
    a, b = (corpus / d / "model.json" for d in "ab")
    assert a.read_bytes() == b.read_bytes()
    assert (corpus / "a" / "pretrain_log.jsonl").read_bytes() == (corpus / "b" / "pretrain_log.jsonl").read_bytes()
    manifest = json.loads((corpus / "a" / "manifest.json").read_text())
    assert manifest["command"] == "pretrain" and len(manifest["inputs"]["data"]) == 64


def test_missing_schema_names_path(corpus, capsys):
    code = main(["pretrain", "--schema", str(corpus / "nope.json"), "--data", str(corpus / "train.csv")])
    assert code == 2
    assert "nope.json" in capsys.readouterr().err


def test_verify_exit_codes(corpus):
    code = run(corpus, "verify", "--model", blind(corpus / "blind.json"), "--data", corpus / "test.csv",
               "--out", corpus / "v1")
    assert code == 0
    assert json.loads((corpus / "v1" / "verify.json").read_text())["summary"]["ce_rate"] == 0
    code = run(corpus, "verify", "--model", unfair(corpus / "unfair.json"), "--data", corpus / "test.csv",
               "--out", corpus / "v2", "--max-violation")
    assert code == 1
    recs = rows(corpus / "v2" / "verify.csv")
    assert all(r["has_ce"] == "1" for r in recs)
    assert {r["ce_assignment"] for r in recs} == {"group=a", "group=b"}
    assert all(float(r["violation"]) > 0.9 for r in recs)


def test_predict_matches_oracle(corpus):
    model = corpus / "m.json"
    save_model(NetworkSpec.random([4, 8, 1], 3), model)
    assert run(corpus, "predict", "--model", model, "--data", corpus / "test.csv", "--out", corpus / "p") == 0
    assert run(corpus, "predict", "--model", model, "--data", corpus / "test.csv", "--out", corpus / "o",
               "--oracle") == 0
    got = [r["fair_label"] for r in rows(corpus / "p" / "predict.csv")]
    want = [r["fair_label"] for r in rows(corpus / "o" / "predict.csv")]
    assert got == want


def test_constant_model_never_flips(corpus):
    model = corpus / "c.json"
    save_model(NetworkSpec([np.zeros((1, 4))], [np.array([-1.0])]), model)
    assert run(corpus, "predict", "--model", model, "--data", corpus / "test.csv", "--out", corpus / "p") == 0
    assert json.loads((corpus / "p" / "predict_summary.json").read_text())["flip_rate"] == 0


def test_train_rejects_zero_epochs(corpus):
    code = run(corpus, "train", "--model", unfair(corpus / "u.json"), "--data", corpus / "train.csv",
               "--epochs", 0, "--out", corpus / "t")
    assert code == 2


def test_train_logs_one_line_per_epoch(corpus):
    code = run(corpus, "train", "--model", unfair(corpus / "u.json"), "--data", corpus / "train.csv",
               "--epochs", 2, "--batch-strategy", "ce", "--rho", 0.5, "--lr", 1e-2, "--out", corpus / "t")
    assert code == 0
    assert len((corpus / "t" / "train_log.jsonl").read_text().splitlines()) == 2
    assert sorted(p.name for p in (corpus / "t" / "checkpoints").iterdir()) == ["epoch_001.json", "epoch_002.json"]
    sel = json.loads((corpus / "t" / "selection.json").read_text())
    assert sel["chosen_epoch"] in (1, 2) and len(sel["epochs"]) == 2


def test_audit_fair_rows_are_clean(corpus):
    code = run(corpus, "audit", "--model", unfair(corpus / "u.json"), "--train-data", corpus / "train.csv",
               "--data", corpus / "test.csv", "--epochs", 2, "--lr", 3e-2, "--out", corpus / "a")
    assert code == 0
    table = {r["row"]: r for r in rows(corpus / "a" / "audit.csv")}
    assert set(table) == {"a", "b", "c", "d"}
    for row in "bd":
        assert float(table[row]["ce_rate"]) == 0 and float(table[row]["flip_rate"]) == 0
    assert float(table["c"]["ce_rate"]) <= float(table["a"]["ce_rate"])


def test_audit_needs_a_retraining_source(corpus):
    code = run(corpus, "audit", "--model", unfair(corpus / "u.json"), "--data", corpus / "test.csv",
               "--out", corpus / "a")
    assert code == 2


def test_bad_threshold_is_a_config_error(corpus):
    code = run(corpus, "verify", "--model", blind(corpus / "b.json"), "--data", corpus / "test.csv",
               "--threshold", 1.5)
    assert code == 2
