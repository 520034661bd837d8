import json

import numpy as np
import pytest

from hogwild_gnn.cli import main
from hogwild_gnn.nn import load_checkpoint, save_checkpoint


@pytest.fixture
def data(tmp_path, monkeypatch):
    monkeypatch.setenv("HOGWILD_GNN_DATA", str(tmp_path / "data"))
    return tmp_path


def run(*argv):
    return main([str(a) for a in argv])


def test_gen_writes_dataset_and_reports_counts(data, capsys):
    assert run("gen", "--task", "count", "--max-n", 6, "--folds", 2) == 0
    out = capsys.readouterr().out
    assert "count: 6 graphs, nodes 1-6" in out
    root = data / "data" / "count"
    assert len(list((root / "graphs").glob("*.json"))) == 6
    assert sorted(p.name for p in (root / "splits").iterdir()) == ["0.json", "1.json"]


def test_gen_reads_config_and_flags_win(data):
    cfg = data / "c.json"
    cfg.write_text(json.dumps({"task": "sum", "params": {"count": 7, "n": 4}, "folds": 1}))
    assert run("gen", "--config", cfg, "--count", 5, "--out", data / "s") == 0
    assert json.loads((data / "s" / "meta.json").read_text())["count"] == 5


def test_missing_dataset_is_a_usage_error(data, capsys):
    assert run("train", "--task", "sum", "--model", "gcn") == 2
    assert "dataset not found" in capsys.readouterr().err


def test_bad_config_is_a_usage_error(data, capsys):
    bad = data / "bad.json"
    bad.write_text("{not json")
    assert run("gen", "--config", bad) == 2
    assert run("gen", "--config", data / "nope.json") == 2
    assert run("gen", "--task", "sum", "--n", 0) == 2


def trained(data, model="ignn", epochs=0):
    run("gen", "--task", "sum", "--count", 10, "--n", 5, "--folds", 1)
    out = data / "runs"
    assert run("train", "--task", "sum", "--model", model, "--epochs", epochs, "--out", out) == 0
    return out, out / f"{model}_fold0_seed0.ckpt.json"


def test_zero_epoch_train_writes_record(data, capsys):
    out, ckpt = trained(data)
    assert ckpt.is_file()
    rec = json.loads((out / "ignn_fold0_seed0.record.json").read_text())
    assert rec["epoch_losses"] == [] and rec["status"] == "ok" and rec["final_metric"] is not None
    assert "ignn sum fold=0 seed=0 status=ok" in capsys.readouterr().out


def test_eval_sync_is_reproducible(data):
    out, ckpt = trained(data, "gcn", epochs=2)
    assert run("eval", "--checkpoint", ckpt, "--task", "sum", "--out", data / "e1") == 0
    assert run("eval", "--checkpoint", ckpt, "--task", "sum", "--out", data / "e2") == 0
    a = (data / "e1" / "gcn_fold0_seed0.eval_sync.json").read_bytes()
    assert a == (data / "e2" / "gcn_fold0_seed0.eval_sync.json").read_bytes()
    # without --task or --data the checkpoint's own task is used
    assert run("eval", "--checkpoint", ckpt, "--out", data / "e3") == 0
    assert a == (data / "e3" / "gcn_fold0_seed0.eval_sync.json").read_bytes()


def test_eval_async_writes_csv_and_json(data):
    out, ckpt = trained(data, "ignn")
    assert run("eval", "--checkpoint", ckpt, "--task", "sum", "--mode", "async", "--async-seeds", "0-2",
               "--S", 2, "--D", 1) == 0
    doc = json.loads((out / "ignn_fold0_seed0.eval_async.json").read_text())
    assert doc["S"] == 2 and doc["D"] == 1 and doc["audit_violations"] == 0 and len(doc["deviation"]) == 3
    rows = (out / "ignn_fold0_seed0.eval_async.csv").read_text().splitlines()
    assert rows[0] == "seed,sync_metric,async_metric,deviation" and len(rows) == 4


def test_checkpoint_mismatch_is_a_usage_error(data, capsys):
    out, ckpt = trained(data, "ignn")
    assert run("eval", "--checkpoint", ckpt, "--task", "sum", "--model", "gcn") == 2
    params, meta = load_checkpoint(ckpt)
    params.pop(next(iter(params)))
    save_checkpoint(data / "broken.ckpt.json", params, meta)
    assert run("eval", "--checkpoint", data / "broken.ckpt.json", "--task", "sum") == 2
    assert run("eval", "--checkpoint", data / "absent.ckpt.json", "--task", "sum") == 2
    run("gen", "--task", "count", "--max-n", 4, "--folds", 1)
    assert run("eval", "--checkpoint", ckpt, "--task", "count") == 2
    assert "does not fit" in capsys.readouterr().err


def test_report(data, capsys):
    empty = data / "empty"
    empty.mkdir()
    assert run("report", empty) == 2
    out, ckpt = trained(data, "ignn")
    assert run("report", out) == 0
    rows = (out / "report.csv").read_text().splitlines()
    assert rows[0] == "task,model,runs,failed,test_metric,async_deviation" and len(rows) == 2
    run("gen", "--task", "count", "--max-n", 6, "--folds", 1)
    assert run("train", "--task", "count", "--model", "gcn", "--epochs", 0, "--out", out) == 0
    capsys.readouterr()
    assert run("report", out) == 0
    text = capsys.readouterr().out
    assert "## count" in text and "## sum" in text
    assert len((out / "report.csv").read_text().splitlines()) == 3


def test_numeric_failure_exit_code(data, monkeypatch):
    import hogwild_gnn.training as tr
    from hogwild_gnn.errors import NumericError

    def boom(*a, **k):
        raise NumericError("diverged")

    monkeypatch.setattr(tr, "train_epoch_grads", boom)
    run("gen", "--task", "sum", "--count", 6, "--n", 4, "--folds", 1)
    assert run("train", "--task", "sum", "--model", "ignn", "--epochs", 2, "--out", data / "r") == 3
    rec = json.loads((data / "r" / "ignn_fold0_seed0.record.json").read_text())
    assert rec["status"].startswith("failed")


def test_argparse_rejects_unknown_model(data):
    with pytest.raises(SystemExit) as exc:
        run("train", "--task", "sum", "--model", "mystery")
    assert exc.value.code == 2
