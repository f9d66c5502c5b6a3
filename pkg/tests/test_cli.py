import csv
import json

import pytest

from attnprune import cli

SMALL = ["--n", "160", "--n-test", "80", "--noise", "0.5"]


def test_count_vgg16_summary(capsys):
    assert cli.run(["count", "--arch", "vgg16"]) == 0
    assert capsys.readouterr().out.strip() == "138.36M params, 30.94B FLOPs"


def test_count_fma_table_and_json(tmp_path, capsys):
    assert cli.run(["count", "--arch", "resnet50", "--fma", "--json", "r.json", "--out-dir", str(tmp_path)]) == 0
    assert "3.86B FLOPs" in capsys.readouterr().out
    doc = json.loads((tmp_path / "r.json").read_text())
    assert doc["fma_mode"] is True
    assert cli.run(["count", "--arch", "tiny_cnn", "--table"]) == 0
    assert "conv3" in capsys.readouterr().out


def test_usage_errors_exit_2(capsys):
    assert cli.run(["no-such-command"]) == 2
    assert cli.run(["solve", "--ratio", "0.5"]) == 2


def test_runtime_errors_are_structured(tmp_path, capsys):
    assert cli.run(["eval", "--model", str(tmp_path / "missing.model")]) == 1
    err = capsys.readouterr().err.strip()
    assert err.startswith("error: kind=") and "command=eval" in err and 'message="' in err
    (tmp_path / "s.json").write_text("[]")
    assert cli.run(["solve", "--stats", str(tmp_path / "s.json"), "--ratio", "0.3"]) == 1
    assert "kind=format" in capsys.readouterr().err


def test_stepwise_workflow(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path))
    steps = [
        ["train-base", "--arch", "tiny_cnn", "--epochs", "2", "--lr", "0.05", *SMALL],
        ["attach", "--model", str(tmp_path / "base.model")],
        ["train-attn", "--model", str(tmp_path / "attn.model"), "--epochs", "2", "--decay-every", "1", *SMALL],
        ["stats", "--model", str(tmp_path / "attn.model"), *SMALL],
        ["solve", "--stats", str(tmp_path / "stats.json"), "--ratio", "0", "-o", "zero.json"],
        ["solve", "--stats", str(tmp_path / "stats.json"), "--ratio", "0.3"],
        ["prune", "--model", str(tmp_path / "base.model"), "--masks", str(tmp_path / "masks.json")],
        ["finetune", "--model", str(tmp_path / "pruned.model"), "--epochs", "1", *SMALL],
        ["eval", "--model", str(tmp_path / "finetuned.model"), *SMALL],
        ["report", "--stats", str(tmp_path / "stats.json"), "--grid", "50"],
    ]
    outputs = []
    for argv in steps:
        assert cli.run(argv) == 0, argv
        outputs.append(capsys.readouterr().out)
    assert "t*=0 " in outputs[4] and "pruned=0/24" in outputs[4]
    assert json.loads(outputs[8])["top1"] > 0.25
    for name in ("base.model", "attn.model", "stats.json", "masks.json", "pruned.model", "surgery_report.json", "report.csv"):
        assert (tmp_path / name).exists(), name
    rows = list(csv.reader(open(tmp_path / "report.csv")))
    assert rows[0] == ["kind", "layer", "index", "x", "value"]
    assert len(rows) - 1 == 8 + 16 + 50
    report = json.loads((tmp_path / "surgery_report.json").read_text())
    assert report["params_removed"] > 0


def test_run_all_small_config_is_deterministic(tmp_path, capsys):
    cfg = {
        "dataset": {"n_train": 200, "n_test": 100},
        "base": {"epochs": 2},
        "attention": {"epochs": 2, "decay_every": 1},
        "finetune": {"epochs": 1},
    }
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    manifests = []
    for run in ("a", "b"):
        argv = ["run-all", "--config", str(tmp_path / "c.json"), "--seed", "3", "--out-dir", str(tmp_path / run)]
        assert cli.run(argv) == 0
        manifests.append((tmp_path / run / "manifest.json").read_bytes())
    assert manifests[0] == manifests[1]
    assert json.loads(manifests[0])["config"]["seed"] == 3
