import csv
import json

import pytest

from llmkt.cli import EXIT_OK, EXIT_USER, main

TINY = {
    "dtype": "float64",
    "synth": {"n_students": 12, "n_questions": 8, "n_concepts": 3, "interactions_per_student": 14},
    "seq": {"dim": 8, "hidden": 8, "epochs": 2},
    "kt": {"L": 6, "lm": {"dim": 16, "n_layers": 1, "n_heads": 2}, "context": {"dim": 8, "n_heads": 2},
           "train": {"epochs": 1, "batch_size": 16, "lr": 3e-3}},
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "config.json"
    cfg.write_text(json.dumps(TINY))
    assert main(["synth", "--config", str(cfg), "--out", str(root / "data")]) == EXIT_OK
    return root, cfg


def _csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_unknown_flag_is_user_error(capsys):
    assert main(["train", "--out", "x", "--bogus"]) == EXIT_USER
    assert "--bogus" in capsys.readouterr().err


def test_missing_subcommand_is_user_error():
    assert main([]) == EXIT_USER


def test_help_exits_zero(capsys):
    assert main(["--help"]) == EXIT_OK
    assert "sweep-merge" in capsys.readouterr().out


def test_eval_without_checkpoint_names_artifact(workspace, tmp_path, capsys):
    root, cfg = workspace
    code = main(["eval", "--config", str(cfg), "--data", str(root / "data"), "--out", str(tmp_path)])
    assert code == EXIT_USER
    assert "missing artifact" in capsys.readouterr().err


def test_eval_missing_checkpoint_file(workspace, tmp_path, capsys):
    root, cfg = workspace
    (tmp_path / "ck").mkdir()
    code = main(["eval", "--config", str(cfg), "--data", str(root / "data"), "--checkpoint",
                 str(tmp_path / "ck"), "--out", str(tmp_path)])
    assert code == EXIT_USER
    assert "manifest.json" in capsys.readouterr().err


def test_unknown_config_key_is_user_error(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"kt": {"L": 5}, "colour": "blue"}))
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_USER
    assert "colour" in capsys.readouterr().err
    cfg.write_text(json.dumps({"kt": {"not_a_field": 1}}))
    assert main(["prepare", "--config", str(cfg), "--data", "nowhere", "--out", str(tmp_path)]) == EXIT_USER


def test_missing_data_is_user_error(tmp_path, capsys):
    assert main(["prepare", "--data", str(tmp_path / "none.csv"), "--out", str(tmp_path)]) == EXIT_USER
    assert "not found" in capsys.readouterr().err


def test_synth_is_byte_identical(workspace, tmp_path):
    root, cfg = workspace
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_OK
    for name in ("interactions.csv", "questions.csv", "concepts.csv"):
        if (root / "data" / name).exists():
            assert (tmp_path / name).read_bytes() == (root / "data" / name).read_bytes()


def test_prepare_train_eval_roundtrip(workspace, tmp_path):
    root, cfg = workspace
    data = str(root / "data")
    assert main(["prepare", "--config", str(cfg), "--data", data, "--out", str(tmp_path / "prep")]) == EXIT_OK
    summary = json.loads((tmp_path / "prep" / "summary.json").read_text())
    assert summary["students"] == 12 and summary["L"] == 6
    assert main(["train-seq", "--config", str(cfg), "--data", data, "--out", str(tmp_path / "seq")]) == EXIT_OK
    assert main(["train", "--config", str(cfg), "--data", data, "--split", str(tmp_path / "prep"),
                 "--embeddings", str(tmp_path / "seq"), "--out", str(tmp_path / "run")]) == EXIT_OK
    run = tmp_path / "run"
    metrics = json.loads((run / "metrics.json").read_text())
    frozen = json.loads((run / "frozen_checksums.json").read_text())
    assert frozen["before"] == frozen["after"]
    assert main(["eval", "--config", str(cfg), "--data", data, "--checkpoint", str(run),
                 "--split", str(run), "--out", str(tmp_path / "ev")]) == EXIT_OK
    again = json.loads((tmp_path / "ev" / "metrics.json").read_text())
    assert again["auc"] == metrics["auc"] and again["n"] == metrics["n"]
    assert _csv(tmp_path / "ev" / "metrics.csv")[0][:4] == ["run", "auc", "acc", "n"]


def test_ablate_writes_variant_table(workspace, tmp_path):
    root, cfg = workspace
    assert main(["ablate", "--config", str(cfg), "--data", str(root / "data"), "--out", str(tmp_path)]) == EXIT_OK
    rows = _csv(tmp_path / "ablation.csv")
    assert rows[0] == ["variant", "auc", "acc", "n"]
    assert [r[0] for r in rows[1:]] == ["full", "-Question", "-Concept", "-Sequence", "-Context"]
