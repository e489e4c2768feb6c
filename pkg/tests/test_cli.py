"""End-to-end command line: exit codes, artifacts, reproducibility."""

import os

import pytest

from cmt.cli import main
from cmt.config import ModelConfig, TrainConfig, format_config


def _write_config(path, mcfg=None, **tkw):
    tcfg = TrainConfig(**{
        "pretrain_steps": 30, "pretrain_lr": 1e-3, "epochs": 2, "valid_interval": 10,
        "batch_size": 4, "grad_accum": 1, "lr": 1e-3, "window": 2, **tkw,
    })
    path.write_text(format_config(mcfg or ModelConfig(), tcfg))
    return str(path)


def test_usage_errors_exit_2():
    with pytest.raises(SystemExit) as exc:
        main(["no-such-command"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["train", "--train", "x", "--valid", "y"])  # missing --checkpoint
    assert exc.value.code == 2


def test_runtime_error_is_one_line_exit_1(tmp_path, capsys):
    rc = main(["answer", "--checkpoint", str(tmp_path / "missing.cmtw"),
               "--bank", str(tmp_path / "x.cmtb"), "what is the code for amber fox ?"])
    assert rc == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error: FileNotFoundError:")


def test_gen_data_deterministic(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert main(["gen-data", "--seed", "7", "--docs", "8", "--valid-docs", "4",
                     "--test-docs", "4", "--pretrain-docs", "16", "--out-dir", str(d)]) == 0
    out = capsys.readouterr().out
    assert "wrote 8 records" in out
    for name in ("train.jsonl", "valid.jsonl", "test.jsonl", "pretrain.jsonl"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


@pytest.fixture(scope="module")
def recipe(tmp_path_factory):
    """pretrain-base -> gen-data -> train -> adapt, shared by the later stages."""
    root = tmp_path_factory.mktemp("recipe")
    cfg = _write_config(root / "desk.cfg")
    assert main(["gen-data", "--seed", "0", "--docs", "8", "--valid-docs", "4",
                 "--test-docs", "4", "--pretrain-docs", "16", "--out-dir", str(root)]) == 0
    assert main(["pretrain-base", "--config", cfg, "--train", str(root / "pretrain.jsonl"),
                 "--out-dir", str(root)]) == 0
    assert main(["train", "--config", cfg, "--checkpoint", str(root / "base.cmtw"),
                 "--train", str(root / "train.jsonl"), "--valid", str(root / "valid.jsonl"),
                 "--out-dir", str(root)]) == 0
    assert main(["adapt", "--checkpoint", str(root / "trained.cmtw"),
                 "--stream", str(root / "test.jsonl"), "--bank", str(root / "test.cmtb")]) == 0
    return root, cfg


def test_recipe_artifacts_exist(recipe):
    root, _ = recipe
    for name in ("base.cmtw", "trained.cmtw", "train_log.csv", "valid_log.csv", "test.cmtb"):
        assert (root / name).stat().st_size > 0


def test_eval_and_baseline(recipe, capsys):
    root, _ = recipe
    assert main(["eval", "--checkpoint", str(root / "trained.cmtw"),
                 "--bank", str(root / "test.cmtb"), "--qa", str(root / "test.jsonl"),
                 "--out-dir", str(root)]) == 0
    out = capsys.readouterr().out
    assert "resolved config:" in out and "n 4 em" in out
    assert (root / "qa_report.csv").exists()
    assert main(["eval", "--checkpoint", str(root / "trained.cmtw"), "--baseline",
                 "--qa", str(root / "test.jsonl"), "--out-dir", str(root)]) == 0


def test_answer_and_window_resolution(recipe, capsys):
    root, _ = recipe
    rec_q = "what is the code for amber fox ?"
    assert main(["answer", "--checkpoint", str(root / "trained.cmtw"),
                 "--bank", str(root / "test.cmtb"), "--window", "3", rec_q]) == 0
    out = capsys.readouterr().out
    assert "window=3" in out
    assert main(["answer", "--checkpoint", str(root / "trained.cmtw"),
                 "--bank", str(root / "test.cmtb"), "--window", "0", rec_q]) == 0
    assert "window=all" in capsys.readouterr().out


def test_inspect_bank(recipe, capsys):
    root, _ = recipe
    assert main(["inspect-bank", "--bank", str(root / "test.cmtb")]) == 0
    out = capsys.readouterr().out
    assert "k=8 d=32 count=4" in out


def test_retention_and_robustness_commands(recipe, capsys):
    root, _ = recipe
    assert main(["retention", "--checkpoint", str(root / "trained.cmtw"),
                 "--stream", str(root / "test.jsonl"), "--positions", "2,4", "--probe", "2",
                 "--window", "2", "--out-dir", str(root)]) == 0
    assert (root / "retention.csv").exists()
    assert main(["robustness", "--checkpoint", str(root / "trained.cmtw"),
                 "--qa", str(root / "test.jsonl"), "--ratio-list", "0,0.5",
                 "--window", "2", "--out-dir", str(root)]) == 0
    out = capsys.readouterr().out
    assert "ratio 0.0: relative f1 1.0000" in out
    assert (root / "robustness.csv").exists()


def test_config_architecture_mismatch(recipe, tmp_path, capsys):
    root, _ = recipe
    other = _write_config(tmp_path / "other.cfg", mcfg=ModelConfig(d_model=16))
    rc = main(["eval", "--checkpoint", str(root / "trained.cmtw"), "--config", other,
               "--bank", str(root / "test.cmtb"), "--qa", str(root / "test.jsonl"),
               "--out-dir", str(tmp_path)])
    assert rc == 1
    assert "error: ConfigError: config file architecture differs" in capsys.readouterr().err
