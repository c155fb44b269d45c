import json
import subprocess
import sys

import pytest

from radtex.cli import main

SMALL = {"backbone": {"widths": [4, 8, 8, 8], "blocks": [1, 1, 1, 1]},
         "textual": {"width": 16, "layers": 1, "heads": 2, "ffn": 32, "dropout": 0.0}}


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("gen-data", "--n", 40, "--seed", 7, "--canvas", 32, "--out", root / "data") == 0
    assert run("gen-data", "--n", 30, "--seed", 8, "--canvas", 32, "--out", root / "test") == 0
    (root / "pre.json").write_text(json.dumps({"model": SMALL, "epochs": 1, "batch_size": 8, "vocab_size": 120}))
    assert run("pretrain", "--config", root / "pre.json", "--data", root / "data", "--out", root / "pre") == 0
    return root


def test_gen_data_layout(workspace):
    data = workspace / "data"
    assert (data / "reports.jsonl").exists()
    assert len(list(data.rglob("*.pgm"))) == 40
    resolved = json.loads((data / "config.resolved.json").read_text())
    assert resolved["command"] == "gen-data" and resolved["synth"]["canvas"] == 32


def test_gen_data_deterministic(workspace, tmp_path):
    assert run("gen-data", "--n", 40, "--seed", 7, "--canvas", 32, "--out", tmp_path) == 0
    assert (tmp_path / "reports.jsonl").read_bytes() == (workspace / "data" / "reports.jsonl").read_bytes()


def test_pretrain_outputs(workspace):
    pre = workspace / "pre"
    assert (pre / "model.ckpt").exists()
    assert (pre / "loss.csv").read_text().startswith("epoch,step,lr,loss\n")
    resolved = json.loads((pre / "config.resolved.json").read_text())
    assert resolved["mode"] == "pretrain" and resolved["epochs"] == 1 and resolved["loss"] == "caption"


def test_rerun_from_resolved_config(workspace, tmp_path):
    assert run("pretrain", "--config", workspace / "pre" / "config.resolved.json", "--out", tmp_path) == 0
    assert (tmp_path / "model.ckpt").read_bytes() == (workspace / "pre" / "model.ckpt").read_bytes()
    assert (tmp_path / "loss.csv").read_bytes() == (workspace / "pre" / "loss.csv").read_bytes()


def test_flags_override_config(workspace, tmp_path):
    assert run("pretrain", "--config", workspace / "pre.json", "--data", workspace / "data", "--epochs", 2,
               "--seed", 5, "--out", tmp_path) == 0
    resolved = json.loads((tmp_path / "config.resolved.json").read_text())
    assert resolved["epochs"] == 2 and resolved["seed"] == 5 and resolved["batch_size"] == 8


def test_train_vocab(workspace, tmp_path):
    assert run("train-vocab", "--data", workspace / "data", "--vocab-size", 100, "--out", tmp_path) == 0
    pieces = (tmp_path / "vocab.txt").read_text().split("\n")
    assert pieces[:5] == ["[PAD]", "[UNK]", "[SOS]", "[EOS]", "[MASK]"]


def test_transfer_and_caption(workspace, tmp_path):
    code = run("transfer", "--mode", "frozen", "--init", workspace / "pre" / "model.ckpt", "--data",
               workspace / "data", "--test-data", workspace / "test", "--epochs", 1, "--trials", 2,
               "--n-train", 20, "--out", tmp_path / "t")
    assert code == 0
    lines = (tmp_path / "t" / "results.csv").read_text().splitlines()
    assert lines[0].startswith("task,mode,pretrain_fraction,n_train,trial,auc,aucpr,macro_f1")
    assert len(lines) == 3
    assert (tmp_path / "t" / "classifier_1.ckpt").exists()
    assert run("caption", "--checkpoint", workspace / "pre" / "model.ckpt", "--data", workspace / "test",
               "--limit", 3, "--out", tmp_path / "c") == 0
    rows = [json.loads(x) for x in (tmp_path / "c" / "captions.jsonl").read_text().splitlines()]
    assert len(rows) == 3 and set(rows[0]) == {"id", "generated", "reference"}


def test_bench(workspace, tmp_path):
    spec = {"modes": ["frozen"], "n_train": [10], "fractions": [1.0], "trials": 2, "synth": {"canvas": 32},
            "n_pretrain": 16, "n_downstream": 30, "n_test": 30, "model": SMALL,
            "pretrain": {"epochs": 1, "batch_size": 8, "vocab_size": 120},
            "transfer": {"frozen": {"epochs": 1, "batch_size": 8}}}
    (tmp_path / "exp.json").write_text(json.dumps(spec))
    assert run("bench", "--spec", tmp_path / "exp.json", "--out", tmp_path / "r") == 0
    assert len((tmp_path / "r" / "results.csv").read_text().splitlines()) == 3
    assert (tmp_path / "r" / "pathology9.svg").exists()


def test_grad_check_subset(capsys):
    assert run("grad-check", "--instances", 2, "--ops", "matmul,conv2d") == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "op,instances,max_rel_err,passed" and len(out) == 3
    assert all(line.endswith(",1") for line in out[1:])


def test_frozen_without_init_is_config_error(workspace, tmp_path, capsys):
    assert run("transfer", "--mode", "frozen", "--data", workspace / "data", "--out", tmp_path) == 3
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("radtex: error: config:")


@pytest.mark.parametrize("argv", [["frobnicate"], ["pretrain", "--no-such-flag"], []])
def test_usage_errors(argv, capsys):
    assert main(argv) == 2
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("radtex: error: usage:")


def test_bad_config_file(tmp_path):
    (tmp_path / "bad.json").write_text("{not json")
    assert run("pretrain", "--config", tmp_path / "bad.json", "--out", tmp_path) == 3
    assert run("pretrain", "--config", tmp_path / "missing.json", "--out", tmp_path) == 3


def test_unknown_grad_op():
    assert run("grad-check", "--ops", "nonsense") == 3


def test_threads_env_fallback(workspace, tmp_path, monkeypatch):
    monkeypatch.setenv("RADTEX_THREADS", "zero")
    assert run("gen-data", "--n", 2, "--out", tmp_path) == 3


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "radtex.cli", "gen-data", "--n", "3", "--canvas", "32",
                           "--out", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert json.loads(proc.stdout)["examples"] == 3
