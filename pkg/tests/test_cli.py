import json

import numpy as np
import pytest
from click.testing import CliRunner

from taed import cli, data
from taed.model import Model, ModelConfig, save_checkpoint


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def workdir(tmp_path, runner):
    """A tiny dataset plus a matching random checkpoint."""
    task = data.SynthTaskConfig(vocab_size=10, feature_dim=6,
                                duration_range=(3, 5), utterance_length_range=(2, 4))
    utts = data.generate(task, 6, seed=0)
    data_path = tmp_path / "set.jsonl"
    data.save(utts, str(data_path), task)
    cfg = ModelConfig(feature_dim=6, d_model=16, n_heads=2, encoder_layers=1,
                      decoder_layers=1, ffn_dim=24, vocab_size=10)
    ckpt = tmp_path / "model.ckpt"
    save_checkpoint(Model(cfg, seed=0), str(ckpt))
    return tmp_path, str(data_path), str(ckpt)


def test_generate_data_roundtrip(tmp_path, runner):
    out = tmp_path / "gen.jsonl"
    vocab = tmp_path / "vocab.txt"
    result = runner.invoke(cli.main, [
        "generate-data", "--out", str(out), "--count", "4", "--seed", "9",
        "--vocab-size", "8", "--feature-dim", "5", "--vocab-out", str(vocab),
    ])
    assert result.exit_code == 0, result.output
    utts, cfg = data.load(str(out))
    assert len(utts) == 4 and cfg.vocab_size == 8
    assert len(data.read_vocab(str(vocab))) == 8


def test_generate_data_config_error(tmp_path, runner):
    result = runner.invoke(cli.main, [
        "generate-data", "--out", str(tmp_path / "x.jsonl"), "--vocab-size", "2",
    ])
    assert result.exit_code == 2


def test_train_and_eval_smoke(workdir, runner):
    tmp_path, data_path, _ = workdir
    out_dir = tmp_path / "run"
    result = runner.invoke(cli.main, [
        "train", "--data", data_path, "--out", str(out_dir),
        "--max-updates", "3", "--batch", "2", "--lr", "0.001", "--seed", "1",
    ])
    assert result.exit_code == 0, result.output
    ckpts = sorted(out_dir.glob("ckpt_*.ckpt"))
    assert ckpts
    report = tmp_path / "rep"
    result = runner.invoke(cli.main, [
        "eval", "--ckpt", str(ckpts[-1]), "--data", data_path,
        "--report", str(report),
    ])
    assert result.exit_code == 0, result.output
    assert (tmp_path / "rep.jsonl").exists()
    rows = [json.loads(l) for l in open(tmp_path / "rep.jsonl")]
    assert rows[0]["kind"] == "corpus"


def test_train_with_yaml_config(workdir, runner):
    tmp_path, data_path, _ = workdir
    cfg_file = tmp_path / "conf.yaml"
    cfg_file.write_text(
        "model:\n  d_model: 16\n  n_heads: 2\n  encoder_layers: 1\n"
        "  decoder_layers: 1\n  ffn_dim: 24\n"
        "train:\n  max_updates: 2\n  batch_utterances: 2\n  checkpoint_every: 2\n"
    )
    result = runner.invoke(cli.main, [
        "train", "--data", data_path, "--out", str(tmp_path / "run2"),
        "--config", str(cfg_file),
    ])
    assert result.exit_code == 0, result.output
    manifest = json.loads((tmp_path / "run2" / "run.json").read_text())
    assert manifest["train_config"]["max_updates"] == 2
    assert manifest["model_config"]["d_model"] == 16


def test_train_rejects_unknown_config_key(workdir, runner):
    tmp_path, data_path, _ = workdir
    cfg_file = tmp_path / "bad.yaml"
    cfg_file.write_text("train:\n  learning_rate_typo: 1\n")
    result = runner.invoke(cli.main, [
        "train", "--data", data_path, "--out", str(tmp_path / "r"),
        "--config", str(cfg_file),
    ])
    assert result.exit_code == 2


def test_stream_eval_and_traces(workdir, runner):
    tmp_path, data_path, ckpt = workdir
    traces = tmp_path / "traces"
    result = runner.invoke(cli.main, [
        "stream-eval", "--ckpt", ckpt, "--data", data_path,
        "--chunk-ms", "80", "--tau", "0.5", "--traces", str(traces),
        "--report", str(tmp_path / "srep"),
    ])
    assert result.exit_code == 0, result.output
    assert list(traces.glob("*.trace.jsonl"))
    assert "AL" in result.output


def test_stream_eval_rejects_tiny_chunk(workdir, runner):
    _, data_path, ckpt = workdir
    result = runner.invoke(cli.main, [
        "stream-eval", "--ckpt", ckpt, "--data", data_path, "--chunk-ms", "1",
    ])
    assert result.exit_code == 2


def test_sweep_tau_table(workdir, runner):
    tmp_path, data_path, ckpt = workdir
    out = tmp_path / "sweep.jsonl"
    result = runner.invoke(cli.main, [
        "sweep-tau", "--ckpt", ckpt, "--data", data_path,
        "--chunk-ms", "120", "--out", str(out),
    ])
    assert result.exit_code == 0, result.output
    rows = [json.loads(l) for l in open(out)]
    assert len(rows) == 9
    assert [r["tau"] for r in rows] == [0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0]
    assert "best tau" in result.output


def test_sweep_chunk_rows(workdir, runner):
    tmp_path, data_path, ckpt = workdir
    result = runner.invoke(cli.main, [
        "sweep-chunk", "--ckpt", ckpt, "--data", data_path,
        "--chunks-ms", "80,160",
    ])
    assert result.exit_code == 0, result.output
    assert "chunk_frames" in result.output


def test_average_ckpt_cli(workdir, runner, tmp_path):
    _, _, ckpt = workdir
    out = tmp_path / "avg.ckpt"
    result = runner.invoke(cli.main, ["average-ckpt", ckpt, ckpt, "--out", str(out)])
    assert result.exit_code == 0, result.output
    assert out.read_bytes() == open(ckpt, "rb").read()


def test_inspect_alignment_table(runner):
    result = runner.invoke(cli.main, [
        "inspect-alignment", "--t-prime", "10", "--u", "5", "--speedup", "2.0",
    ])
    assert result.exit_code == 0, result.output
    lines = [l for l in result.output.splitlines() if l.strip()]
    assert len(lines) == 2 + 5  # header + rule + one row per token


def test_inspect_alignment_with_lattice(workdir, runner):
    _, data_path, ckpt = workdir
    result = runner.invoke(cli.main, [
        "inspect-alignment", "--t-prime", "6", "--u", "3",
        "--ckpt", ckpt, "--data", data_path, "--utterance", "1",
    ])
    assert result.exit_code == 0, result.output
    assert "lattice argmax emission frames" in result.output


def test_inspect_alignment_bad_speedup(runner):
    result = runner.invoke(cli.main, [
        "inspect-alignment", "--t-prime", "10", "--u", "5", "--speedup", "-1",
    ])
    assert result.exit_code == 2
