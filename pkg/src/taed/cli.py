"""Command-line surface.

Exit codes: 0 success, 2 configuration/usage error, 3 numeric failure.
Configuration comes from an optional YAML file plus flag overrides; flags
win over the file, the file wins over defaults.
"""

from __future__ import annotations

import dataclasses
import json
import sys

import click
import numpy as np
import yaml

from . import data as data_mod
from . import losses, metrics, trainer
from .autodiff import NumericError, Tensor
from .model import Model, ModelConfig, load_checkpoint
from .trainer import TrainConfig

EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _fail_config(msg: str):
    click.echo(f"config error: {msg}", err=True)
    sys.exit(EXIT_CONFIG)


def _load_yaml(path: str | None) -> dict:
    if not path:
        return {}
    try:
        with open(path, encoding="utf-8") as f:
            loaded = yaml.safe_load(f) or {}
    except (OSError, yaml.YAMLError) as e:
        _fail_config(f"cannot read {path}: {e}")
    if not isinstance(loaded, dict):
        _fail_config(f"{path} must hold a mapping")
    return loaded


def _build_config(cls, file_section: dict, overrides: dict):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(file_section) - known
    if unknown:
        _fail_config(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    merged = dict(file_section)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return cls(**merged)
    except (TypeError, ValueError) as e:
        _fail_config(str(e))


def _load_model(path: str) -> Model:
    try:
        return load_checkpoint(path)
    except (OSError, ValueError) as e:
        _fail_config(f"cannot load checkpoint {path}: {e}")


def _load_dataset(path: str):
    try:
        return data_mod.load(path)
    except (OSError, data_mod.DataFormatError) as e:
        _fail_config(f"cannot load dataset {path}: {e}")


def _chunk_frames_from_ms(chunk_ms: float | None, frame_ms: float) -> int | None:
    if chunk_ms is None:
        return None
    frames = int(round(chunk_ms / frame_ms))
    if frames < 1:
        _fail_config(f"chunk of {chunk_ms} ms is below one encoder frame ({frame_ms} ms)")
    return frames


def _print_table(rows: list[dict]) -> None:
    if not rows:
        click.echo("(empty)")
        return
    keys = list(rows[0].keys())
    widths = {k: max(len(k), *(len(_fmt(r[k])) for r in rows)) for k in keys}
    click.echo("  ".join(k.ljust(widths[k]) for k in keys))
    click.echo("  ".join("-" * widths[k] for k in keys))
    for r in rows:
        click.echo("  ".join(_fmt(r[k]).ljust(widths[k]) for k in keys))


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def _write_jsonl(path: str, rows: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row) + "\n")


@click.group()
def main() -> None:
    """Streaming transducer with an attention-decoder predictor."""


@main.command("generate-data")
@click.option("--out", required=True, type=click.Path())
@click.option("--count", default=1000, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--vocab-size", default=32, show_default=True)
@click.option("--feature-dim", default=16, show_default=True)
@click.option("--reorder-window", default=0, show_default=True)
@click.option("--noise-std", default=0.1, show_default=True)
@click.option("--min-duration", default=4, show_default=True)
@click.option("--max-duration", default=8, show_default=True)
@click.option("--min-length", default=3, show_default=True)
@click.option("--max-length", default=8, show_default=True)
@click.option("--vocab-out", type=click.Path(), default=None, help="Also write a vocabulary file.")
def generate_data(out, count, seed, vocab_size, feature_dim, reorder_window,
                  noise_std, min_duration, max_duration, min_length, max_length, vocab_out):
    """Generate a synthetic transduction dataset."""
    try:
        cfg = data_mod.SynthTaskConfig(
            vocab_size=vocab_size,
            feature_dim=feature_dim,
            duration_range=(min_duration, max_duration),
            noise_std=noise_std,
            reorder_window=reorder_window,
            utterance_length_range=(min_length, max_length),
        )
    except ValueError as e:
        _fail_config(str(e))
    utts = data_mod.generate(cfg, count, seed)
    data_mod.save(utts, out, cfg)
    if vocab_out:
        data_mod.write_vocab(vocab_out, cfg)
    click.echo(f"wrote {len(utts)} utterances to {out}")


@main.command("train")
@click.option("--data", "data_path", required=True, type=click.Path(exists=True))
@click.option("--val-data", type=click.Path(exists=True), default=None)
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--config", "config_path", type=click.Path(exists=True), default=None,
              help="YAML file with 'model:' and 'train:' sections.")
@click.option("--arch", type=click.Choice(["taed", "transducer"]), default=None)
@click.option("--chunk-ms", type=float, default=None,
              help="Streaming chunk size in source milliseconds (omit for offline).")
@click.option("--lr", type=float, default=None)
@click.option("--optimizer", type=click.Choice(["adam", "radam"]), default=None)
@click.option("--max-updates", type=int, default=None)
@click.option("--batch", "batch_utterances", type=int, default=None)
@click.option("--aed-weight", type=float, default=None)
@click.option("--alignment-speedup", type=float, default=None,
              help="Fast-alignment factor for the decoder loss (omit: offline targets).")
@click.option("--seed", type=int, default=None)
@click.option("--init-ckpt", type=click.Path(exists=True), default=None,
              help="Initialize parameters from a checkpoint (e.g. a pretrained run).")
def train_cmd(data_path, val_data, out_dir, config_path, arch, chunk_ms, lr, optimizer,
              max_updates, batch_utterances, aed_weight, alignment_speedup, seed, init_ckpt):
    """Train a model and write checkpoints plus a run manifest."""
    file_cfg = _load_yaml(config_path)
    utts, task_cfg = _load_dataset(data_path)
    val_utts = _load_dataset(val_data)[0] if val_data else None

    model_overrides = {"arch": arch, "feature_dim": task_cfg.feature_dim,
                       "vocab_size": task_cfg.vocab_size}
    frame_ms = task_cfg.frame_ms
    model_section = dict(file_cfg.get("model", {}))
    chunk_frames = _chunk_frames_from_ms(chunk_ms, frame_ms)
    if chunk_frames is not None:
        model_overrides["chunk_frames"] = chunk_frames
    model_cfg = _build_config(ModelConfig, model_section, model_overrides)

    train_overrides = {
        "lr": lr,
        "optimizer": optimizer,
        "max_updates": max_updates,
        "batch_utterances": batch_utterances,
        "aed_weight": aed_weight,
        "alignment_speedup": alignment_speedup,
        "seed": seed,
        "frame_ms": frame_ms,
    }
    train_cfg = _build_config(TrainConfig, dict(file_cfg.get("train", {})), train_overrides)

    if init_ckpt:
        base = _load_model(init_ckpt)
        model = Model(model_cfg, seed=train_cfg.seed)
        shared = 0
        for name, tensor in base.params.items():
            if name in model.params and model.params[name].shape == tensor.shape:
                model.params[name].data = tensor.data.copy()
                shared += 1
        click.echo(f"initialized {shared} tensors from {init_ckpt}")
    else:
        model = Model(model_cfg, seed=train_cfg.seed)

    try:
        manifest = trainer.train(
            model, utts, train_cfg, val_set=val_utts, out_dir=out_dir, log=click.echo
        )
    except NumericError as e:
        click.echo(f"numeric failure: {e}", err=True)
        sys.exit(EXIT_NUMERIC)
    click.echo(f"done: {manifest.stopped} ({manifest.wall_seconds:.1f}s)")


def _eval_common(ckpt, data_path, mode, chunk_ms, tau, report, traces, workers):
    model = _load_model(ckpt)
    utts, task_cfg = _load_dataset(data_path)
    chunk_frames = _chunk_frames_from_ms(chunk_ms, task_cfg.frame_ms)
    try:
        rep = trainer.evaluate(
            model,
            utts,
            mode=mode,
            chunk_frames=chunk_frames,
            tau=tau,
            frame_ms=task_cfg.frame_ms,
            workers=workers,
            trace_dir=traces,
        )
    except NumericError as e:
        click.echo(f"numeric failure: {e}", err=True)
        sys.exit(EXIT_NUMERIC)
    per_utt = rep.pop("per_utt")
    _print_table([rep])
    if report:
        metrics.write_report(report, rep, per_utt)
        click.echo(f"wrote {report}.txt and {report}.jsonl")


@main.command("eval")
@click.option("--ckpt", required=True, type=click.Path(exists=True))
@click.option("--data", "data_path", required=True, type=click.Path(exists=True))
@click.option("--tau", default=0.0, show_default=True)
@click.option("--report", type=click.Path(), default=None, help="Report path prefix.")
@click.option("--workers", default=1, show_default=True)
def eval_cmd(ckpt, data_path, tau, report, workers):
    """Offline greedy evaluation (quality only)."""
    _eval_common(ckpt, data_path, "offline", None, tau, report, None, workers)


@main.command("stream-eval")
@click.option("--ckpt", required=True, type=click.Path(exists=True))
@click.option("--data", "data_path", required=True, type=click.Path(exists=True))
@click.option("--chunk-ms", required=True, type=float)
@click.option("--tau", default=0.0, show_default=True)
@click.option("--report", type=click.Path(), default=None, help="Report path prefix.")
@click.option("--traces", type=click.Path(), default=None, help="Directory for trace files.")
@click.option("--workers", default=1, show_default=True)
def stream_eval_cmd(ckpt, data_path, chunk_ms, tau, report, traces, workers):
    """Streaming evaluation: quality plus AL/LAAL/AP/DAL."""
    _eval_common(ckpt, data_path, "streaming", chunk_ms, tau, report, traces, workers)


@main.command("sweep-tau")
@click.option("--ckpt", required=True, type=click.Path(exists=True))
@click.option("--data", "data_path", required=True, type=click.Path(exists=True))
@click.option("--lo", default=0.0, show_default=True)
@click.option("--hi", default=4.0, show_default=True)
@click.option("--step", default=0.5, show_default=True)
@click.option("--chunk-ms", type=float, default=None, help="Streaming sweep (omit: offline).")
@click.option("--out", type=click.Path(), default=None, help="Write rows as jsonl.")
@click.option("--workers", default=1, show_default=True)
def sweep_tau_cmd(ckpt, data_path, lo, hi, step, chunk_ms, out, workers):
    """Blank-penalty grid search."""
    model = _load_model(ckpt)
    utts, task_cfg = _load_dataset(data_path)
    mode = "streaming" if chunk_ms is not None else "offline"
    rows = trainer.sweep_blank_penalty(
        model,
        utts,
        lo=lo,
        hi=hi,
        step=step,
        mode=mode,
        chunk_frames=_chunk_frames_from_ms(chunk_ms, task_cfg.frame_ms),
        frame_ms=task_cfg.frame_ms,
        workers=workers,
    )
    _print_table(rows)
    best = min(rows, key=lambda r: r["wer"])
    click.echo(f"best tau by WER: {best['tau']}")
    if out:
        _write_jsonl(out, rows)


@main.command("sweep-chunk")
@click.option("--ckpt", required=True, type=click.Path(exists=True))
@click.option("--data", "data_path", required=True, type=click.Path(exists=True))
@click.option("--chunks-ms", default="160,320,480,640", show_default=True,
              help="Comma-separated chunk sizes in milliseconds.")
@click.option("--tau", default=0.0, show_default=True)
@click.option("--out", type=click.Path(), default=None, help="Write rows as jsonl.")
@click.option("--workers", default=1, show_default=True)
def sweep_chunk_cmd(ckpt, data_path, chunks_ms, tau, out, workers):
    """Quality-vs-latency curve across chunk sizes."""
    model = _load_model(ckpt)
    utts, task_cfg = _load_dataset(data_path)
    try:
        sizes = [
            _chunk_frames_from_ms(float(c), task_cfg.frame_ms)
            for c in chunks_ms.split(",") if c.strip()
        ]
    except ValueError as e:
        _fail_config(f"bad --chunks-ms: {e}")
    rows = trainer.sweep_chunk(
        model, utts, sizes, tau=tau, frame_ms=task_cfg.frame_ms, workers=workers
    )
    _print_table(rows)
    if out:
        _write_jsonl(out, rows)


@main.command("average-ckpt")
@click.argument("checkpoints", nargs=-1, required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
def average_ckpt_cmd(checkpoints, out):
    """Arithmetic per-tensor mean of checkpoints."""
    try:
        trainer.average_checkpoints(list(checkpoints), out)
    except ValueError as e:
        _fail_config(str(e))
    click.echo(f"averaged {len(checkpoints)} checkpoints into {out}")


@main.command("inspect-alignment")
@click.option("--t-prime", required=True, type=int, help="Encoder frames.")
@click.option("--u", "u_len", required=True, type=int, help="Target tokens.")
@click.option("--speedup", default=1.0, show_default=True)
@click.option("--ckpt", type=click.Path(exists=True), default=None)
@click.option("--data", "data_path", type=click.Path(exists=True), default=None)
@click.option("--utterance", default=0, show_default=True, help="Index for the lattice path print.")
def inspect_alignment_cmd(t_prime, u_len, speedup, ckpt, data_path, utterance):
    """Print the fast-alignment table; with a model and data, also the
    best-path frame for each reference token."""
    try:
        align = losses.fast_alignment(t_prime, u_len, speedup)
    except ValueError as e:
        _fail_config(str(e))
    _print_table(
        [{"u": u + 1, "t_u": t} for u, t in enumerate(align.timesteps)]
    )
    if ckpt and data_path:
        model = _load_model(ckpt)
        utts, _ = _load_dataset(data_path)
        if not (0 <= utterance < len(utts)):
            _fail_config(f"utterance index {utterance} out of range")
        utt = utts[utterance]
        fwd = model.forward_lattice(Tensor(utt.features), utt.target_tokens)
        lp = fwd.joiner.logits.data
        lp = lp - np.log(np.exp(lp).sum(-1, keepdims=True))
        frames = losses.viterbi_alignment(lp, utt.target_tokens)
        click.echo(f"utterance {utt.id}: lattice argmax emission frames")
        _print_table(
            [
                {"u": i + 1, "token": tok, "frame": frame}
                for i, (tok, frame) in enumerate(zip(utt.target_tokens, frames))
            ]
        )


if __name__ == "__main__":
    main()
