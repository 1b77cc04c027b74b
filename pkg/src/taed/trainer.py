"""Training loop, optimizers, checkpoint lifecycle, evaluation and sweeps."""

from __future__ import annotations

import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import losses, metrics
from .autodiff import Graph, NumericError, Tensor
from .data import Utterance
from .losses import FastAlignment
from .model import Model, ModelConfig, read_tensor_map, save_checkpoint, write_tensor_map
from .streaming import offline_decode, stream_decode

__all__ = [
    "TrainConfig",
    "RunManifest",
    "Adam",
    "RAdam",
    "train",
    "utterance_loss",
    "average_checkpoints",
    "evaluate",
    "sweep_blank_penalty",
    "sweep_chunk",
]


@dataclass
class TrainConfig:
    lr: float = 3e-4
    optimizer: str = "adam"  # "adam" | "radam"
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    warmup_steps: int = 200
    batch_utterances: int = 16
    max_updates: int = 3000
    aed_weight: float = 1.0
    alignment_speedup: float | None = None  # None: offline decoder targets
    label_smoothing: float = 0.1
    dropout: float = 0.1
    seed: int = 0
    checkpoint_every: int = 200
    keep_best_k: int = 10
    patience: int = 20  # validation intervals without improvement
    clip_norm: float = 5.0
    rnnt_method: str = "forward-backward"
    frame_ms: float | None = None
    stop_at_val_wer: float | None = None
    val_wer_utts: int = 32

    def __post_init__(self) -> None:
        self.betas = tuple(self.betas)
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.keep_best_k < 1:
            raise ValueError("keep_best_k must be >= 1")
        if self.optimizer not in ("adam", "radam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class RunManifest:
    model_config: dict
    train_config: dict
    steps: list[dict] = field(default_factory=list)
    validations: list[dict] = field(default_factory=list)
    checkpoints: list[dict] = field(default_factory=list)
    stopped: str = ""
    wall_seconds: float = 0.0

    def save(self, path: str) -> None:
        tmp = f"{path}.tmp.{os.getpid()}"
        with open(tmp, "w", encoding="utf-8") as f:
            json.dump(asdict(self), f, indent=1)
        os.replace(tmp, path)

    def best_checkpoints(self, k: int) -> list[dict]:
        """Lowest validation loss first; ties broken by earlier step."""
        ranked = sorted(self.checkpoints, key=lambda c: (c["val_loss"], c["step"]))
        return ranked[:k]


class Adam:
    def __init__(self, params: dict[str, Tensor], config: TrainConfig) -> None:
        self.params = params
        self.b1, self.b2 = config.betas
        self.eps = config.adam_eps
        self.m = {n: np.zeros_like(t.data) for n, t in params.items()}
        self.v = {n: np.zeros_like(t.data) for n, t in params.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        b1t = 1.0 - self.b1**self.t
        b2t = 1.0 - self.b2**self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= self.b1
            m += (1 - self.b1) * p.grad
            v *= self.b2
            v += (1 - self.b2) * p.grad**2
            update = (m / b1t) / (np.sqrt(v / b2t) + self.eps)
            p.data = p.data - lr * update


class RAdam:
    """Adam with the variance-rectification term; falls back to an
    unadapted momentum update while the rectification is undefined."""

    def __init__(self, params: dict[str, Tensor], config: TrainConfig) -> None:
        self.params = params
        self.b1, self.b2 = config.betas
        self.eps = config.adam_eps
        self.m = {n: np.zeros_like(t.data) for n, t in params.items()}
        self.v = {n: np.zeros_like(t.data) for n, t in params.items()}
        self.t = 0
        self.rho_inf = 2.0 / (1.0 - self.b2) - 1.0

    def step(self, lr: float) -> None:
        self.t += 1
        t = self.t
        b2t = self.b2**t
        rho = self.rho_inf - 2.0 * t * b2t / (1.0 - b2t)
        if rho > 4.0:
            num = (rho - 4.0) * (rho - 2.0) * self.rho_inf
            den = (self.rho_inf - 4.0) * (self.rho_inf - 2.0) * rho
            rect = math.sqrt(num / den)
        else:
            rect = None
        b1t = 1.0 - self.b1**t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= self.b1
            m += (1 - self.b1) * p.grad
            v *= self.b2
            v += (1 - self.b2) * p.grad**2
            m_hat = m / b1t
            if rect is None:
                p.data = p.data - lr * m_hat
            else:
                v_hat = np.sqrt(v / (1.0 - b2t)) + self.eps
                p.data = p.data - lr * rect * m_hat / v_hat


def _make_optimizer(model: Model, config: TrainConfig):
    cls = Adam if config.optimizer == "adam" else RAdam
    return cls(model.named_parameters(), config)


def _clip_gradients(params: dict[str, Tensor], max_norm: float) -> float:
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad**2).sum())
    norm = math.sqrt(total)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return norm


def _alignment_for(t_prime: int, u_len: int, speedup: float | None) -> FastAlignment:
    if u_len == 0:
        return FastAlignment([], speedup or 0.0)
    if speedup is None:
        return FastAlignment([t_prime] * u_len, 0.0)
    return losses.fast_alignment(t_prime, u_len, speedup)


def utterance_loss(
    model: Model,
    utt: Utterance,
    config: TrainConfig,
    rng=None,
) -> tuple[Tensor, float, float]:
    """Joint objective for one utterance: per-token lattice loss plus the
    weighted aligned cross-entropy (TAED only).  Returns (loss, rnnt, aed)."""
    y = utt.target_tokens
    fwd = model.forward_lattice(
        Tensor(utt.features), y, dropout_rate=config.dropout, rng=rng
    )
    u_len = len(y)
    rnnt = ad.scale(
        losses.rnnt_loss(fwd.joiner.logits, y, method=config.rnnt_method),
        1.0 / max(u_len, 1),
    )
    use_aed = model.config.arch == "taed" and config.aed_weight > 0.0 and u_len > 0
    if not use_aed:
        return rnnt, float(rnnt.data), 0.0
    t_prime = fwd.encoder.h.shape[0]
    align = _alignment_for(t_prime, u_len, config.alignment_speedup)
    horizon_logits = [(st.horizon, model.aed_logits(st)) for st in fwd.states]
    aed = losses.aed_ce_loss(horizon_logits, y, align, config.label_smoothing)
    total = losses.taed_loss(rnnt, aed, config.aed_weight)
    return total, float(rnnt.data), float(aed.data)


def _validation_loss(model: Model, utts: Sequence[Utterance], config: TrainConfig) -> float:
    eval_cfg = TrainConfig(**{**asdict(config), "dropout": 0.0})
    total = 0.0
    for utt in utts:
        loss, _, _ = utterance_loss(model, utt, eval_cfg, rng=None)
        total += float(loss.data)
    return total / max(len(utts), 1)


def _validation_wer(model: Model, utts: Sequence[Utterance], limit: int) -> float:
    # a low emission cap keeps early validations cheap: an untrained model
    # otherwise pads every frame to the full per-frame symbol budget
    subset = utts[:limit]
    errors = tokens = 0
    for utt in subset:
        hyp, _ = stream_decode(
            model, Tensor(utt.features), chunk_frames=1 << 30, max_symbols_per_frame=4
        )
        errors += metrics.edit_distance(utt.target_tokens, hyp)
        tokens += len(utt.target_tokens)
    return errors / max(tokens, 1)


def train(
    model: Model,
    dataset: Sequence[Utterance],
    config: TrainConfig,
    val_set: Sequence[Utterance] | None = None,
    out_dir: str | None = None,
    log=None,
) -> RunManifest:
    """Minibatch training with warmup, validation, best-k checkpointing and
    early stopping.  Aborts with NumericError on a non-finite loss."""
    if not dataset:
        raise ValueError("empty training set")
    manifest = RunManifest(asdict(model.config), asdict(config))
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    opt = _make_optimizer(model, config)
    order_rng = np.random.default_rng([config.seed, 1])
    order = order_rng.permutation(len(dataset))
    cursor = 0
    best_val = math.inf
    stale = 0
    started = time.monotonic()

    for step in range(1, config.max_updates + 1):
        batch = []
        for _ in range(config.batch_utterances):
            if cursor == len(order):
                order = order_rng.permutation(len(dataset))
                cursor = 0
            batch.append(dataset[order[cursor]])
            cursor += 1
        drop_rng = np.random.default_rng([config.seed, 7, step])
        model.zero_grad()
        rnnt_sum = aed_sum = 0.0
        with Graph() as g:
            parts = []
            for utt in batch:
                loss_u, rnnt_u, aed_u = utterance_loss(model, utt, config, drop_rng)
                parts.append(loss_u)
                rnnt_sum += rnnt_u
                aed_sum += aed_u
            total = ad.scale(
                parts[0] if len(parts) == 1 else _sum_tensors(parts),
                1.0 / len(parts),
            )
            loss_val = float(total.data)
            if not math.isfinite(loss_val):
                raise NumericError(
                    f"training diverged at step {step}: loss={loss_val}"
                )
            g.backward(total)
        grad_norm = _clip_gradients(model.params, config.clip_norm)
        lr_t = config.lr * min(1.0, step / max(config.warmup_steps, 1))
        opt.step(lr_t)
        manifest.steps.append(
            {
                "step": step,
                "total": loss_val,
                "rnnt": rnnt_sum / len(batch),
                "aed": aed_sum / len(batch),
                "lr": lr_t,
                "grad_norm": grad_norm,
            }
        )
        if log and (step % 50 == 0 or step == 1):
            log(
                f"step {step:5d}  loss {loss_val:.4f}  "
                f"rnnt {rnnt_sum / len(batch):.4f}  aed {aed_sum / len(batch):.4f}"
            )

        if step % config.checkpoint_every == 0 or step == config.max_updates:
            val_utts = list(val_set) if val_set else list(dataset[: min(64, len(dataset))])
            val_loss = _validation_loss(model, val_utts[:128], config)
            val_wer = _validation_wer(model, val_utts, config.val_wer_utts)
            entry = {"step": step, "val_loss": val_loss, "val_wer": val_wer}
            manifest.validations.append(entry)
            if log:
                log(f"step {step:5d}  val_loss {val_loss:.4f}  val_wer {val_wer:.4f}")
            if out_dir:
                path = os.path.join(out_dir, f"ckpt_{step:06d}.ckpt")
                save_checkpoint(model, path)
                manifest.checkpoints.append({"step": step, "path": path, "val_loss": val_loss})
                manifest.save(os.path.join(out_dir, "run.json"))
            if val_loss < best_val - 1e-9:
                best_val = val_loss
                stale = 0
            else:
                stale += 1
            if config.stop_at_val_wer is not None and val_wer <= config.stop_at_val_wer:
                manifest.stopped = f"reached target val WER {val_wer:.4f} at step {step}"
                break
            if stale >= config.patience:
                manifest.stopped = f"no improvement for {stale} validations"
                break
    if not manifest.stopped:
        manifest.stopped = "max updates"
    manifest.wall_seconds = time.monotonic() - started
    if out_dir:
        manifest.save(os.path.join(out_dir, "run.json"))
    return manifest


def _sum_tensors(parts: list[Tensor]) -> Tensor:
    total = parts[0]
    for p in parts[1:]:
        total = ad.add(total, p)
    return total


def average_checkpoints(paths: Sequence[str], out_path: str) -> str:
    """Arithmetic per-tensor mean of checkpoints with identical layouts."""
    if not paths:
        raise ValueError("need at least one checkpoint")
    manifest0, tensors0 = read_tensor_map(paths[0])
    acc = {n: a.astype(np.float64) for n, a in tensors0.items()}
    for path in paths[1:]:
        manifest, tensors = read_tensor_map(path)
        if manifest["config"] != manifest0["config"]:
            raise ValueError(f"{path}: config differs from {paths[0]}")
        if set(tensors) != set(acc):
            raise ValueError(f"{path}: tensor names differ")
        for n, a in tensors.items():
            if a.shape != acc[n].shape:
                raise ValueError(f"{path}: shape mismatch for {n}")
            acc[n] += a.astype(np.float64)
    k = len(paths)
    averaged = {n: a / k for n, a in acc.items()}
    config = ModelConfig(**manifest0["config"])
    write_tensor_map(out_path, config, averaged)
    return out_path


def _decode_one(model, utt, mode, chunk_frames, tau, frame_ms):
    x = Tensor(utt.features)
    if mode == "offline":
        tokens, trace = stream_decode(
            model, x, tau=tau, chunk_frames=1 << 30, frame_ms=frame_ms
        )
    else:
        tokens, trace = stream_decode(
            model, x, tau=tau, chunk_frames=chunk_frames, frame_ms=frame_ms
        )
    return tokens, trace


def evaluate(
    model: Model,
    dataset: Sequence[Utterance],
    mode: str = "offline",
    chunk_frames: int | None = None,
    tau: float = 0.0,
    frame_ms: float | None = None,
    workers: int = 1,
    trace_dir: str | None = None,
) -> dict:
    """Decode a set, score quality, and (for streaming) latency.

    Returns a report dict with corpus numbers and per-utterance rows.
    """
    if mode not in ("offline", "streaming"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "streaming" and chunk_frames is None:
        chunk_frames = model.config.chunk_frames
    if trace_dir:
        os.makedirs(trace_dir, exist_ok=True)

    def work(item):
        idx, utt = item
        return idx, _decode_one(model, utt, mode, chunk_frames, tau, frame_ms)

    items = list(enumerate(dataset))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = dict(pool.map(work, items))
    else:
        results = dict(map(work, items))

    per_utt = []
    refs, hyps = [], []
    latency = metrics.LatencyReport()
    errors = ref_tokens = hyp_tokens = 0
    for idx, utt in items:
        tokens, trace = results[idx]
        refs.append(utt.target_tokens)
        hyps.append(tokens)
        dist = metrics.edit_distance(utt.target_tokens, tokens)
        errors += dist
        ref_tokens += len(utt.target_tokens)
        hyp_tokens += len(tokens)
        row = {
            "id": utt.id,
            "wer": dist / max(len(utt.target_tokens), 1),
            "ref_len": len(utt.target_tokens),
            "hyp_len": len(tokens),
        }
        if mode == "streaming":
            row.update(latency.add(utt.id, trace, len(utt.target_tokens)))
            row.pop("id", None)
            row["id"] = utt.id
        if trace_dir:
            trace.to_jsonl(os.path.join(trace_dir, f"{utt.id}.trace.jsonl"))
        per_utt.append(row)

    report = {
        "mode": mode,
        "tau": tau,
        "chunk_frames": chunk_frames if mode == "streaming" else None,
        "utterances": len(dataset),
        "wer": errors / max(ref_tokens, 1),
        "bleu": metrics.bleu(refs, hyps),
        "mean_hyp_tokens": hyp_tokens / max(len(dataset), 1),
    }
    if mode == "streaming":
        report.update(latency.corpus_means())
    else:
        report["AP"] = 1.0
    report["per_utt"] = per_utt
    return report


def sweep_blank_penalty(
    model: Model,
    dataset: Sequence[Utterance],
    lo: float = 0.0,
    hi: float = 4.0,
    step: float = 0.5,
    mode: str = "streaming",
    chunk_frames: int | None = None,
    frame_ms: float | None = None,
    workers: int = 1,
) -> list[dict]:
    """Grid of blank penalties with quality and emission statistics per row."""
    taus = []
    tau = lo
    while tau <= hi + 1e-9:
        taus.append(round(tau, 6))
        tau += step
    rows = []
    for tau in taus:
        rep = evaluate(
            model,
            dataset,
            mode=mode,
            chunk_frames=chunk_frames,
            tau=tau,
            frame_ms=frame_ms,
            workers=workers,
        )
        row = {
            "tau": tau,
            "wer": rep["wer"],
            "bleu": rep["bleu"],
            "mean_hyp_tokens": rep["mean_hyp_tokens"],
        }
        if mode == "streaming":
            row["AL"] = rep["AL"]
        rows.append(row)
    return rows


def sweep_chunk(
    model: Model,
    dataset: Sequence[Utterance],
    chunk_sizes: Sequence[int],
    tau: float = 0.0,
    frame_ms: float | None = None,
    workers: int = 1,
) -> list[dict]:
    """Quality-vs-latency operating points across chunk sizes."""
    rows = []
    for n in chunk_sizes:
        rep = evaluate(
            model,
            dataset,
            mode="streaming",
            chunk_frames=n,
            tau=tau,
            frame_ms=frame_ms,
            workers=workers,
        )
        rows.append(
            {
                "chunk_frames": n,
                "wer": rep["wer"],
                "bleu": rep["bleu"],
                "AL": rep["AL"],
                "LAAL": rep["LAAL"],
                "AP": rep["AP"],
                "DAL": rep["DAL"],
            }
        )
    return rows
