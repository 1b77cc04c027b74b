"""Chunk-synchronized streaming inference.

Reading proceeds chunk by chunk.  A chunk's encoder frames are finalized
once its lookahead chunk has been read; at that moment the decoder states
for the current hypothesis are recomputed at the chunk horizon and the
greedy loop walks the finalized frames, treating a blank argmax as "advance
to the next frame" and anything else as "emit and stay".  Consumed source
time is charged when frames finalize, so it includes the lookahead chunk.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import NumericError, Tensor
from .model import Model

__all__ = [
    "ChunkSchedule",
    "TraceEvent",
    "StreamingTrace",
    "apply_blank_penalty",
    "stream_decode",
    "offline_decode",
    "DEFAULT_MAX_SYMBOLS",
]

# An unbounded emit loop can livelock under a large blank penalty; eight
# symbols per frame is far above anything the synthetic tasks produce.
DEFAULT_MAX_SYMBOLS = 8


@dataclass
class ChunkSchedule:
    """Frame-to-chunk arithmetic for a fixed chunk size (encoder frames)."""

    chunk_frames: int

    def __post_init__(self) -> None:
        if self.chunk_frames < 1:
            raise ValueError("chunk_frames must be >= 1")

    def chunk_of(self, t: int) -> int:
        return t // self.chunk_frames

    def delta(self, t: int, t_prime: int) -> int:
        """Last frame index of t's chunk, clamped to the utterance end."""
        end = (self.chunk_of(t) + 1) * self.chunk_frames
        return min(end, t_prime) - 1

    def num_chunks(self, t_prime: int) -> int:
        return -(-t_prime // self.chunk_frames)

    def visible_frames(self, chunk: int, t_prime: int) -> int:
        return min((chunk + 1) * self.chunk_frames, t_prime)


@dataclass
class TraceEvent:
    kind: str  # "READ" | "WRITE"
    token: int | None
    ms: float  # cumulative source milliseconds consumed at this event


@dataclass
class StreamingTrace:
    """Ordered read/write events plus per-token delays in source milliseconds."""

    events: list[TraceEvent] = field(default_factory=list)
    source_total_ms: float = 0.0
    capped_frames: int = 0  # frames where the per-frame emission cap kicked in

    @property
    def delays(self) -> list[float]:
        return [e.ms for e in self.events if e.kind == "WRITE"]

    @property
    def tokens(self) -> list[int]:
        return [e.token for e in self.events if e.kind == "WRITE"]

    def validate(self) -> None:
        ms = 0.0
        for e in self.events:
            if e.ms + 1e-9 < ms:
                raise ValueError("source consumption went backwards")
            ms = max(ms, e.ms)
        reads = [e.ms for e in self.events if e.kind == "READ"]
        if reads and abs(reads[-1] - self.source_total_ms) > 1e-9:
            raise ValueError("final read does not consume the whole source")

    def to_jsonl(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for e in self.events:
                f.write(json.dumps({"kind": e.kind, "token": e.token, "ms": e.ms}) + "\n")

    @classmethod
    def from_jsonl(cls, path: str) -> "StreamingTrace":
        events = []
        with open(path, encoding="utf-8") as f:
            for line in f:
                if not line.strip():
                    continue
                rec = json.loads(line)
                events.append(TraceEvent(rec["kind"], rec["token"], float(rec["ms"])))
        total = max((e.ms for e in events if e.kind == "READ"), default=0.0)
        return cls(events=events, source_total_ms=total)


def apply_blank_penalty(log_probs: np.ndarray, tau: float, blank_index: int) -> np.ndarray:
    """Subtract tau from the blank entry; every other entry is untouched."""
    out = log_probs.copy()
    out[blank_index] -= tau
    return out


def _frame_log_probs(model: Model, h_row: Tensor, s_row: Tensor) -> np.ndarray:
    z = model.join_block(h_row, s_row)
    e = ad.log_softmax(z, axis=-1)
    return e.data[0, 0]


def stream_decode(
    model: Model,
    x: Tensor,
    tau: float = 0.0,
    max_symbols_per_frame: int = DEFAULT_MAX_SYMBOLS,
    chunk_frames: int | None = None,
    frame_ms: float | None = None,
    state_probe=None,
) -> tuple[list[int], StreamingTrace]:
    """Greedy chunk-synchronized decoding of one utterance.

    Returns the emitted tokens and the read/write trace.  ``state_probe``,
    when given, is called as ``probe(horizon, prefix_tuple, states)`` after
    every decoder recomputation (used by the consistency tests).
    """
    cfg = model.config
    if tau < 0:
        raise ValueError("blank penalty must be >= 0")
    n = chunk_frames if chunk_frames is not None else cfg.chunk_frames
    sched = ChunkSchedule(n)
    t_prime = model.num_frames(x.shape[0])
    if frame_ms is None:
        frame_ms = 10.0 * cfg.downsample_factor
    n_chunks = sched.num_chunks(t_prime)
    total_ms = t_prime * frame_ms

    trace = StreamingTrace(source_total_ms=total_ms)
    tokens: list[int] = []
    blank = cfg.blank_index
    h_blocks: list[Tensor] = []
    consumed_ms = 0.0

    def finalize_chunk(c: int) -> None:
        nonlocal consumed_ms
        vis_chunk = min(c + cfg.lookahead_chunks, n_chunks - 1)
        raw_end = min(sched.visible_frames(vis_chunk, t_prime) * cfg.downsample_factor, x.shape[0])
        hp = model._encoder_pass(x[0:raw_end])
        lo = c * n
        hi = sched.visible_frames(c, t_prime)
        h_blocks.append(hp[lo:hi])
        h_prefix = ad.concat(h_blocks, axis=0) if len(h_blocks) > 1 else h_blocks[0]
        states = model.decode_states(h_prefix if cfg.arch == "taed" else None, tokens)
        if state_probe is not None:
            state_probe(hi, tuple(tokens), states)
        for t in range(lo, hi):
            emitted = 0
            while True:
                e = _frame_log_probs(model, h_prefix[t : t + 1], states.top[len(tokens) : len(tokens) + 1])
                if not np.isfinite(e).all():
                    raise NumericError(f"non-finite joiner output at frame {t}")
                e = apply_blank_penalty(e, tau, blank)
                k = int(np.argmax(e))
                if k == blank:
                    break
                if emitted >= max_symbols_per_frame:
                    trace.capped_frames += 1
                    break
                tokens.append(k)
                trace.events.append(TraceEvent("WRITE", k, consumed_ms))
                emitted += 1
                states = model.decode_states(
                    h_prefix if cfg.arch == "taed" else None, tokens
                )
                if state_probe is not None:
                    state_probe(hi, tuple(tokens), states)

    for c in range(n_chunks):
        consumed_ms = sched.visible_frames(c, t_prime) * frame_ms
        trace.events.append(TraceEvent("READ", None, consumed_ms))
        first = c - cfg.lookahead_chunks
        if first >= 0:
            finalize_chunk(first)
        if c == n_chunks - 1:
            for b in range(max(c - cfg.lookahead_chunks + 1, 0), n_chunks):
                finalize_chunk(b)
    trace.validate()
    return tokens, trace


def offline_decode(model: Model, x: Tensor, tau: float = 0.0) -> list[int]:
    """Greedy decoding with a single all-covering chunk."""
    tokens, _ = stream_decode(model, x, tau=tau, chunk_frames=1 << 30)
    return tokens
