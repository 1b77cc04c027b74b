"""The shared-encoder transducer models.

Two architectures behind one parameter map:

* ``taed`` — the speech encoder is shared between a transducer and an
  attention decoder; the decoder doubles as the transducer predictor, so its
  states are conditioned on the visible encoder prefix.
* ``transducer`` — the classic baseline whose predictor sees tokens only.

Streaming runs on a chunk schedule: the frames of chunk c are finalized by an
encoder pass over the raw prefix up to chunk ``c + lookahead_chunks``, and
decoder states for those frames are recomputed from scratch at the chunk
horizon (the last finalized frame).  With a chunk at least as long as the
utterance, every bit of the machinery reduces to a single offline pass.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

__all__ = [
    "ModelConfig",
    "EncoderOutput",
    "DecoderStates",
    "JoinerOutput",
    "ForwardOutput",
    "Model",
    "CheckpointError",
    "save_checkpoint",
    "load_checkpoint",
    "read_tensor_map",
    "write_tensor_map",
]

BOS = 0

# effectively "no chunking": larger than any utterance we will ever see
OFFLINE_CHUNK = 1 << 30


@dataclass
class ModelConfig:
    feature_dim: int = 16
    d_model: int = 64
    n_heads: int = 4
    encoder_layers: int = 4
    decoder_layers: int = 2
    ffn_dim: int = 128
    vocab_size: int = 32  # includes BOS at index 0; blank sits one past the end
    downsample_factor: int = 4
    chunk_frames: int = OFFLINE_CHUNK  # encoder-output frames per chunk
    lookahead_chunks: int = 1
    arch: str = "taed"  # "taed" | "transducer"

    def __post_init__(self) -> None:
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.chunk_frames < 1 or self.downsample_factor < 1:
            raise ValueError("chunk_frames and downsample_factor must be >= 1")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must reserve BOS plus at least one symbol")
        if self.arch not in ("taed", "transducer"):
            raise ValueError(f"unknown arch {self.arch!r}")

    @property
    def blank_index(self) -> int:
        return self.vocab_size

    @property
    def num_classes(self) -> int:
        return self.vocab_size + 1


@dataclass
class EncoderOutput:
    h: Tensor  # [T', d_model]
    frame_ms: float  # raw-input milliseconds represented by one encoder frame


@dataclass
class DecoderStates:
    """Layer-wise decoder states for one token prefix at one encoder horizon.

    ``horizon`` is the number of visible encoder frames (None for the
    baseline predictor, which never looks at audio).
    """

    layers: list[Tensor]
    top: Tensor  # [U_prefix + 1, d_model], final layer after output norm
    horizon: int | None


@dataclass
class JoinerOutput:
    logits: Tensor  # [T', U+1, vocab_size + 1]


@dataclass
class ForwardOutput:
    encoder: EncoderOutput
    states: list[DecoderStates]  # one per chunk ("taed"), or a single shared one
    joiner: JoinerOutput
    chunk_frames: int


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Model:
    """Parameter container plus the forward functions."""

    def __init__(self, config: ModelConfig, seed: int = 0) -> None:
        self.config = config
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        d, ffn = config.d_model, config.ffn_dim

        self._weight("enc.in_proj.w", _xavier(rng, config.downsample_factor * config.feature_dim, d))
        self._bias("enc.in_proj.b", d)
        for i in range(config.encoder_layers):
            self._attn_params(f"enc.{i}.attn", rng)
            self._ffn_params(f"enc.{i}.ffn", rng)
        self._ln_params("enc.out_ln")

        self._weight("dec.embed", rng.normal(0.0, d**-0.5, size=(config.vocab_size, d)))
        for i in range(config.decoder_layers):
            self._attn_params(f"dec.{i}.self_attn", rng)
            if config.arch == "taed":
                self._attn_params(f"dec.{i}.cross_attn", rng)
            self._ffn_params(f"dec.{i}.ffn", rng)
        self._ln_params("dec.out_ln")

        self._weight("joiner.wh", _xavier(rng, d, d))
        self._weight("joiner.ws", _xavier(rng, d, d))
        self._bias("joiner.bj", d)
        self._weight("joiner.w1", _xavier(rng, d, d))
        self._bias("joiner.b1", d)
        # shared output projection: joiner features and decoder states both
        # live in d_model and project onto vocab + blank with this matrix
        self._weight("joiner.wout", _xavier(rng, d, config.num_classes))
        self._bias("joiner.bout", config.num_classes)

    # -- parameter bookkeeping -------------------------------------------

    def _weight(self, name: str, data: np.ndarray) -> None:
        self.params[name] = Tensor(data, requires_grad=True)

    def _bias(self, name: str, n: int) -> None:
        self.params[name] = Tensor(np.zeros(n), requires_grad=True)

    def _ln_params(self, prefix: str) -> None:
        d = self.config.d_model
        self.params[f"{prefix}.g"] = Tensor(np.ones(d), requires_grad=True)
        self.params[f"{prefix}.b"] = Tensor(np.zeros(d), requires_grad=True)

    def _attn_params(self, prefix: str, rng: np.random.Generator) -> None:
        d = self.config.d_model
        self._ln_params(f"{prefix}.ln")
        for w in ("wq", "wk", "wv", "wo"):
            self._weight(f"{prefix}.{w}", _xavier(rng, d, d))
        for b in ("bq", "bk", "bv", "bo"):
            self._bias(f"{prefix}.{b}", d)

    def _ffn_params(self, prefix: str, rng: np.random.Generator) -> None:
        d, ffn = self.config.d_model, self.config.ffn_dim
        self._ln_params(f"{prefix}.ln")
        self._weight(f"{prefix}.w1", _xavier(rng, d, ffn))
        self._bias(f"{prefix}.b1", ffn)
        self._weight(f"{prefix}.w2", _xavier(rng, ffn, d))
        self._bias(f"{prefix}.b2", d)

    def named_parameters(self) -> dict[str, Tensor]:
        return self.params

    def parameter_count(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    # -- sublayers ---------------------------------------------------------

    def _p(self, name: str) -> Tensor:
        return self.params[name]

    def _attn_sublayer(
        self,
        prefix: str,
        x: Tensor,
        kv: Tensor | None,
        mask: np.ndarray | None,
        dropout_rate: float,
        rng,
        collect: dict | None = None,
    ) -> Tensor:
        xn = ad.layer_norm(x, self._p(f"{prefix}.ln.g"), self._p(f"{prefix}.ln.b"))
        source = xn if kv is None else kv
        q = ad.linear(xn, self._p(f"{prefix}.wq"), self._p(f"{prefix}.bq"))
        k = ad.linear(source, self._p(f"{prefix}.wk"), self._p(f"{prefix}.bk"))
        v = ad.linear(source, self._p(f"{prefix}.wv"), self._p(f"{prefix}.bv"))
        if collect is None:
            att = ad.attention(q, k, v, mask=mask, n_heads=self.config.n_heads)
        else:
            att, weights = ad.attention(
                q, k, v, mask=mask, n_heads=self.config.n_heads, return_weights=True
            )
            collect.setdefault(prefix, []).append(weights)
        out = ad.linear(att, self._p(f"{prefix}.wo"), self._p(f"{prefix}.bo"))
        return ad.add(x, ad.dropout(out, dropout_rate, rng))

    def _ffn_sublayer(self, prefix: str, x: Tensor, dropout_rate: float, rng) -> Tensor:
        xn = ad.layer_norm(x, self._p(f"{prefix}.ln.g"), self._p(f"{prefix}.ln.b"))
        hidden = ad.relu(ad.linear(xn, self._p(f"{prefix}.w1"), self._p(f"{prefix}.b1")))
        out = ad.linear(hidden, self._p(f"{prefix}.w2"), self._p(f"{prefix}.b2"))
        return ad.add(x, ad.dropout(out, dropout_rate, rng))

    # -- encoder -----------------------------------------------------------

    def _encoder_pass(self, x: Tensor, dropout_rate: float = 0.0, rng=None) -> Tensor:
        """Full-attention encoder over a raw prefix: downsample, project, layers."""
        cfg = self.config
        t_raw = x.shape[0]
        t_prime = -(-t_raw // cfg.downsample_factor)
        pad = t_prime * cfg.downsample_factor - t_raw
        if pad:
            x = ad.concat([x, Tensor(np.zeros((pad, cfg.feature_dim)))], axis=0)
        stacked = ad.reshape(x, (t_prime, cfg.downsample_factor * cfg.feature_dim))
        h = ad.linear(stacked, self._p("enc.in_proj.w"), self._p("enc.in_proj.b"))
        h = ad.add(h, Tensor(ad.sinusoid_positions(t_prime, cfg.d_model)))
        h = ad.dropout(h, dropout_rate, rng)
        for i in range(cfg.encoder_layers):
            h = self._attn_sublayer(f"enc.{i}.attn", h, None, None, dropout_rate, rng)
            h = self._ffn_sublayer(f"enc.{i}.ffn", h, dropout_rate, rng)
        return ad.layer_norm(h, self._p("enc.out_ln.g"), self._p("enc.out_ln.b"))

    def num_frames(self, t_raw: int) -> int:
        return -(-t_raw // self.config.downsample_factor)

    def encode(
        self,
        x: Tensor,
        chunk_frames: int | None = None,
        dropout_rate: float = 0.0,
        rng=None,
        frame_ms: float | None = None,
    ) -> EncoderOutput:
        """Chunk-causal encoding of raw features [T, feature_dim].

        Frames of chunk c are the outputs of an encoder pass over the raw
        prefix through chunk ``c + lookahead_chunks`` (clamped to the end of
        the utterance), so no frame ever depends on input beyond its
        lookahead window and streaming recomputation is bit-identical.
        """
        cfg = self.config
        t_raw = x.shape[0]
        if t_raw < cfg.downsample_factor:
            raise ShapeError(f"need at least {cfg.downsample_factor} raw frames, got {t_raw}")
        n = chunk_frames if chunk_frames is not None else cfg.chunk_frames
        if n < 1:
            raise ValueError("chunk_frames must be >= 1")
        t_prime = self.num_frames(t_raw)
        n_chunks = -(-t_prime // n)
        if frame_ms is None:
            frame_ms = 10.0 * cfg.downsample_factor
        if n_chunks == 1:
            return EncoderOutput(self._encoder_pass(x, dropout_rate, rng), frame_ms)
        blocks = []
        for c in range(n_chunks):
            vis_chunk = min(c + cfg.lookahead_chunks, n_chunks - 1)
            vis_frames = min((vis_chunk + 1) * n, t_prime)
            raw_end = min(vis_frames * cfg.downsample_factor, t_raw)
            hp = self._encoder_pass(x[0:raw_end], dropout_rate, rng)
            blocks.append(hp[c * n : min((c + 1) * n, t_prime)])
        return EncoderOutput(ad.concat(blocks, axis=0), frame_ms)

    # -- decoder / predictor -------------------------------------------------

    def decode_states(
        self,
        h_prefix: Tensor | None,
        y_prefix: Sequence[int],
        dropout_rate: float = 0.0,
        rng=None,
        collect: dict | None = None,
    ) -> DecoderStates:
        """States for [BOS] + y_prefix; row u conditions on the first u tokens.

        For the "taed" arch every layer cross-attends the given encoder
        prefix (recomputed from scratch at each horizon); the baseline
        predictor ignores audio entirely.
        """
        cfg = self.config
        ids = [BOS, *map(int, y_prefix)]
        if any(t < 0 or t >= cfg.vocab_size for t in ids):
            raise ShapeError("token id out of vocabulary (blank is never a decoder input)")
        cross = cfg.arch == "taed"
        if cross:
            if h_prefix is None or h_prefix.shape[0] < 1:
                raise ShapeError("empty encoder prefix")
            horizon: int | None = h_prefix.shape[0]
        else:
            horizon = None
        u1 = len(ids)
        emb = ad.embedding_lookup(self._p("dec.embed"), np.asarray(ids))
        x = ad.add(
            ad.scale(emb, math.sqrt(cfg.d_model)),
            Tensor(ad.sinusoid_positions(u1, cfg.d_model)),
        )
        x = ad.dropout(x, dropout_rate, rng)
        causal = np.tril(np.ones((u1, u1), dtype=bool))
        layers: list[Tensor] = []
        for i in range(cfg.decoder_layers):
            x = self._attn_sublayer(f"dec.{i}.self_attn", x, None, causal, dropout_rate, rng)
            if cross:
                x = self._attn_sublayer(
                    f"dec.{i}.cross_attn", x, h_prefix, None, dropout_rate, rng, collect
                )
            x = self._ffn_sublayer(f"dec.{i}.ffn", x, dropout_rate, rng)
            layers.append(x)
        top = ad.layer_norm(x, self._p("dec.out_ln.g"), self._p("dec.out_ln.b"))
        return DecoderStates(layers=layers, top=top, horizon=horizon)

    # -- joiner ---------------------------------------------------------------

    def join_block(self, h_rows: Tensor, s_top: Tensor) -> Tensor:
        """Logits [n, U+1, K] for n encoder frames against one state set."""
        if h_rows.ndim != 2 or s_top.ndim != 2:
            raise ShapeError("join_block wants [n, d] frames and [U+1, d] states")
        d = self.config.d_model
        if h_rows.shape[1] != d or s_top.shape[1] != d:
            raise ShapeError(
                f"join_block: width mismatch {h_rows.shape} / {s_top.shape} vs d_model={d}"
            )
        n, u1 = h_rows.shape[0], s_top.shape[0]
        a = ad.matmul(h_rows, self._p("joiner.wh"))
        b = ad.matmul(s_top, self._p("joiner.ws"))
        mix = ad.tanh(ad.add(ad.outer_add(a, b), self._p("joiner.bj")))
        flat = ad.reshape(mix, (n * u1, d))
        hidden = ad.relu(ad.linear(flat, self._p("joiner.w1"), self._p("joiner.b1")))
        logits = ad.linear(hidden, self._p("joiner.wout"), self._p("joiner.bout"))
        return ad.reshape(logits, (n, u1, self.config.num_classes))

    def aed_logits(self, states: DecoderStates) -> Tensor:
        """Vocabulary logits for every state row (shares the output projection)."""
        return ad.linear(states.top, self._p("joiner.wout"), self._p("joiner.bout"))

    # -- whole-lattice forward -------------------------------------------------

    def forward_lattice(
        self,
        x: Tensor,
        y: Sequence[int],
        chunk_frames: int | None = None,
        dropout_rate: float = 0.0,
        rng=None,
        frame_ms: float | None = None,
    ) -> ForwardOutput:
        """Chunk-synchronized lattice over the full target sequence."""
        cfg = self.config
        n = chunk_frames if chunk_frames is not None else cfg.chunk_frames
        enc = self.encode(x, n, dropout_rate, rng, frame_ms)
        t_prime = enc.h.shape[0]
        n_chunks = -(-t_prime // n)
        if cfg.arch == "transducer":
            st = self.decode_states(None, y, dropout_rate, rng)
            logits = self.join_block(enc.h, st.top)
            return ForwardOutput(enc, [st], JoinerOutput(logits), n)
        states = []
        blocks = []
        for c in range(n_chunks):
            hi = min((c + 1) * n, t_prime)
            st = self.decode_states(enc.h[0:hi], y, dropout_rate, rng)
            states.append(st)
            blocks.append(self.join_block(enc.h[c * n : hi], st.top))
        logits = blocks[0] if n_chunks == 1 else ad.concat(blocks, axis=0)
        return ForwardOutput(enc, states, JoinerOutput(logits), n)


# ---------------------------------------------------------------------------
# checkpoint format
#
#   bytes 0..7   magic "TAEDCKP1"
#   bytes 8..11  little-endian uint32: manifest length M
#   bytes 12..   UTF-8 JSON manifest (sorted keys, compact separators)
#   then         raw little-endian float32 payloads, concatenated in the
#                order of the manifest's "tensors" list
#
# The manifest holds {"format_version": 1, "config": {...}, "blank_index": n,
# "tensors": [{"name", "shape", "offset"} ...]} with offsets in float32
# elements from the start of the payload.  Rewriting a loaded file is
# byte-identical, which keeps checkpoint averaging reproducible.

MAGIC = b"TAEDCKP1"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Malformed, truncated, or version-incompatible checkpoint file."""


def write_tensor_map(path: str, config: ModelConfig, tensors: dict[str, np.ndarray]) -> None:
    names = sorted(tensors)
    entries = []
    offset = 0
    for name in names:
        arr = tensors[name]
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": asdict(config),
        "blank_index": config.blank_index,
        "tensors": entries,
    }
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for name in names:
            f.write(np.ascontiguousarray(tensors[name], dtype="<f4").tobytes())
    os.replace(tmp, path)


def read_tensor_map(path: str) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < len(MAGIC) + 4 or raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (mlen,) = struct.unpack("<I", raw[len(MAGIC) : len(MAGIC) + 4])
    start = len(MAGIC) + 4
    if len(raw) < start + mlen:
        raise CheckpointError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(raw[start : start + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: bad manifest: {e}") from e
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format version {manifest.get('format_version')} != {FORMAT_VERSION}"
        )
    payload = raw[start + mlen :]
    tensors: dict[str, np.ndarray] = {}
    for entry in manifest["tensors"]:
        size = int(np.prod(entry["shape"])) if entry["shape"] else 1
        lo = entry["offset"] * 4
        hi = lo + size * 4
        if hi > len(payload):
            raise CheckpointError(f"{path}: truncated payload at tensor {entry['name']}")
        arr = np.frombuffer(payload[lo:hi], dtype="<f4").reshape(entry["shape"])
        tensors[entry["name"]] = arr
    return manifest, tensors


def save_checkpoint(model: Model, path: str) -> None:
    write_tensor_map(path, model.config, {n: t.data for n, t in model.params.items()})


def load_checkpoint(path: str) -> Model:
    manifest, tensors = read_tensor_map(path)
    config = ModelConfig(**manifest["config"])
    model = Model(config, seed=0)
    missing = set(model.params) - set(tensors)
    extra = set(tensors) - set(model.params)
    if missing or extra:
        raise CheckpointError(f"{path}: tensor names do not match (missing={missing}, extra={extra})")
    for name, arr in tensors.items():
        if tuple(arr.shape) != model.params[name].shape:
            raise CheckpointError(f"{path}: shape mismatch for {name}")
        model.params[name].data = arr.astype(np.float64)
    return model
