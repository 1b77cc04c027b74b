"""Synthetic transduction tasks.

Each utterance renders a random token sequence as features: every token's
embedding vector is repeated for a random number of raw frames and Gaussian
noise is added.  The target side is the source (recognition-style) or the
source with every window of ``reorder_window`` consecutive tokens reversed
(translation-style word-order divergence).  Everything is a pure function of
(config, seed, index).
"""

from __future__ import annotations

import base64
import json
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

__all__ = [
    "SynthTaskConfig",
    "Utterance",
    "DataFormatError",
    "symbol_embeddings",
    "window_reverse",
    "generate",
    "save",
    "load",
    "write_vocab",
    "read_vocab",
]

FORMAT_NAME = "taed-synth"
FORMAT_VERSION = 1


class DataFormatError(ValueError):
    """Corrupt, truncated, or version-incompatible dataset file."""


@dataclass
class SynthTaskConfig:
    vocab_size: int = 32  # index 0 reserved for BOS
    feature_dim: int = 16
    duration_range: tuple[int, int] = (4, 8)  # raw frames per symbol
    noise_std: float = 0.1
    reorder_window: int = 0  # 0: copy task; w>0: reverse every window of w
    utterance_length_range: tuple[int, int] = (3, 8)
    frame_ms: float = 40.0  # per encoder frame (10 ms raw x downsample 4)
    embedding_seed: int = 0  # fixes the symbol feature table across splits

    def __post_init__(self) -> None:
        self.duration_range = tuple(self.duration_range)
        self.utterance_length_range = tuple(self.utterance_length_range)
        if self.vocab_size < 4:
            raise ValueError("vocab_size must be >= 4 (index 0 is BOS)")
        if self.duration_range[0] < 1 or self.duration_range[0] > self.duration_range[1]:
            raise ValueError("bad duration_range")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.reorder_window < 0:
            raise ValueError("reorder_window must be >= 0")


@dataclass
class Utterance:
    id: str
    features: np.ndarray  # [T, feature_dim] float64 holding float32 values
    source_tokens: list[int]
    target_tokens: list[int]


def symbol_embeddings(config: SynthTaskConfig) -> np.ndarray:
    """The fixed per-symbol feature table the generator renders from.

    Seeded by the task config alone so that train/dev/test splits drawn with
    different seeds still share one rendering of the vocabulary.
    """
    rng = np.random.default_rng([config.embedding_seed, 0xE5])
    return rng.normal(size=(config.vocab_size, config.feature_dim))


def window_reverse(tokens: Sequence[int], window: int) -> list[int]:
    """Reverse each consecutive window of ``window`` tokens (an involution)."""
    tokens = list(tokens)
    if window <= 1:
        return tokens
    out: list[int] = []
    for i in range(0, len(tokens), window):
        out.extend(reversed(tokens[i : i + window]))
    return out


def make_utterance(config: SynthTaskConfig, seed: int, index: int) -> Utterance:
    rng = np.random.default_rng([seed, index])
    table = symbol_embeddings(config)
    lo, hi = config.utterance_length_range
    length = int(rng.integers(lo, hi + 1))
    tokens = rng.integers(1, config.vocab_size, size=length).tolist()
    dmin, dmax = config.duration_range
    durations = rng.integers(dmin, dmax + 1, size=length)
    rows = []
    for tok, dur in zip(tokens, durations):
        block = np.repeat(table[tok][None, :], dur, axis=0)
        if config.noise_std > 0:
            block = block + config.noise_std * rng.normal(size=block.shape)
        rows.append(block)
    features = np.concatenate(rows, axis=0)
    # hold float32-exact values so the file format round-trips bit for bit
    features = features.astype(np.float32).astype(np.float64)
    target = window_reverse(tokens, config.reorder_window)
    return Utterance(
        id=f"{seed}-{index:05d}",
        features=features,
        source_tokens=tokens,
        target_tokens=target,
    )


def generate(config: SynthTaskConfig, count: int, seed: int) -> list[Utterance]:
    return [make_utterance(config, seed, i) for i in range(count)]


def save(dataset: Sequence[Utterance], path: str, config: SynthTaskConfig) -> None:
    with open(path, "w", encoding="utf-8") as f:
        header = {
            "format": FORMAT_NAME,
            "version": FORMAT_VERSION,
            "config": asdict(config),
            "count": len(dataset),
        }
        f.write(json.dumps(header, sort_keys=True) + "\n")
        for utt in dataset:
            rec = {
                "id": utt.id,
                "source_tokens": utt.source_tokens,
                "target_tokens": utt.target_tokens,
                "frames": int(utt.features.shape[0]),
                "features": base64.b64encode(
                    np.ascontiguousarray(utt.features, dtype="<f4").tobytes()
                ).decode("ascii"),
            }
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def load(path: str) -> tuple[list[Utterance], SynthTaskConfig]:
    with open(path, encoding="utf-8") as f:
        first = f.readline()
        if not first:
            raise DataFormatError(f"{path}: empty file")
        try:
            header = json.loads(first)
        except json.JSONDecodeError as e:
            raise DataFormatError(f"{path}: bad header: {e}") from e
        if header.get("format") != FORMAT_NAME:
            raise DataFormatError(f"{path}: not a {FORMAT_NAME} file")
        if header.get("version") != FORMAT_VERSION:
            raise DataFormatError(
                f"{path}: version {header.get('version')} != {FORMAT_VERSION}"
            )
        cfg_dict = dict(header["config"])
        cfg_dict["duration_range"] = tuple(cfg_dict["duration_range"])
        cfg_dict["utterance_length_range"] = tuple(cfg_dict["utterance_length_range"])
        config = SynthTaskConfig(**cfg_dict)
        utts: list[Utterance] = []
        for lineno, line in enumerate(f, start=2):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                raw = base64.b64decode(rec["features"], validate=True)
                frames = int(rec["frames"])
                feats = np.frombuffer(raw, dtype="<f4")
                if feats.size != frames * config.feature_dim:
                    raise DataFormatError(
                        f"{path}:{lineno}: payload holds {feats.size} floats, "
                        f"want {frames * config.feature_dim}"
                    )
                utts.append(
                    Utterance(
                        id=rec["id"],
                        features=feats.reshape(frames, config.feature_dim).astype(np.float64),
                        source_tokens=[int(t) for t in rec["source_tokens"]],
                        target_tokens=[int(t) for t in rec["target_tokens"]],
                    )
                )
            except DataFormatError:
                raise
            except (json.JSONDecodeError, KeyError, ValueError) as e:
                raise DataFormatError(f"{path}:{lineno}: bad record: {e}") from e
        if len(utts) != header.get("count"):
            raise DataFormatError(
                f"{path}: truncated: header promises {header.get('count')} records, "
                f"found {len(utts)}"
            )
    return utts, config


def write_vocab(path: str, config: SynthTaskConfig) -> None:
    """One symbol per line; the line number is the token index."""
    with open(path, "w", encoding="utf-8") as f:
        f.write("<bos>\n")
        for i in range(1, config.vocab_size):
            f.write(f"tok_{i:03d}\n")


def read_vocab(path: str) -> list[str]:
    with open(path, encoding="utf-8") as f:
        return [line.rstrip("\n") for line in f if line.strip()]
