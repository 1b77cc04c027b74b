"""Quality and latency metrics.

Latency works on per-token delays d(1..n): the cumulative source
milliseconds consumed when each token was written.  The lagging metrics
follow the usual simultaneous-translation conventions: with rate
r = ref_len / source_total,

    AL   = mean over i <= tau* of  d(i) - (i-1)/r,   tau* = first i with
           d(i) = source_total (all tokens if none reaches it)
    LAAL = same with r' = max(ref_len, hyp_len) / source_total
    AP   = sum d(i) / (hyp_len * source_total)
    DAL  = mean over all i of d'(i) - (i-1)/r, d'(i) = max(d(i), d'(i-1) + 1/r)

An empty hypothesis is treated as maximally lagged (AL = source_total,
AP = 1), so corpus aggregation never divides by zero.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

from .streaming import StreamingTrace

__all__ = [
    "wer",
    "edit_distance",
    "bleu",
    "average_lagging",
    "laal",
    "ap",
    "dal",
    "LatencyReport",
    "latency_report",
    "write_report",
]


def edit_distance(a: Sequence, b: Sequence) -> int:
    """Levenshtein distance with unit costs."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, start=1):
        cur = [i]
        for j, y in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[-1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def wer(ref: Sequence, hyp: Sequence) -> float:
    """Edit distance normalized by the reference length."""
    if len(ref) == 0:
        raise ValueError("WER needs a non-empty reference")
    return edit_distance(ref, hyp) / len(ref)


def _ngrams(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(refs: Sequence[Sequence], hyps: Sequence[Sequence], max_n: int = 4) -> float:
    """Corpus BLEU on token sequences: n-grams 1..4, exponential smoothing
    for zero counts, brevity penalty.  Scores are on the 0..100 scale."""
    if len(refs) != len(hyps):
        raise ValueError("refs and hyps must pair up")
    correct = [0] * max_n
    total = [0] * max_n
    ref_len = hyp_len = 0
    for ref, hyp in zip(refs, hyps):
        ref_len += len(ref)
        hyp_len += len(hyp)
        for n in range(1, max_n + 1):
            hyp_counts = _ngrams(hyp, n)
            ref_counts = _ngrams(ref, n)
            total[n - 1] += max(len(hyp) - n + 1, 0)
            correct[n - 1] += sum(min(c, ref_counts[g]) for g, c in hyp_counts.items())
    if hyp_len == 0:
        return 0.0
    smooth = 1.0
    log_prec = 0.0
    for n in range(max_n):
        if total[n] == 0:
            # no hypothesis n-grams of this order anywhere: score is 0
            return 0.0
        if correct[n] == 0:
            smooth *= 2.0
            p = 1.0 / (smooth * total[n])
        else:
            p = correct[n] / total[n]
        log_prec += math.log(p) / max_n
    bp = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_prec)


# ---------------------------------------------------------------------------
# latency


def _delays_of(trace: StreamingTrace | Sequence[float]) -> tuple[list[float], float]:
    if isinstance(trace, StreamingTrace):
        return list(trace.delays), float(trace.source_total_ms)
    raise TypeError("latency metrics expect a StreamingTrace")


def average_lagging(trace: StreamingTrace, ref_len: int) -> float:
    delays, total = _delays_of(trace)
    return _lagging(delays, total, ref_len)


def laal(trace: StreamingTrace, ref_len: int, hyp_len: int | None = None) -> float:
    delays, total = _delays_of(trace)
    if hyp_len is None:
        hyp_len = len(delays)
    return _lagging(delays, total, max(ref_len, hyp_len))


def _lagging(delays: list[float], total: float, target_len: int) -> float:
    if not delays:
        return total
    if target_len <= 0:
        raise ValueError("need a positive target length")
    rate = target_len / total
    acc = 0.0
    cutoff = len(delays)
    for i, d in enumerate(delays, start=1):
        acc += d - (i - 1) / rate
        if d >= total - 1e-9:
            cutoff = i
            break
    return acc / cutoff


def ap(trace: StreamingTrace, hyp_len: int | None = None) -> float:
    delays, total = _delays_of(trace)
    if hyp_len is None:
        hyp_len = len(delays)
    if hyp_len == 0:
        return 1.0
    return sum(delays) / (hyp_len * total)


def dal(trace: StreamingTrace, ref_len: int) -> float:
    delays, total = _delays_of(trace)
    if not delays:
        return total
    rate = ref_len / total
    acc = 0.0
    d_prev = -math.inf
    for i, d in enumerate(delays, start=1):
        d_prev = max(d, d_prev + 1.0 / rate) if i > 1 else d
        acc += d_prev - (i - 1) / rate
    return acc / len(delays)


@dataclass
class LatencyReport:
    """Per-utterance latency values plus corpus means."""

    per_utt: list[dict] = field(default_factory=list)

    def add(self, utt_id: str, trace: StreamingTrace, ref_len: int) -> dict:
        hyp_len = len(trace.delays)
        row = {
            "id": utt_id,
            "AL": average_lagging(trace, ref_len),
            "LAAL": laal(trace, ref_len, hyp_len),
            "AP": ap(trace, hyp_len),
            "DAL": dal(trace, ref_len),
            "hyp_len": hyp_len,
            "ref_len": ref_len,
            "source_ms": trace.source_total_ms,
        }
        self.per_utt.append(row)
        return row

    def corpus_means(self) -> dict:
        if not self.per_utt:
            return {k: float("nan") for k in ("AL", "LAAL", "AP", "DAL")}
        return {
            k: sum(r[k] for r in self.per_utt) / len(self.per_utt)
            for k in ("AL", "LAAL", "AP", "DAL")
        }


def latency_report(traces: Sequence[StreamingTrace], ref_lens: Sequence[int]) -> LatencyReport:
    report = LatencyReport()
    for i, (trace, ref_len) in enumerate(zip(traces, ref_lens)):
        report.add(f"utt{i:05d}", trace, ref_len)
    return report


def write_report(path_prefix: str, corpus_row: dict, per_utt_rows: Sequence[dict]) -> tuple[str, str]:
    """Write a human-readable table and a machine-readable jsonl record file."""
    txt_path = f"{path_prefix}.txt"
    jsonl_path = f"{path_prefix}.jsonl"
    keys = list(corpus_row.keys())
    with open(txt_path, "w", encoding="utf-8") as f:
        widths = {k: max(len(k), 12) for k in keys}
        f.write("  ".join(k.ljust(widths[k]) for k in keys) + "\n")
        f.write("  ".join("-" * widths[k] for k in keys) + "\n")

        def fmt(v):
            return f"{v:.4f}" if isinstance(v, float) else str(v)

        f.write("  ".join(fmt(corpus_row[k]).ljust(widths[k]) for k in keys) + "\n")
    with open(jsonl_path, "w", encoding="utf-8") as f:
        f.write(json.dumps({"kind": "corpus", **corpus_row}) + "\n")
        for row in per_utt_rows:
            f.write(json.dumps({"kind": "utterance", **row}) + "\n")
    return txt_path, jsonl_path
