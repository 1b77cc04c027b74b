#!/usr/bin/env python3
"""Benchmark the lattice forward-backward backends.

Times the compiled kernel against the numpy fallback (and, for context, the
tape-through-the-recursion gradient) over a range of lattice sizes:

    python3 benchmarks/bench_rnnt_dp.py [--repeats 20]
"""

import argparse
import time

import numpy as np

from taed import kernels, losses
from taed.autodiff import Graph, Tensor


def bench(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeats", type=int, default=20)
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    sizes = [(8, 4, 33), (24, 8, 33), (48, 16, 33), (96, 24, 129)]
    backends = kernels.available_backends()
    print(f"available backends: {backends} (selected: {kernels.BACKEND})")
    header = f"{'T':>4} {'U':>4} {'K':>4}"
    for b in backends:
        header += f"  {b + ' (ms)':>14}"
    header += f"  {'autodiff (ms)':>14}  {'speedup':>8}"
    print(header)

    for T, U, K in sizes:
        logits = rng.normal(size=(T, U + 1, K))
        lp = logits - np.log(np.exp(logits).sum(-1, keepdims=True))
        labels = rng.integers(0, K - 1, size=U)
        times = {}
        for backend in backends:
            times[backend] = bench(
                lambda: kernels.rnnt_forward_backward(lp, labels, K - 1, backend=backend),
                args.repeats,
            )

        def autodiff_route():
            t = Tensor(logits, requires_grad=True)
            with Graph() as g:
                g.backward(losses.rnnt_loss(t, labels, method="autodiff"))

        times["autodiff"] = bench(autodiff_route, max(2, args.repeats // 4))
        row = f"{T:>4} {U:>4} {K:>4}"
        for b in backends:
            row += f"  {times[b] * 1e3:>14.3f}"
        row += f"  {times['autodiff'] * 1e3:>14.3f}"
        if "ext" in times:
            row += f"  {times['python'] / times['ext']:>7.1f}x"
        print(row)


if __name__ == "__main__":
    main()
