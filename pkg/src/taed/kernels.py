"""Lattice forward-backward kernels with import-time backend selection.

The hot loop of transducer training is the alpha/beta recursion over the
[T, U+1] lattice; it is inherently sequential per anti-diagonal and too
slow as scalar Python.  Two interchangeable backends live here:

* ``ext`` — the Cython extension ``taed._rnntdp`` (preferred when built);
* ``python`` — a numpy implementation vectorized along anti-diagonals.

Set ``TAED_RNNT_BACKEND=python`` to force the fallback.  Both backends
produce the same numbers (tests pin them together to 1e-12).
"""

from __future__ import annotations

import os

import numpy as np

try:
    from . import _rnntdp as _ext
except ImportError:  # pragma: no cover - depends on the build environment
    _ext = None

if os.environ.get("TAED_RNNT_BACKEND") == "python":
    _ext = None

BACKEND = "ext" if _ext is not None else "python"

__all__ = ["BACKEND", "rnnt_forward_backward", "rnnt_alpha", "available_backends"]


def available_backends() -> list[str]:
    names = ["python"]
    try:
        from . import _rnntdp  # noqa: F401

        names.insert(0, "ext")
    except ImportError:
        pass
    return names


def _check_inputs(lp: np.ndarray, labels: np.ndarray, blank: int) -> None:
    T, U1, K = lp.shape
    if labels.shape != (U1 - 1,):
        raise ValueError(f"labels must have length U={U1 - 1}, got {labels.shape}")
    if not (0 <= blank < K):
        raise ValueError(f"blank index {blank} out of range for {K} classes")
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise ValueError("label id out of range")


def _diag_cells(s: int, T: int, U: int) -> tuple[np.ndarray, np.ndarray]:
    t = np.arange(max(0, s - U), min(T - 1, s) + 1)
    return t, s - t


def _alpha_py(lp: np.ndarray, labels: np.ndarray, blank: int) -> np.ndarray:
    T, U1, _ = lp.shape
    U = U1 - 1
    alpha = np.full((T, U1), -np.inf)
    alpha[0, 0] = 0.0
    emit = lp[np.arange(T)[:, None], np.arange(U)[None, :], labels[None, :]] if U else None
    blk = lp[:, :, blank]
    for s in range(1, T + U):
        t, u = _diag_cells(s, T, U)
        from_emit = np.full(t.shape, -np.inf)
        pick = u > 0
        if pick.any():
            te, ue = t[pick], u[pick]
            from_emit[pick] = alpha[te, ue - 1] + emit[te, ue - 1]
        from_blank = np.full(t.shape, -np.inf)
        pick = t > 0
        if pick.any():
            tb, ub = t[pick], u[pick]
            from_blank[pick] = alpha[tb - 1, ub] + blk[tb - 1, ub]
        alpha[t, u] = np.logaddexp(from_emit, from_blank)
    return alpha


def _beta_py(lp: np.ndarray, labels: np.ndarray, blank: int) -> np.ndarray:
    T, U1, _ = lp.shape
    U = U1 - 1
    beta = np.full((T, U1), -np.inf)
    beta[T - 1, U] = lp[T - 1, U, blank]
    emit = lp[np.arange(T)[:, None], np.arange(U)[None, :], labels[None, :]] if U else None
    blk = lp[:, :, blank]
    for s in range(T + U - 2, -1, -1):
        t, u = _diag_cells(s, T, U)
        to_emit = np.full(t.shape, -np.inf)
        pick = u < U
        if pick.any():
            te, ue = t[pick], u[pick]
            to_emit[pick] = emit[te, ue] + beta[te, ue + 1]
        to_blank = np.full(t.shape, -np.inf)
        pick = t < T - 1
        if pick.any():
            tb, ub = t[pick], u[pick]
            to_blank[pick] = blk[tb, ub] + beta[tb + 1, ub]
        beta[t, u] = np.logaddexp(to_emit, to_blank)
    return beta


def _forward_backward_py(lp: np.ndarray, labels: np.ndarray, blank: int):
    T, U1, _ = lp.shape
    U = U1 - 1
    alpha = _alpha_py(lp, labels, blank)
    beta = _beta_py(lp, labels, blank)
    log_z = beta[0, 0]
    grad = np.zeros_like(lp)
    blk = lp[:, :, blank]
    with np.errstate(invalid="ignore"):
        if U:
            rows = np.arange(T)[:, None]
            cols = np.arange(U)[None, :]
            emit_occ = np.exp(alpha[:, :U] + lp[rows, cols, labels[None, :]] + beta[:, 1:] - log_z)
            grad[rows, cols, labels[None, :]] -= emit_occ
        blank_occ = np.exp(alpha[: T - 1, :] + blk[: T - 1, :] + beta[1:, :] - log_z)
        grad[: T - 1, :, blank] -= blank_occ
    grad[T - 1, U, blank] -= np.exp(alpha[T - 1, U] + blk[T - 1, U] - log_z)
    return -log_z, grad


def rnnt_forward_backward(
    lp: np.ndarray, labels, blank: int, backend: str | None = None
) -> tuple[float, np.ndarray]:
    """Negative log-likelihood of the label sequence plus d(loss)/d(lp).

    ``lp`` is the [T, U+1, K] grid of log-probabilities; ``labels`` the U
    target ids (each < blank).
    """
    lp = np.ascontiguousarray(lp, dtype=np.float64)
    labels = np.ascontiguousarray(labels, dtype=np.int64)
    _check_inputs(lp, labels, blank)
    use = backend or BACKEND
    if use == "ext":
        if _ext is None:
            raise RuntimeError("compiled kernel requested but not built")
        loss, grad = _ext.forward_backward(lp, labels, blank)
        return float(loss), grad
    if use == "python":
        loss, grad = _forward_backward_py(lp, labels, blank)
        return float(loss), grad
    raise ValueError(f"unknown backend {use!r}")


def rnnt_alpha(lp: np.ndarray, labels, blank: int) -> np.ndarray:
    """Forward-score grid, for lattice inspection and tests."""
    lp = np.ascontiguousarray(lp, dtype=np.float64)
    labels = np.ascontiguousarray(labels, dtype=np.int64)
    _check_inputs(lp, labels, blank)
    return _alpha_py(lp, labels, blank)
