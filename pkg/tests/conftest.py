import numpy as np
import pytest

from taed.autodiff import Graph, Tensor


def central_diff(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function w.r.t. every entry of x."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + eps
        hi = f(x)
        flat[i] = keep - eps
        lo = f(x)
        flat[i] = keep
        gf[i] = (hi - lo) / (2 * eps)
    return g


def analytic_grad(op, *arrays, wrt: int = 0):
    """Gradient of sum(op(*tensors)) w.r.t. arrays[wrt], via the tape."""
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    with Graph() as g:
        out = op(*tensors)
        loss = _sum_all(out)
        g.backward(loss)
    return tensors[wrt].grad


def _sum_all(t: Tensor) -> Tensor:
    from taed import autodiff as ad

    return ad.tensor_sum(t)


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-12)
    return float(np.abs(a - b).max(initial=0.0) / denom)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
