import itertools
import math

import numpy as np
import pytest

from taed import autodiff as ad
from taed import losses
from taed.autodiff import Graph, NumericError, Tensor

from conftest import central_diff, rel_err


def brute_force_rnnt(lp: np.ndarray, labels, blank=None) -> float:
    """-log sum over every monotone lattice path, by explicit enumeration.

    A path is an interleaving of U emits and T-1 frame advances followed by
    the mandatory final blank; probabilities are read off the cell a move
    leaves from.
    """
    T, U1, _ = lp.shape
    U = U1 - 1
    if blank is None:
        blank = lp.shape[-1] - 1
    scores = []
    for emit_positions in itertools.combinations(range(T - 1 + U), U):
        t = u = 0
        logp = 0.0
        for step in range(T - 1 + U):
            if step in emit_positions:
                logp += lp[t, u, labels[u]]
                u += 1
            else:
                logp += lp[t, u, blank]
                t += 1
        logp += lp[T - 1, U, blank]
        scores.append(logp)
    return -float(np.logaddexp.reduce(scores))


def random_log_probs(rng, T, U, K=5):
    x = rng.normal(size=(T, U + 1, K))
    return x - np.log(np.exp(x).sum(-1, keepdims=True))


def test_single_mandatory_blank(rng):
    lp = random_log_probs(rng, 1, 0)
    loss = losses.rnnt_loss(Tensor(lp * 0 + lp), [], method="autodiff")
    assert float(loss.data) == pytest.approx(-lp[0, 0, -1], abs=1e-12)


def test_two_paths_uniform():
    K = 3
    lp = np.full((2, 2, K), -math.log(K))
    loss = losses.rnnt_loss(Tensor(np.zeros((2, 2, K))), [1])
    # two monotone paths, each a product of three uniform probabilities
    want = -np.logaddexp(3 * -math.log(K), 3 * -math.log(K))
    assert float(loss.data) == pytest.approx(want, abs=1e-12)
    assert float(loss.data) == pytest.approx(brute_force_rnnt(lp, [1]), abs=1e-12)


@pytest.mark.parametrize("method", ["autodiff", "forward-backward"])
def test_oracle_equivalence_small_lattices(method, rng):
    for T in range(1, 5):
        for U in range(0, 4):
            for _ in range(5):
                labels = rng.integers(0, 4, size=U)
                logits = rng.normal(size=(T, U + 1, 5))
                loss = losses.rnnt_loss(Tensor(logits), labels, method=method)
                lp = logits - np.log(np.exp(logits).sum(-1, keepdims=True))
                want = brute_force_rnnt(lp, labels)
                assert abs(float(loss.data) - want) < 1e-9


def test_gradient_methods_agree(rng):
    logits = rng.normal(size=(3, 3, 5))
    labels = [1, 3]
    grads = {}
    for method in ("autodiff", "forward-backward"):
        t = Tensor(logits, requires_grad=True)
        with Graph() as g:
            g.backward(losses.rnnt_loss(t, labels, method=method))
        grads[method] = t.grad
    assert np.abs(grads["autodiff"] - grads["forward-backward"]).max() < 1e-8


@pytest.mark.parametrize("method", ["autodiff", "forward-backward"])
def test_gradient_matches_finite_differences(method, rng):
    logits = rng.normal(size=(3, 3, 5))
    labels = [2, 0]
    t = Tensor(logits, requires_grad=True)
    with Graph() as g:
        g.backward(losses.rnnt_loss(t, labels, method=method))

    def f(x):
        return float(losses.rnnt_loss(Tensor(x), labels, method="autodiff").data)

    fd = central_diff(f, logits.copy())
    assert rel_err(t.grad, fd) < 1e-5


def test_shift_invariance_per_cell(rng):
    """Adding a constant to every class logit of one cell cannot change the loss."""
    logits = rng.normal(size=(4, 3, 6))
    labels = [1, 4]
    base = float(losses.rnnt_loss(Tensor(logits), labels).data)
    shifted = logits.copy()
    shifted[2, 1, :] += 7.3
    after = float(losses.rnnt_loss(Tensor(shifted), labels).data)
    assert after == pytest.approx(base, abs=1e-9)


def test_rnnt_rejects_bad_inputs(rng):
    logits = rng.normal(size=(2, 2, 4))
    with pytest.raises(NumericError):
        bad = logits.copy()
        bad[0, 0, 0] = np.nan
        losses.rnnt_loss(Tensor(bad), [1])
    with pytest.raises(ValueError):
        losses.rnnt_loss(Tensor(logits), [3])  # label collides with blank
    with pytest.raises(ValueError):
        losses.rnnt_loss(Tensor(rng.normal(size=(1, losses.MAX_TARGET_LEN + 2, 4))),
                         [0] * (losses.MAX_TARGET_LEN + 1))


def test_fast_alignment_tables():
    assert losses.fast_alignment(10, 5, 1.0).timesteps == [2, 4, 6, 8, 10]
    assert losses.fast_alignment(10, 5, 2.0).timesteps == [1, 2, 3, 4, 5]
    assert losses.fast_alignment(10, 5, 0.1).timesteps == [10, 10, 10, 10, 10]


def test_fast_alignment_offline_clamp():
    # speedup below 1/U pins everything to the last frame
    for u_len in (1, 3, 7):
        align = losses.fast_alignment(9, u_len, 1.0 / (u_len + 1))
        assert align.timesteps == [9] * u_len


def test_fast_alignment_monotone_in_speedup(rng):
    for _ in range(200):
        t_prime = int(rng.integers(1, 40))
        u_len = int(rng.integers(1, 12))
        l1, l2 = sorted(rng.uniform(0.05, 4.0, size=2))
        a1 = losses.fast_alignment(t_prime, u_len, l1).timesteps
        a2 = losses.fast_alignment(t_prime, u_len, l2).timesteps
        assert all(x >= y for x, y in zip(a1, a2))
        assert all(a1[i] <= a1[i + 1] for i in range(u_len - 1))
        assert all(1 <= t <= t_prime for t in a1)


def test_ce_offline_reduction(rng):
    logits = rng.normal(size=(5, 7))
    targets = rng.integers(0, 7, size=4)
    align = losses.fast_alignment(6, 4, 0.01)
    loss = losses.aed_ce_loss([(6, Tensor(logits))], targets, align, label_smoothing=0.0)
    lp = logits - np.log(np.exp(logits).sum(-1, keepdims=True))
    want = -np.mean([lp[u, y] for u, y in enumerate(targets)])
    assert float(loss.data) == pytest.approx(want, abs=1e-12)


def test_ce_one_hot_goes_to_zero():
    targets = [2, 0, 1]
    logits = np.full((4, 3), -1e4)
    for u, y in enumerate(targets):
        logits[u, y] = 1e4
    align = losses.fast_alignment(3, 3, 0.01)
    loss = losses.aed_ce_loss([(3, Tensor(logits))], targets, align, label_smoothing=0.0)
    assert float(loss.data) == pytest.approx(0.0, abs=1e-9)


def test_ce_uniform_logits():
    k = 9
    logits = np.zeros((3, k))
    align = losses.fast_alignment(4, 2, 0.01)
    for smoothing in (0.0, 0.1):
        loss = losses.aed_ce_loss([(4, Tensor(logits))], [0, 5], align, smoothing)
        assert float(loss.data) == pytest.approx(math.log(k), abs=1e-12)


def test_ce_rejects_wrong_alignment_length():
    with pytest.raises(ValueError):
        losses.aed_ce_loss(
            [(3, Tensor(np.zeros((3, 4))))], [1, 2], losses.fast_alignment(3, 1, 1.0), 0.0
        )


def test_ce_picks_horizon_per_token(rng):
    # two horizons with different logits: the early token must read the early pass
    early = rng.normal(size=(3, 5))
    late = rng.normal(size=(3, 5))
    align = losses.FastAlignment([1, 4], 1.0)
    got = losses.aed_ce_loss(
        [(2, Tensor(early)), (4, Tensor(late))], [1, 2], align, label_smoothing=0.0
    )
    lp_e = early - np.log(np.exp(early).sum(-1, keepdims=True))
    lp_l = late - np.log(np.exp(late).sum(-1, keepdims=True))
    want = -(lp_e[0, 1] + lp_l[1, 2]) / 2
    assert float(got.data) == pytest.approx(want, abs=1e-12)


def test_taed_loss_combine():
    r, a = Tensor(2.5), Tensor(0.75)
    assert float(losses.taed_loss(r, a, 0.0).data) == 2.5
    assert float(losses.taed_loss(r, None, 1.0).data) == 2.5
    assert float(losses.taed_loss(r, a, 1.0).data) == pytest.approx(3.25)
    assert float(losses.taed_loss(r, a, 2.0).data) == pytest.approx(4.0)


def test_taed_loss_linear_in_weight(rng):
    r, a = Tensor(rng.normal()), Tensor(abs(rng.normal()))
    w = 1.7
    scaled = float(losses.taed_loss(r, a, w).data) - float(r.data)
    assert scaled == pytest.approx(w * float(a.data), abs=1e-12)


def test_viterbi_alignment_is_monotone(rng):
    lp = random_log_probs(rng, 6, 3)
    frames = losses.viterbi_alignment(lp, [1, 2, 0])
    assert len(frames) == 3
    assert all(1 <= f <= 6 for f in frames)
    assert frames == sorted(frames)


def test_lattice_alpha_terminal_matches_loss(rng):
    lp = random_log_probs(rng, 4, 2)
    labels = [1, 3]
    lat = losses.lattice(lp, labels)
    loss, _ = losses.rnnt_loss_value(lp, labels)
    assert loss == pytest.approx(-(lat.alpha[-1, -1] + lp[-1, -1, -1]), abs=1e-12)
