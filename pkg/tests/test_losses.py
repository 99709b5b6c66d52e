import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mdns import losses
from mdns.exact import ExactScore, exact_marginals, exact_sample
from mdns.lattice import MASK, ModelSpec
from mdns.masked import TrajectoryBatch, WeightedSamples, path_log_weights, sample_trajectories
from mdns.rng import stream
from mdns.score import Arch, init_model
from mdns.trainer import AdamState, adam_step

weights = st.lists(st.floats(-20, 20), min_size=2, max_size=16).map(np.array)


def small_model(spec, seed=0, hidden=(8,)):
    m = init_model(Arch(spec.D, spec.N, hidden=hidden), stream(seed, "i"), spec=spec,
                   dtype=np.float64)
    r = np.random.default_rng(seed)
    for v in m.params.values():
        v[...] = r.normal(0, 0.3, v.shape)
    return m


def test_estimate_logz_examples(ising3, table3):
    assert losses.estimate_logZ(np.full(5, 1.7)) == pytest.approx(1.7)
    assert losses.estimate_logZ(np.log([2.0, 4.0])) == pytest.approx(math.log(3))
    m = init_model(Arch(9, 2), stream(0, "i"), spec=ising3)
    b = sample_trajectories(m, ising3, 4096, stream(0, "z"))
    # relative standard error of the mean of exp(r - log Z) under uniform finals
    se = np.std(table3.probs * 512) / math.sqrt(4096)
    assert abs(losses.estimate_logZ(b.log_weight) - table3.log_Z) < 3 * se


def test_median_logz():
    w = np.random.default_rng(0).normal(size=20)
    assert losses.median_logZ(w, 1) == pytest.approx(losses.estimate_logZ(w))
    assert losses.median_logZ(w, 20) == pytest.approx(np.median(w))
    with pytest.raises(ValueError):
        losses.median_logZ(w, 3)


@settings(max_examples=50, deadline=None)
@given(weights)
def test_estimate_logz_direct(w):
    assert losses.estimate_logZ(w) == pytest.approx(math.log(np.mean(np.exp(w))), rel=1e-9,
                                                    abs=1e-9)


def test_coefficient_examples():
    value, c = losses.path_coefficients("lv", np.array([0.0, 2.0]))
    assert value == pytest.approx(2.0)
    assert c[1] > 0 > c[0]
    _, c = losses.path_coefficients("rerf", np.full(4, 3.0))
    assert np.all(c == 0)
    value, c = losses.path_coefficients("ce", np.array([0.0, 50.0]))
    assert value == pytest.approx(50.0, abs=1e-12)


def test_rerf_single_trajectory_adjoint():
    spec = ModelSpec.ising(2, 1.0, 0.0, 0.3)
    m = small_model(spec)
    b = sample_trajectories(m, spec, 1, stream(1, "s"))
    out = losses.rerf(b, m, baseline=0.0)
    first = out.plan[0]
    pos, tok = b.perm[0, 0], b.final[0, b.perm[0, 0]]
    s = first.cache.out[0, pos, tok - 1]
    assert first.adjoint[0, pos, tok - 1] == pytest.approx(-b.log_weight[0] / s)


def test_lv_adjoint_sign():
    spec = ModelSpec.ising(2, 1.0, 0.1, 0.3)
    m = small_model(spec)
    b = sample_trajectories(m, spec, 8, stream(2, "s"))
    out = losses.lv(b, m)
    hi = int(np.argmax(b.log_weight))
    step = out.plan[0]
    pos, tok = b.perm[hi, 0], b.final[hi, b.perm[hi, 0]]
    assert step.adjoint[hi, pos, tok - 1] < 0


def test_lv_exact_score(ising3, table3):
    b = sample_trajectories(ExactScore(table3), ising3, 256, stream(3, "s"))
    assert losses.path_coefficients("lv", b.log_weight)[0] <= 1e-8


@settings(max_examples=30, deadline=None)
@given(weights, st.floats(-50, 50))
def test_shift_invariance(w, c):
    for obj in ("lv", "ce", "rerf"):
        v1, c1 = losses.path_coefficients(obj, w)
        v2, c2 = losses.path_coefficients(obj, w + c)
        assert np.allclose(c1, c2, atol=1e-9)
        if obj == "lv":
            assert v1 == pytest.approx(v2, abs=1e-7)


@pytest.mark.parametrize("objective", ["rerf", "lv", "ce"])
def test_path_loss_gradients(fd_check, ising2, objective):
    m = small_model(ising2)
    b = sample_trajectories(m, ising2, 6, stream(4, "s"))
    _, coef = losses.path_coefficients(objective, b.log_weight)
    if objective == "lv":
        loss = lambda: losses.path_coefficients("lv", path_log_weights(m, ising2, b))[0]
    else:
        # the estimator's surrogate: detached coefficients times W(theta)
        loss = lambda: float((coef * path_log_weights(m, ising2, b)).sum())
    err = fd_check(m, loss, lambda: losses.path_loss(objective, b, m).backward(m))
    assert err <= 1e-3


@pytest.mark.parametrize("scheme", ["one", "inv"])
def test_wdce_gradient(fd_check, ising2, scheme):
    m = small_model(ising2)
    b = sample_trajectories(m, ising2, 6, stream(5, "s"))
    buf = WeightedSamples(b.final, b.log_weight)
    f = lambda: losses.wdce(buf, m, 3, scheme, stream(6, "r"))
    err = fd_check(m, lambda: f().value, lambda: f().backward(m))
    assert err <= 1e-3


def test_wdce_examples(ising2):
    m = small_model(ising2)
    x = np.array([[1, 2, 2, 1], [2, 2, 2, 2]])
    # no masks: zero contribution
    out = losses.wdce(WeightedSamples(x, np.zeros(2)), m, 2, "one", stream(0, "r"),
                      lam=np.full((2, 2), 1e-12))
    assert out.value == 0.0
    # uniform weights: plain denoising cross-entropy
    lam = np.full((2, 1), 1.0)
    out = losses.wdce(WeightedSamples(x, np.array([3.0, 3.0])), m, 1, "one", stream(0, "r"),
                      lam=lam)
    lp = m.log_probs(np.zeros((2, 4), dtype=int))
    expect = -0.5 * sum(lp[i, np.arange(4), x[i] - 1].sum() for i in range(2))
    assert out.value == pytest.approx(expect)
    # one dominant weight
    out2 = losses.wdce(WeightedSamples(x, np.array([0.0, 80.0])), m, 1, "one", stream(0, "r"),
                       lam=lam)
    assert out2.value == pytest.approx(-lp[1, np.arange(4), x[1] - 1].sum())


def test_ce_uniform_weights_equal_rerf_scaling(ising2):
    m = small_model(ising2)
    b = sample_trajectories(m, ising2, 4, stream(7, "s"))
    b = TrajectoryBatch(b.perm, b.final, np.full(4, 1.5))
    v, c = losses.path_coefficients("ce", b.log_weight)
    assert v == pytest.approx(1.5)
    assert np.allclose(c, 0.25)


def test_wdce_fits_exact_conditionals(ising3, table3):
    m = init_model(Arch(9, 2, hidden=(64, 64)), stream(0, "i"), spec=ising3)
    data = exact_sample(table3, stream(0, "d"), 256)
    buf = WeightedSamples(data, np.zeros(len(data)))
    opt = AdamState.zeros_like(m.params)
    for step in range(2000):
        m.zero_grad()
        losses.wdce(buf, m, 4, "one", stream(1, "w", step)).backward(m)
        adam_step(m.params, m.grads, opt, 1e-3)
        if step % 10 == 9:
            data = exact_sample(table3, stream(0, "d", step), 256)
            buf = WeightedSamples(data, np.zeros(len(data)))
    rng = np.random.default_rng(0)
    tvs = []
    for _ in range(200):
        x = rng.integers(1, 3, 9)
        x[rng.random(9) < rng.random()] = MASK
        if not (x == MASK).any():
            continue
        exact = exact_marginals(table3, x)
        s = m.forward(x)[0]
        mk = x == MASK
        tvs.append(0.5 * np.abs(s[mk] - exact[mk]).sum(1).mean())
    assert np.mean(tvs) <= 0.05
