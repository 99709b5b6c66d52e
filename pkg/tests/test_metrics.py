import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mdns.exact import ExactScore, all_states
from mdns.lattice import ModelSpec, reward
from mdns.masked import sample_trajectories
from mdns.metrics import (ObservableReport, ess, ising_observables, observable_errors,
                          observables, offsets, path_kl_estimate, potts_observables)
from mdns.rng import stream
from mdns.score import Arch, init_model


def test_ess_examples():
    assert ess(np.zeros(7)) == pytest.approx(1.0)
    assert ess(np.array([0.0, -1e4, -1e4, -1e4])) == pytest.approx(0.25)
    assert ess(np.log([2.0, 1.0])) == pytest.approx(0.9)
    with pytest.raises(ValueError):
        ess(np.array([]))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=1, max_size=20), st.floats(-500, 500))
def test_ess_shift_invariant(w, c):
    w = np.array(w)
    assert ess(w + c) == pytest.approx(ess(w), rel=1e-9)
    assert 1 / len(w) - 1e-12 <= ess(w) <= 1 + 1e-12


def test_path_kl(ising3, table3):
    b = sample_trajectories(ExactScore(table3), ising3, 64, stream(0, "s"))
    assert abs(path_kl_estimate(b.log_weight, table3.log_Z)) < 1e-8
    # zero-init: KL = log Z - E_unif r, by enumeration
    expect = table3.log_Z - reward(ising3, all_states(2, 9)).mean()
    m = init_model(Arch(9, 2), stream(0, "i"), spec=ising3)
    b = sample_trajectories(m, ising3, 50_000, stream(1, "s"))
    assert expect > 0
    assert path_kl_estimate(b.log_weight, table3.log_Z) == pytest.approx(expect, abs=0.03)


def const_report(L, c):
    K = len(offsets(L))
    z = np.zeros((K, K))
    return ObservableReport(L, "ising", np.full((L, L), c), np.full(K, c), np.full(K, c), z, z,
                            np.zeros((L // 2 + 1, 2)), 1)


def test_mag_err_example():
    # L=4: 5 offsets per direction, (5c + 5c) / (2L)
    err = observable_errors(const_report(4, 0.1), const_report(4, 0.0))
    assert err["mag_err"] == pytest.approx(0.125)
    assert err["corr_err"] == 0.0


def distinct(L):
    # entries pairing different physical rows (offsets alias mod L)
    k = offsets(L) % L
    return k[:, None] != k[None, :]


def test_ising_observable_cases():
    up = np.full((10, 16), 2)
    r = ising_observables(up, 4)
    assert np.allclose(r.mag_site, 1.0)
    assert np.allclose(r.corr_row, 0.0) and np.allclose(r.corr_col, 0.0)
    x = np.random.default_rng(0).integers(1, 3, (40_000, 16))
    r = ising_observables(x, 4)
    assert np.abs(r.corr_row[distinct(4)]).max() < 4 * 4 / np.sqrt(40_000)


def test_potts_observable_cases():
    same = np.full((6, 9), 2)
    assert np.allclose(potts_observables(same, 3, 3).mag_site, 1.0)
    balanced = np.repeat(np.array([[1] * 9, [2] * 9, [3] * 9]), 5, axis=0)
    assert np.allclose(potts_observables(balanced, 3, 3).mag_site, 0.0)
    x = np.random.default_rng(1).integers(1, 4, (60_000, 9))
    r = potts_observables(x, 3, 3)
    assert np.abs(r.corr_row[distinct(3)]).max() < 0.05


def test_sw_correlations_decay():
    from mdns.mcmc import ChainConfig, run_chain
    spec = ModelSpec.ising(4, 1.0, 0.0, 0.28)
    x = run_chain(spec, "sw", ChainConfig(chains=256, burnin=20, thin=2, rounds=200, seed=3))
    c = observables(x, spec).corr_vs_distance[:, 0]
    assert c[0] > c[1] > c[2] >= -0.02


def test_corr_csv(tmp_path):
    r = ising_observables(np.random.default_rng(0).integers(1, 3, (100, 9)), 3)
    r.write_corr_csv(tmp_path / "c.csv")
    assert (tmp_path / "c.csv").read_text().splitlines()[0] == "r,C_row,C_col"
    assert '"mag_site"' in r.to_json()


samples4 = st.integers(0, 2 ** 31 - 1).map(
    lambda s: np.random.default_rng(s).integers(1, 3, (50, 16)))


@settings(max_examples=25, deadline=None)
@given(samples4, samples4, samples4)
def test_observable_errors_pseudometric(a, b, c):
    ra, rb, rc = (ising_observables(x, 4) for x in (a, b, c))
    for key in ("mag_err", "corr_err"):
        ab = observable_errors(ra, rb)[key]
        assert ab == pytest.approx(observable_errors(rb, ra)[key])
        assert observable_errors(ra, ra)[key] == 0
        assert ab <= observable_errors(ra, rc)[key] + observable_errors(rc, rb)[key] + 1e-12


@settings(max_examples=25, deadline=None)
@given(samples4, st.randoms(use_true_random=False))
def test_observables_permutation_invariant(x, rnd):
    order = list(range(len(x)))
    rnd.shuffle(order)
    a, b = ising_observables(x, 4), ising_observables(x[order], 4)
    for f in dataclasses.fields(a):
        va, vb = getattr(a, f.name), getattr(b, f.name)
        if isinstance(va, np.ndarray):
            assert np.allclose(va, vb)


def test_shape_mismatch():
    with pytest.raises(ValueError):
        observable_errors(const_report(4, 0.0), const_report(3, 0.0))
