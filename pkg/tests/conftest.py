import numpy as np
import pytest

from mdns.exact import build_exact
from mdns.lattice import ModelSpec


@pytest.fixture(scope="session")
def ising3():
    return ModelSpec.ising(3, J=1.0, h=0.1, beta=0.28)


@pytest.fixture(scope="session")
def table3(ising3):
    return build_exact(ising3)


@pytest.fixture(scope="session")
def ising2():
    return ModelSpec.ising(2, J=1.0, h=0.1, beta=0.28)


def _max_rel_err(model, loss, grad, per_tensor=5, h=1e-6):
    """Largest relative error between analytic grads and central differences."""
    model.zero_grad()
    grad()
    worst = 0.0
    for k, v in model.params.items():
        g = model.grads[k]
        flat = list(np.ndindex(v.shape))
        pick = np.random.default_rng(len(flat)).choice(len(flat), min(per_tensor, len(flat)),
                                                       replace=False)
        for j in pick:
            idx = flat[j]
            old = v[idx]
            v[idx] = old + h
            fp = loss()
            v[idx] = old - h
            fm = loss()
            v[idx] = old
            fd = (fp - fm) / (2 * h)
            scale = max(abs(fd), abs(g[idx]))
            if scale > 1e-7:
                worst = max(worst, abs(fd - g[idx]) / scale)
    return worst


@pytest.fixture
def fd_check():
    return _max_rel_err


_ACCEPTANCE = []


@pytest.fixture
def acceptance():
    """Record one pass/fail line for an acceptance criterion and assert it."""
    def record(label, ok, detail):
        _ACCEPTANCE.append((label, bool(ok), detail))
        assert ok, f"{label}: {detail}"
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for label, ok, detail in _ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {label}: {detail}")
