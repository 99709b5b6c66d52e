"""Brute-force enumeration of small lattice targets.

States are indexed lexicographically in base N over row-major sites, site 0
being the most significant digit: ``index = sum_d (x^d - 1) * N**(D-1-d)``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .lattice import MASK, ModelSpec, energy

STATE_CAP = 2 ** 24
COMPLETION_CAP = 2 ** 20


class CapExceeded(RuntimeError):
    """Enumeration would exceed a configured work cap."""


def state_index(x, N: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.int64)
    D = x.shape[-1]
    place = N ** np.arange(D - 1, -1, -1, dtype=np.int64)
    return ((x - 1) * place).sum(-1)


def index_to_tokens(index, N: int, D: int) -> np.ndarray:
    index = np.asarray(index, dtype=np.int64)
    place = N ** np.arange(D - 1, -1, -1, dtype=np.int64)
    return (index[..., None] // place) % N + 1


def all_states(N: int, D: int) -> np.ndarray:
    return index_to_tokens(np.arange(N ** D), N, D).astype(np.int8)


@dataclass(frozen=True)
class ExactTable:
    spec: ModelSpec
    log_weights: np.ndarray   # -beta * H(x) per state index
    log_Z: float

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_weights - self.log_Z)

    @property
    def energies(self) -> np.ndarray:
        return -self.log_weights / self.spec.beta


def build_exact(spec: ModelSpec, cap: int = STATE_CAP, chunk: int = 2 ** 18) -> ExactTable:
    n_states = spec.N ** spec.D
    if n_states > cap:
        raise CapExceeded(f"enumeration needs {n_states} states, cap is {cap}")
    logw = np.empty(n_states, dtype=np.float64)
    for start in range(0, n_states, chunk):
        idx = np.arange(start, min(start + chunk, n_states))
        logw[start:start + len(idx)] = -spec.beta * energy(spec, index_to_tokens(idx, spec.N, spec.D))
    logw.setflags(write=False)
    return ExactTable(spec, logw, float(logsumexp(logw)))


def _completion_indices(table: ExactTable, x) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Indices of all completions of the masked entries of ``x``.

    Returns (indices, masked sites, digit matrix) where the digit matrix holds
    the 0-based token each completion puts at each masked site.
    """
    spec = table.spec
    x = np.asarray(x, dtype=np.int64)
    N, D = spec.N, spec.D
    masked = np.flatnonzero(x == MASK)
    n_comp = N ** len(masked)
    if n_comp > COMPLETION_CAP:
        raise CapExceeded(f"{n_comp} completions exceed cap {COMPLETION_CAP}")
    place = N ** np.arange(D - 1, -1, -1, dtype=np.int64)
    base = int(((np.where(x == MASK, 1, x) - 1) * place).sum())
    digits = index_to_tokens(np.arange(n_comp), N, len(masked)) - 1 if len(masked) else np.zeros((1, 0), np.int64)
    return base + digits @ place[masked], masked, digits


def exact_conditional(table: ExactTable, x, site: int) -> np.ndarray:
    """P_{X~pi}(X^site = n | unmasked part of x), n = 1..N."""
    x = np.asarray(x)
    if x[site] != MASK:
        raise ValueError(f"site {site} is not masked")
    return exact_marginals(table, x)[site]


def exact_marginals(table: ExactTable, x) -> np.ndarray:
    """(D, N) matrix of exact conditionals at every masked site of ``x``.

    Rows at unmasked sites are one-hot on the observed token.
    """
    spec = table.spec
    idx, masked, digits = _completion_indices(table, x)
    lw = table.log_weights[idx]
    w = np.exp(lw - lw.max())
    w /= w.sum()
    out = np.zeros((spec.D, spec.N))
    x = np.asarray(x)
    um = np.flatnonzero(x != MASK)
    out[um, x[um] - 1] = 1.0
    for j, d in enumerate(masked):
        out[d] = np.bincount(digits[:, j], weights=w, minlength=spec.N)
    return out


def exact_value(table: ExactTable, x) -> float:
    """V(x) = log( N^{-#masked} * sum over completions of exp r )."""
    spec = table.spec
    idx, masked, _ = _completion_indices(table, x)
    return float(logsumexp(table.log_weights[idx]) + (spec.D - len(masked)) * math.log(spec.N))


def histogram(samples, N: int, D: int | None = None) -> np.ndarray:
    samples = np.asarray(samples)
    D = samples.shape[-1] if D is None else D
    return np.bincount(state_index(samples.reshape(-1, D), N), minlength=N ** D)


def divergences(counts, table: ExactTable) -> dict:
    """TV, KL(p_hat||pi) and chi^2(p_hat||pi) of a histogram against pi."""
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        raise ValueError("empty histogram")
    p = counts / total
    pi = table.probs
    nz = p > 0
    log_pi = table.log_weights - table.log_Z
    return {
        "tv": float(0.5 * np.abs(p - pi).sum()),
        "kl": float((p[nz] * (np.log(p[nz]) - log_pi[nz])).sum()),
        "chi2": float(((p - pi) ** 2 / pi).sum()),
    }


def exact_sample(table: ExactTable, rng: np.random.Generator, count: int) -> np.ndarray:
    """i.i.d. samples from pi by inverse-CDF lookup; shape (count, D)."""
    spec = table.spec
    if count == 0:
        return np.zeros((0, spec.D), dtype=np.int64)
    cdf = np.cumsum(table.probs)
    idx = np.searchsorted(cdf, rng.random(count) * cdf[-1], side="right")
    idx = np.minimum(idx, len(cdf) - 1)
    return index_to_tokens(idx, spec.N, spec.D)


def dump_csv(table: ExactTable, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "energy"])
        for i, e in enumerate(table.energies):
            w.writerow([i, repr(float(e))])


class ExactScore:
    """Score-model stand-in that returns exact conditionals from a table.

    Exposes the same ``log_probs`` / ``forward`` surface as ScoreModel so the
    trajectory sampler can run on the optimal score.
    """

    time_conditioned = False

    def __init__(self, table: ExactTable):
        self.table = table
        self.D = table.spec.D
        self.N = table.spec.N
        self._rows = {}

    def _row(self, x):
        key = x.tobytes()
        out = self._rows.get(key)
        if out is None:
            out = self._rows[key] = exact_marginals(self.table, x)
        return out

    def forward(self, x, t=None):
        x = np.atleast_2d(np.asarray(x, dtype=np.int64))
        return np.stack([self._row(row) for row in x])

    def log_probs(self, x, t=None):
        with np.errstate(divide="ignore"):
            return np.log(self.forward(x, t))
