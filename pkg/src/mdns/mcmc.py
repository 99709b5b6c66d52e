"""Learning-free baselines: single-site Metropolis-Hastings and Swendsen-Wang.

MH proposes a uniform site and a uniform *different* token and accepts with
min(1, exp(-beta * dH)); one sweep is D proposals. SW places
Fortuin-Kasteleyn bonds on equal-token edges (p = 1 - exp(-2 beta J) for
Ising, 1 - exp(-beta J) for Potts), labels clusters with union-find and
gives each cluster a fresh uniform token. SW requires h = 0.

The inner loops are numba kernels over a batch of chains. They consume
uniforms drawn in blocks from a numpy generator seeded off the run's named
stream, so runs are reproducible and no RNG state lives inside numba.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

from .lattice import ISING, ModelSpec, edges, neighbors
from .rng import stream


class UnsupportedConfiguration(ValueError):
    pass


@dataclass
class ChainConfig:
    chains: int = 1024
    burnin: int = 1024
    thin: int = 1024
    rounds: int = 1024
    seed: int = 0
    unit: str = "sweep"          # MH step unit: "sweep" (D proposals) or "proposal"

    def __post_init__(self):
        if min(self.chains, self.burnin, self.thin) < 1 or self.rounds < 0:
            raise ValueError("chain counts must be positive")
        if self.unit not in ("sweep", "proposal"):
            raise ValueError("unit must be 'sweep' or 'proposal'")


def _acceptance_table(spec: ModelSpec) -> np.ndarray:
    """Acceptance probabilities indexed by (new token - 1, neighbour statistic).

    Ising: statistic = sum of neighbour spins + 4 (0..8). Potts: statistic =
    (#neighbours equal to new) - (#equal to old) + 4 (0..8).
    """
    acc = np.empty((spec.N, 9))
    for n in range(spec.N):
        for k in range(9):
            if spec.kind == ISING:
                ds = 2.0 * (2 * n - 1)        # spin change when flipping into token n+1
                dH = -spec.J * ds * (k - 4) - spec.h * ds
            else:
                dH = -spec.J * (k - 4)
            acc[n, k] = min(1.0, math.exp(-spec.beta * dH))
    return acc


@numba.njit(cache=True)
def _mh_kernel(state, nb, u, N, is_ising, acc):
    """Apply u.shape[1] proposals to every chain; u[c, p] = (site/token, accept) uniforms."""
    C, D = state.shape
    P = u.shape[1]
    for c in range(C):
        x = state[c]
        for p in range(P):
            r = u[c, p, 0] * D
            i = int(r)
            old = x[i]
            new = int((r - i) * (N - 1)) + 1
            if new >= old:
                new += 1
            k = 4
            if is_ising:
                for j in range(4):
                    k += 2 * x[nb[i, j]] - 3
            else:
                for j in range(4):
                    v = x[nb[i, j]]
                    k += (v == new) - (v == old)
            a = acc[new - 1, k]
            if a >= 1.0 or u[c, p, 1] < a:
                x[i] = new


@numba.njit(cache=True)
def _find(parent, i):
    root = i
    while parent[root] != root:
        root = parent[root]
    while parent[i] != root:
        nxt = parent[i]
        parent[i] = root
        i = nxt
    return root


@numba.njit(cache=True)
def _union(parent, a, b):
    ra = _find(parent, a)
    rb = _find(parent, b)
    if ra != rb:
        if ra < rb:
            parent[rb] = ra
        else:
            parent[ra] = rb


@numba.njit(cache=True)
def _sw_kernel(state, edge_list, ub, ut, N, p_bond):
    """One SW update per step; ub[c, t, e] bond uniforms, ut[c, t, d] cluster-token uniforms."""
    C, D = state.shape
    E = edge_list.shape[0]
    T = ub.shape[1]
    parent = np.empty(D, np.int64)
    newtok = np.empty(D, np.int64)
    for c in range(C):
        x = state[c]
        for t in range(T):
            for i in range(D):
                parent[i] = i
            for e in range(E):
                a = edge_list[e, 0]
                b = edge_list[e, 1]
                if x[a] == x[b] and ub[c, t, e] < p_bond:
                    _union(parent, a, b)
            for i in range(D):
                newtok[i] = -1
            for i in range(D):
                r = _find(parent, i)
                if newtok[r] < 0:
                    newtok[r] = int(ut[c, t, r] * N) + 1
                x[i] = newtok[r]


# uniforms are drawn in blocks of at most this many doubles per kernel call
_BLOCK = 1 << 22


def _fast_rng(rng: np.random.Generator) -> np.random.Generator:
    return np.random.Generator(np.random.SFC64(rng.integers(2 ** 63)))


def _mh_advance(spec, state, proposals, rng, acc=None):
    acc = _acceptance_table(spec) if acc is None else acc
    nb = neighbors(spec.L).astype(np.int64)
    C = state.shape[0]
    blk = max(1, min(proposals, _BLOCK // (2 * C)))
    done = 0
    while done < proposals:
        n = min(blk, proposals - done)
        _mh_kernel(state, nb, rng.random((C, n, 2)), spec.N, spec.kind == ISING, acc)
        done += n


def _sw_advance(spec, state, steps, rng):
    el = edges(spec.L).astype(np.int64)
    C, D = state.shape
    E = len(el)
    blk = max(1, min(steps, _BLOCK // (C * (E + D))))
    pb = bond_probability(spec)
    done = 0
    while done < steps:
        n = min(blk, steps - done)
        _sw_kernel(state, el, rng.random((C, n, E)), rng.random((C, n, D)), spec.N, pb)
        done += n


def mh_sweep(spec: ModelSpec, state, rng: np.random.Generator, proposals=None) -> np.ndarray:
    """One MH sweep (D proposals, or ``proposals``) on a state or batch of states."""
    state = np.array(np.atleast_2d(state), dtype=np.int64)
    _mh_advance(spec, state, spec.D if proposals is None else proposals, rng)
    return state


def bond_probability(spec: ModelSpec) -> float:
    if spec.kind == ISING:
        return 1.0 - math.exp(-2.0 * spec.beta * spec.J)
    return 1.0 - math.exp(-spec.beta * spec.J)


def sw_step(spec: ModelSpec, state, rng: np.random.Generator, steps: int = 1) -> np.ndarray:
    if spec.kind == ISING and spec.h != 0:
        raise UnsupportedConfiguration("Swendsen-Wang here requires h = 0")
    state = np.array(np.atleast_2d(state), dtype=np.int64)
    _sw_advance(spec, state, steps, rng)
    return state


def mh_acceptance(spec: ModelSpec, dH) -> np.ndarray:
    return np.minimum(1.0, np.exp(-spec.beta * np.asarray(dH, dtype=np.float64)))


def mh_kernel_prob(spec: ModelSpec, x, y) -> float:
    """Transition probability of one MH proposal between states differing at one site."""
    from .lattice import delta_energy
    x = np.asarray(x)
    y = np.asarray(y)
    diff = np.flatnonzero(x != y)
    if len(diff) != 1:
        raise ValueError("states must differ at exactly one site")
    i = int(diff[0])
    dH = float(delta_energy(spec, x, i, int(y[i])))
    return float(mh_acceptance(spec, dH)) / (spec.D * (spec.N - 1))


def uf_components(D: int, bonds) -> np.ndarray:
    """Canonical component labels (smallest member) for a bond list."""
    parent = np.arange(D, dtype=np.int64)
    for a, b in np.asarray(bonds, dtype=np.int64).reshape(-1, 2):
        _union(parent, a, b)
    return np.array([_find(parent, i) for i in range(D)])


def run_chain(spec: ModelSpec, algo: str, config: ChainConfig, init=None) -> np.ndarray:
    """Burn in, then collect ``rounds`` snapshots of every chain ``thin`` steps apart.

    Returns (rounds * chains, D) samples ordered round-major.
    """
    if algo not in ("mh", "sw"):
        raise ValueError(f"unknown algorithm {algo!r}")
    if algo == "sw" and spec.kind == ISING and spec.h != 0:
        raise UnsupportedConfiguration("Swendsen-Wang here requires h = 0")
    if config.rounds == 0:
        return np.zeros((0, spec.D), dtype=np.int64)
    init_rng = stream(config.seed, f"{algo}-init")
    state = (init_rng.integers(1, spec.N + 1, size=(config.chains, spec.D))
             if init is None else np.array(init, dtype=np.int64))
    state = np.ascontiguousarray(state, dtype=np.int64)
    per = spec.D if config.unit == "sweep" else 1
    acc = _acceptance_table(spec)

    def advance(n, tag_index):
        rng = _fast_rng(stream(config.seed, algo, tag_index))
        if algo == "mh":
            _mh_advance(spec, state, n * per, rng, acc)
        else:
            _sw_advance(spec, state, n, rng)

    advance(config.burnin, 0)
    out = np.empty((config.rounds, config.chains, spec.D), dtype=np.int64)
    for r in range(config.rounds):
        advance(config.thin, r + 1)
        out[r] = state
    return out.reshape(-1, spec.D)
