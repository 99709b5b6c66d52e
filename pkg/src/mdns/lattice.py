"""Ising and Potts targets on periodic L x L square lattices.

Configurations are integer arrays whose last axis has length ``D = L*L``
(row-major sites). Tokens are 1-based, ``1..N``; ``MASK`` (0) marks a masked
site. For Ising, token 1 is spin -1 and token 2 is spin +1.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np

MASK = 0

ISING = "ising"
POTTS = "potts"


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    L: int
    N: int
    J: float = 1.0
    h: float = 0.0
    beta: float = 1.0

    def __post_init__(self):
        kind = str(self.kind).lower()
        object.__setattr__(self, "kind", kind)
        if kind not in (ISING, POTTS):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.L < 2:
            raise ValueError("L must be >= 2 (L=1 makes a site its own neighbour)")
        if self.N < 2:
            raise ValueError("N must be >= 2")
        if kind == ISING and self.N != 2:
            raise ValueError("Ising models have N=2")
        if kind == POTTS and self.h != 0:
            raise ValueError("Potts models take no external field (h must be 0)")
        if not self.beta > 0:
            raise ValueError("beta must be positive")

    @property
    def D(self) -> int:
        return self.L * self.L

    @classmethod
    def ising(cls, L, J=1.0, h=0.0, beta=1.0):
        return cls(ISING, L, 2, J, h, beta)

    @classmethod
    def potts(cls, L, q=3, J=1.0, beta=1.0):
        return cls(POTTS, L, q, J, 0.0, beta)

    def with_beta(self, beta: float) -> "ModelSpec":
        return ModelSpec(self.kind, self.L, self.N, self.J, self.h, beta)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = "Ising" if self.kind == ISING else "Potts"
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(d["kind"], int(d["L"]), int(d["N"]), float(d["J"]),
                   float(d.get("h", 0.0)), float(d["beta"]))

    @classmethod
    def from_json(cls, s: str) -> "ModelSpec":
        return cls.from_dict(json.loads(s))


@lru_cache(maxsize=None)
def neighbors(L: int) -> np.ndarray:
    """(D, 4) table of neighbour sites: up, down, left, right (periodic)."""
    if L < 2:
        raise ValueError("L must be >= 2")
    r, c = np.divmod(np.arange(L * L), L)
    table = np.stack([((r - 1) % L) * L + c,
                      ((r + 1) % L) * L + c,
                      r * L + (c - 1) % L,
                      r * L + (c + 1) % L], axis=1)
    table.setflags(write=False)
    return table


@lru_cache(maxsize=None)
def edges(L: int) -> np.ndarray:
    """(2L^2, 2) edge list: each site paired with its down and right neighbour.

    For L=2 the wrap-around makes each geometric pair appear twice; both
    copies are kept.
    """
    nb = neighbors(L)
    site = np.arange(L * L)
    e = np.concatenate([np.stack([site, nb[:, 1]], 1), np.stack([site, nb[:, 3]], 1)])
    e.setflags(write=False)
    return e


def spins(x) -> np.ndarray:
    """Ising tokens -> spins in {-1, +1}; masked sites map to 0."""
    x = np.asarray(x)
    return np.where(x == MASK, 0, 2 * x.astype(np.int64) - 3)


def tokens_from_spins(s) -> np.ndarray:
    return ((np.asarray(s) + 3) // 2).astype(np.int64)


def validate(spec: ModelSpec, x, allow_mask=False) -> np.ndarray:
    x = np.asarray(x)
    if x.shape[-1] != spec.D:
        raise ValueError(f"configuration length {x.shape[-1]} != D={spec.D}")
    lo = MASK if allow_mask else 1
    if x.size and (x.min() < lo or x.max() > spec.N):
        raise ValueError("token out of range")
    return x


def energy(spec: ModelSpec, x) -> np.ndarray:
    """H(x) for one configuration or a batch (leading axes)."""
    x = validate(spec, x)
    e = edges(spec.L)
    if spec.kind == ISING:
        s = spins(x).astype(np.float64)
        return -spec.J * (s[..., e[:, 0]] * s[..., e[:, 1]]).sum(-1) - spec.h * s.sum(-1)
    same = x[..., e[:, 0]] == x[..., e[:, 1]]
    return -spec.J * same.sum(-1).astype(np.float64)


def delta_energy(spec: ModelSpec, x, site, new_token) -> np.ndarray:
    """H(x with x[site] = new_token) - H(x), using only the 4 neighbours.

    ``site`` and ``new_token`` broadcast against the batch axes of ``x``.
    """
    x = validate(spec, x)
    site = np.asarray(site)
    new_token = np.asarray(new_token)
    if site.size and (site.min() < 0 or site.max() >= spec.D):
        raise ValueError("site out of range")
    if new_token.size and (new_token.min() < 1 or new_token.max() > spec.N):
        raise ValueError("token out of range")
    nb = neighbors(spec.L)[site]                       # (..., 4)
    old = np.take_along_axis(x, site[..., None], -1)[..., 0] if x.ndim > 1 else x[site]
    if x.ndim > 1:
        nbx = np.take_along_axis(x, nb, -1)
    else:
        nbx = x[nb]
    if spec.kind == ISING:
        ds = (spins(new_token) - spins(old)).astype(np.float64)
        field = spins(nbx).sum(-1)
        return -spec.J * ds * field - spec.h * ds
    gain = (nbx == new_token[..., None]).sum(-1) - (nbx == old[..., None]).sum(-1)
    return -spec.J * gain.astype(np.float64)


def reward(spec: ModelSpec, x) -> np.ndarray:
    """r(x) = -beta*H(x) + D*log N, so that E_unif[exp r] = Z."""
    return -spec.beta * energy(spec, x) + spec.D * math.log(spec.N)


def conditional_logits(spec: ModelSpec, x, site=None) -> np.ndarray:
    """Single-site conditional logits with masked neighbours contributing 0.

    With ``site`` given, returns (..., N) logits for that site; otherwise
    (..., D, N) logits for every site (the site's own token is ignored).
    """
    x = validate(spec, x, allow_mask=True)
    nb = neighbors(spec.L)
    if site is not None:
        nb = nb[site]
    nbx = x[..., nb]                                   # (..., [D,] 4)
    if spec.kind == ISING:
        a = spec.beta * (spec.J * spins(nbx).sum(-1) + spec.h)
        return np.stack([-a, a], axis=-1)
    colors = np.arange(1, spec.N + 1)
    counts = (nbx[..., None] == colors).sum(-2)         # masked (0) never matches
    return spec.beta * spec.J * counts.astype(np.float64)


def flip_log_ratio(spec: ModelSpec, x) -> np.ndarray:
    """log pi(x^{d<-n}) / pi(x) for every (d, n); zero at n = x^d.

    Shape (..., D, N). Uses the closed-form neighbour sums, O(D*N).
    """
    x = validate(spec, x)
    cand = np.arange(1, spec.N + 1)
    nbx = x[..., neighbors(spec.L)]                                # (..., D, 4)
    if spec.kind == ISING:
        ds = (spins(cand)[None, :] - spins(x)[..., None]).astype(np.float64)
        dh = -spec.J * ds * spins(nbx).sum(-1)[..., None] - spec.h * ds
    else:
        gain = (nbx[..., None, :] == cand[:, None]).sum(-1) - (nbx == x[..., None]).sum(-1)[..., None]
        dh = -spec.J * gain.astype(np.float64)
    return -spec.beta * dh
