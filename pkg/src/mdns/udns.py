"""Uniform-diffusion neural sampler (UDNS).

The reference process keeps p_unif at all times with per-entry jump rate
gamma(t)/N, gamma(t) = 1/t. The controlled process uses rates
gamma(t)/N * s(x, t)[d, n] and is simulated with an Euler scheme that allows
at most one jump per step on the grid t_k = eps + k * dt, dt = (1 - eps)/K.

The log-weight of a trajectory is

    W = r(x_K) - sum_k log( P^u(x_{k+1} | x_k) / P^0(x_{k+1} | x_k) )

using the exact Euler transition probabilities (no log(1 - z) ~ -z
expansion). Because the Euler reference chain is doubly stochastic,
E[exp W] = Z holds exactly for the discrete chain.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import softmax

from . import losses
from .lattice import ModelSpec, reward
from .losses import AdjointStep, LossOutput
from .masked import NonFiniteWeight, WeightedSamples

UDNS_OBJECTIVES = ("rerf", "lv", "wdce")


class JumpProbabilityError(FloatingPointError):
    """Total jump probability of an Euler step exceeded 1."""


def auto_eps(D: int, N: int, K: int, max_ref_jump: float = 0.5) -> float:
    """Smallest eps whose first reference step has total jump probability max_ref_jump.

    The reference jump probability at t_k is dt * D (N-1) / (N t_k); it is
    largest at t_0 = eps, giving a / eps * (1 - eps) with a = D (N-1) / (N K).
    """
    a = D * (N - 1) / (N * K)
    return a / (max_ref_jump + a)


@dataclass
class UdnsConfig:
    K: int = 50
    eps: float | str = "auto"
    objective: str = "lv"
    max_ref_jump: float = 0.5

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.objective not in UDNS_OBJECTIVES:
            raise ValueError(f"objective {self.objective!r} is not supported for UDNS "
                             f"(choose from {UDNS_OBJECTIVES})")
        if self.eps != "auto" and not 0 < float(self.eps) < 1:
            raise ValueError("eps must lie in (0, 1)")

    def resolved_eps(self, D: int, N: int) -> float:
        if self.eps == "auto":
            return auto_eps(D, N, self.K, self.max_ref_jump)
        return float(self.eps)

    def grid(self, D: int, N: int):
        eps = self.resolved_eps(D, N)
        dt = (1.0 - eps) / self.K
        return eps + dt * np.arange(self.K + 1), dt

    def to_dict(self):
        return asdict(self)


def gamma(t):
    return 1.0 / np.asarray(t, dtype=np.float64)


@dataclass
class UdnsBatch:
    """Trajectories stored as the start state plus one (site, token) per step.

    site[b, k] = -1 marks a step without a jump.
    """
    x0: np.ndarray            # (B, D)
    site: np.ndarray          # (B, K)
    token: np.ndarray         # (B, K)
    final: np.ndarray         # (B, D)
    log_weight: np.ndarray    # (B,)

    def __len__(self):
        return len(self.log_weight)

    def jump_list(self, i: int):
        ks = np.flatnonzero(self.site[i] >= 0)
        return [(int(k), int(self.site[i, k]), int(self.token[i, k])) for k in ks]

    def states(self, i: int) -> np.ndarray:
        """All K+1 states of trajectory i."""
        K = self.site.shape[1]
        out = np.empty((K + 1, self.x0.shape[1]), dtype=self.x0.dtype)
        out[0] = self.x0[i]
        for k in range(K):
            out[k + 1] = out[k]
            if self.site[i, k] >= 0:
                out[k + 1, self.site[i, k]] = self.token[i, k]
        return out


def _off_current(s, x):
    """Copy of s with the entries at the current tokens zeroed."""
    off = s.copy()
    np.put_along_axis(off, (x - 1)[..., None], 0.0, axis=-1)
    return off


def sample_trajectories_unif(model, spec: ModelSpec, config: UdnsConfig, batch: int,
                             rng: np.random.Generator) -> UdnsBatch:
    if not model.time_conditioned:
        raise ValueError("UDNS needs a time-conditioned score model")
    if model.D != spec.D or model.N != spec.N:
        raise ValueError("model dimensions do not match the target")
    B, D, N, K = batch, spec.D, spec.N, config.K
    times, dt = config.grid(D, N)
    x = rng.integers(1, N + 1, size=(B, D))
    x0 = x.copy()
    site = np.full((B, K), -1, dtype=np.int64)
    token = np.zeros((B, K), dtype=np.int64)
    logw = np.zeros(B)
    rows = np.arange(B)
    for k in range(K):
        t = times[k]
        c = dt * gamma(t) / N
        ref_total = c * D * (N - 1)
        s = model.forward(x, t)
        off = _off_current(s, x).reshape(B, -1)
        total = c * off.sum(1)
        if ref_total > 1 or np.any(total > 1):
            worst = max(ref_total, float(total.max()))
            raise JumpProbabilityError(
                f"total jump probability {worst:.4g} > 1 at t = {t:.6g}; "
                f"increase K or eps")
        cdf = np.cumsum(c * off, axis=1)
        u = rng.random(B)
        jump = u < total
        flat = np.minimum((cdf < u[:, None]).sum(1), D * N - 1)
        d, n = np.divmod(flat, N)
        jr = rows[jump]
        site[jr, k] = d[jump]
        token[jr, k] = n[jump] + 1
        logw[jump] -= np.log(off[jr, flat[jump]])
        stay = ~jump
        logw[stay] -= np.log1p(-total[stay]) - math.log1p(-ref_total)
        x[jr, d[jump]] = n[jump] + 1
    logw += reward(spec, x)
    bad = np.flatnonzero(~np.isfinite(logw))
    if bad.size:
        raise NonFiniteWeight(f"non-finite log-weight for trajectory {int(bad[0])}")
    return UdnsBatch(x0, site, token, x, logw)


def replay_unif(batch: UdnsBatch):
    """Yield (k, states before step k, site, token) for k = 0..K-1."""
    x = batch.x0.copy()
    rows = np.arange(len(batch))
    for k in range(batch.site.shape[1]):
        yield k, x.copy(), batch.site[:, k], batch.token[:, k]
        j = batch.site[:, k] >= 0
        x[rows[j], batch.site[j, k]] = batch.token[j, k]


def path_log_weights_unif(model, spec: ModelSpec, config: UdnsConfig, batch: UdnsBatch,
                          with_reward=True) -> np.ndarray:
    """Recompute W for fixed trajectories under the model's current parameters."""
    B, D, N = len(batch), spec.D, spec.N
    times, dt = config.grid(D, N)
    rows = np.arange(B)
    logw = np.zeros(B)
    for k, x, site, tok in replay_unif(batch):
        c = dt * gamma(times[k]) / N
        s = model.forward(x, times[k])
        total = c * _off_current(s, x).sum((1, 2))
        j = site >= 0
        logw[j] -= np.log(s[rows[j], site[j], tok[j] - 1])
        logw[~j] -= np.log1p(-total[~j]) - math.log1p(-c * D * (N - 1))
    if with_reward:
        logw += reward(spec, batch.final)
    return logw


def path_loss_unif(objective: str, batch: UdnsBatch, model, config: UdnsConfig,
                   baseline="mean") -> LossOutput:
    """RERF / LV on UDNS trajectories as sum_i c_i W_i(theta).

    dW/ds is -1/s at the chosen entry of a jump step and c/(1 - c sum s) at
    every off-current entry of a stay step.
    """
    if objective not in ("rerf", "lv"):
        raise ValueError(f"unsupported UDNS path objective {objective!r}")
    value, coef = losses.path_coefficients(objective, batch.log_weight, baseline)
    B, D, N = batch.x0.shape[0], batch.x0.shape[1], model.N
    times, dt = config.grid(D, N)
    rows = np.arange(B)
    out = LossOutput(value)
    for k, x, site, tok in replay_unif(batch):
        t = times[k]
        c = dt * gamma(t) / N
        cache = model._forward(x, t)
        s = cache.out
        off_mask = _off_current(np.ones_like(s), x)
        total = c * (s * off_mask).sum((1, 2))
        j = site >= 0
        adj = np.zeros_like(s)
        adj[~j] = (coef[~j] * c / (1.0 - total[~j]))[:, None, None] * off_mask[~j]
        adj[rows[j], site[j], tok[j] - 1] = -coef[j] / s[rows[j], site[j], tok[j] - 1]
        out.plan.append(AdjointStep(x, t, adj, cache))
    return out


def corrupt(x, t, rng: np.random.Generator, N: int) -> np.ndarray:
    """Replace each token by a uniform token over {1..N} with probability 1 - t.

    ``t`` is a scalar or one value per row of ``x``. The replacement may
    coincide with the original token.
    """
    x = np.asarray(x)
    t = np.asarray(t, dtype=np.float64)
    if np.any(t <= 0) or np.any(t > 1):
        raise ValueError("t must lie in (0, 1]")
    if t.ndim:
        t = t.reshape(t.shape + (1,) * (x.ndim - t.ndim))
    hit = rng.random(x.shape) >= t
    fresh = rng.integers(1, N + 1, size=x.shape)
    return np.where(hit, fresh, x)


def dce_ratio(x1, xt, t, N: int) -> np.ndarray:
    """P_{t|1}(x_t^{d<-n} | x_1) / P_{t|1}(x_t | x_1) for every (d, n), shape (..., D, N)."""
    t = np.asarray(t, dtype=np.float64)
    t = t.reshape(t.shape + (1,) * (np.ndim(x1) - t.ndim + 1))
    base = (1.0 - t) / N
    n = np.arange(1, N + 1)
    num = t * (np.asarray(x1)[..., None] == n) + base
    den = t * (np.asarray(x1) == np.asarray(xt))[..., None] + base
    return num / den


def wdce_unif(buffer: WeightedSamples, model, config: UdnsConfig, R: int,
              rng: np.random.Generator, t=None) -> LossOutput:
    """Importance-weighted denoising score entropy over R corrupted replicates.

    Times are drawn uniformly on [eps, 1], the range the sampler visits;
    ``t`` may fix them as a (B, R) array.
    """
    if len(buffer) == 0:
        raise ValueError("empty replay buffer")
    if R < 1:
        raise ValueError("R must be >= 1")
    B, D = buffer.final.shape
    N = model.N
    eps = config.resolved_eps(D, N)
    omega = softmax(np.asarray(buffer.log_weight, dtype=np.float64))
    if t is None:
        t = eps + (1.0 - eps) * (1.0 - rng.random((B, R)))
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    x1 = np.repeat(buffer.final, R, axis=0)
    xt = corrupt(x1, t, rng, N)
    ratio = dce_ratio(x1, xt, t, N)                                  # (BR, D, N)
    off = _off_current(np.ones((B * R, D, N)), xt)
    coef = np.repeat(omega, R) / R * gamma(t) / N                     # (BR,)
    cache = model._forward(xt, t)
    s = cache.out
    term = off * (s - ratio * np.log(s))
    value = float((coef * term.sum((1, 2))).sum())
    adj = coef[:, None, None] * off * (1.0 - ratio / s)
    return LossOutput(value, [AdjointStep(xt, t, adj, cache)])


def make_sampler(config: UdnsConfig):
    def sampler(model, spec, batch, rng):
        return sample_trajectories_unif(model, spec, config, batch, rng)
    return sampler


def make_loss_fn(config: UdnsConfig):
    """Loss hook for ``trainer.train``."""
    def loss_fn(objective, data, model, train_config, rng, spec):
        if objective == "wdce":
            return wdce_unif(data, model, config, train_config.wdce.R, rng)
        return path_loss_unif(objective, data, model, config, train_config.rerf_baseline)
    return loss_fn


def train_udns(spec: ModelSpec, model, train_config, udns_config: UdnsConfig, **kw):
    from .trainer import train
    if train_config.objective != udns_config.objective:
        raise ValueError("train and UDNS objectives disagree")
    return train(spec, model, train_config, sampler=make_sampler(udns_config),
                 loss_fn=make_loss_fn(udns_config), **kw)
