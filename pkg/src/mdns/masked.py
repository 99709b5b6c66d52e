"""Exact random-order sampler for the masked-diffusion neural sampler.

A trajectory unmasks the D sites along a uniform random permutation, drawing
each token from the score row at that site. Its log importance weight is

    W = r(final) + sum_d log( (1/N) / s(state_d)[pos_d, token_d] )

so that exp(W) / Z is the density of the target path measure with respect to
the sampled one. A trajectory is fully determined by (perm, final); the
intermediate states are rebuilt on demand.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .lattice import MASK, ModelSpec, reward


class NonFiniteWeight(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrajectoryRecord:
    perm: np.ndarray
    final: np.ndarray
    log_weight: float


@dataclass
class TrajectoryBatch:
    perm: np.ndarray          # (B, D) unmasking order
    final: np.ndarray         # (B, D) tokens
    log_weight: np.ndarray    # (B,) float64

    def __len__(self):
        return len(self.log_weight)

    def __getitem__(self, i) -> TrajectoryRecord:
        return TrajectoryRecord(self.perm[i], self.final[i], float(self.log_weight[i]))


@dataclass
class WeightedSamples:
    final: np.ndarray
    log_weight: np.ndarray

    def __len__(self):
        return len(self.log_weight)


def replay_states(perm, final):
    """Yield (states, pos, tokens) for each of the D unmasking steps, batched.

    Step d's states have the first d entries of each permutation unmasked.
    """
    perm = np.atleast_2d(perm)
    final = np.atleast_2d(final)
    B, D = final.shape
    rows = np.arange(B)
    state = np.full((B, D), MASK, dtype=final.dtype)
    for d in range(D):
        pos = perm[:, d]
        tok = final[rows, pos]
        yield state.copy(), pos, tok
        state[rows, pos] = tok


def reconstruct_states(record: TrajectoryRecord):
    """Yield (masked state, position, chosen token) for one trajectory."""
    for states, pos, tok in replay_states(record.perm, record.final):
        yield states[0], int(pos[0]), int(tok[0])


def sample_trajectories(model, spec: ModelSpec, batch: int, rng: np.random.Generator,
                        chunk: int | None = None) -> TrajectoryBatch:
    """Sample ``batch`` trajectories; D batched model calls per chunk."""
    if model.D != spec.D or model.N != spec.N:
        raise ValueError("model dimensions do not match the target")
    if chunk is not None and batch > chunk:
        parts = [sample_trajectories(model, spec, min(chunk, batch - s), rng)
                 for s in range(0, batch, chunk)]
        return TrajectoryBatch(*(np.concatenate([getattr(p, f) for p in parts])
                                 for f in ("perm", "final", "log_weight")))
    B, D, N = batch, spec.D, spec.N
    perm = np.argsort(rng.random((B, D)), axis=1)
    state = np.full((B, D), MASK, dtype=np.int64)
    rows = np.arange(B)
    logw = np.zeros(B)
    for d in range(D):
        pos = perm[:, d]
        logp = model.log_probs(state)[rows, pos]               # (B, N)
        p = np.exp(logp)
        cdf = np.cumsum(p, axis=1)
        u = rng.random(B) * cdf[:, -1]
        choice = np.minimum((cdf < u[:, None]).sum(1), N - 1)
        logw += -math.log(N) - logp[rows, choice]
        state[rows, pos] = choice + 1
    logw += reward(spec, state)
    bad = np.flatnonzero(~np.isfinite(logw))
    if bad.size:
        raise NonFiniteWeight(f"non-finite log-weight for trajectory {int(bad[0])}")
    return TrajectoryBatch(perm, state, logw)


def path_log_weights(model, spec: ModelSpec, batch: TrajectoryBatch, with_reward=True) -> np.ndarray:
    """Recompute W for fixed trajectories under the model's current parameters."""
    B = len(batch)
    rows = np.arange(B)
    logw = np.zeros(B)
    for states, pos, tok in replay_states(batch.perm, batch.final):
        logw += -math.log(spec.N) - model.log_probs(states)[rows, pos, tok - 1]
    if with_reward:
        logw += reward(spec, batch.final)
    return logw


def remask(x, lam, rng: np.random.Generator) -> np.ndarray:
    """Mask each entry independently with probability ``lam``.

    ``lam`` is a scalar or broadcasts against the leading axes of ``x``.
    """
    x = np.asarray(x)
    lam = np.asarray(lam, dtype=np.float64)
    if np.any(lam < 0) or np.any(lam > 1):
        raise ValueError("masking probability must lie in [0, 1]")
    if lam.ndim:
        lam = lam.reshape(lam.shape + (1,) * (x.ndim - lam.ndim))
    hit = rng.random(x.shape) < lam
    return np.where(hit, MASK, x)
