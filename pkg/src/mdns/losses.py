"""Training objectives as (value, adjoint plan) pairs.

Every objective is a function of score-model outputs only, so a loss is
represented by its value plus a list of model calls together with the
adjoint d(loss)/d(s) at each call. ``LossOutput.backward(model)`` pushes those
adjoints through the network.

Path objectives (RERF, LV, CE) reduce to a weighted sum ``sum_i c_i W_i(theta)``
with detached coefficients; since dW/ds = -1/s at the chosen entry, each
trajectory step contributes an adjoint of -c_i / s there.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp, softmax

from .masked import TrajectoryBatch, WeightedSamples, remask, replay_states

OBJECTIVES = ("rerf", "lv", "ce", "wdce")


@dataclass
class AdjointStep:
    states: np.ndarray
    t: object
    adjoint: np.ndarray
    cache: object = None


@dataclass
class LossOutput:
    value: float
    plan: list = field(default_factory=list)

    def backward(self, model):
        for step in self.plan:
            model.backward(step.states, step.t, step.adjoint, cache=step.cache)


def estimate_logZ(weights) -> float:
    """log of the batch mean of exp(W)."""
    w = np.asarray(weights, dtype=np.float64)
    if w.size == 0:
        raise ValueError("empty batch")
    return float(logsumexp(w) - math.log(w.size))


def median_logZ(weights, groups: int) -> float:
    """Median of ``groups`` estimate_logZ values over contiguous groups."""
    w = np.asarray(weights, dtype=np.float64)
    if groups < 1 or w.size % groups:
        raise ValueError(f"batch of {w.size} not divisible into {groups} groups")
    return float(np.median([estimate_logZ(g) for g in w.reshape(groups, -1)]))


def path_coefficients(objective: str, logw, baseline="mean"):
    """Loss value and the detached coefficient c_i multiplying each W_i(theta)."""
    w = np.asarray(logw, dtype=np.float64)
    B = w.size
    if objective == "rerf":
        if baseline == "mean":
            b = w.mean()
        elif baseline == "logz":
            b = estimate_logZ(w)
        else:
            b = float(baseline)
        c = (w - b) / B
        return float(((w - b) * w).mean()), c
    if objective == "lv":
        if B < 2:
            raise ValueError("log-variance needs at least 2 trajectories")
        dev = w - w.mean()
        return float((dev ** 2).sum() / (B - 1)), 2.0 * dev / (B - 1)
    if objective == "ce":
        omega = softmax(w)
        return float((omega * w).sum()), omega
    raise ValueError(f"unknown path objective {objective!r}")


def path_loss(objective: str, batch: TrajectoryBatch, model, baseline="mean") -> LossOutput:
    value, coef = path_coefficients(objective, batch.log_weight, baseline)
    if not np.all(np.isfinite(coef)):
        raise FloatingPointError(f"non-finite {objective} coefficients")
    out = LossOutput(value)
    rows = np.arange(len(batch))
    for states, pos, tok in replay_states(batch.perm, batch.final):
        cache = model._forward(states)
        s = cache.out[rows, pos, tok - 1]
        adj = np.zeros_like(cache.out)
        adj[rows, pos, tok - 1] = -coef / s
        out.plan.append(AdjointStep(states, None, adj, cache))
    return out


def rerf(batch, model, baseline="mean") -> LossOutput:
    return path_loss("rerf", batch, model, baseline)


def lv(batch, model) -> LossOutput:
    return path_loss("lv", batch, model)


def ce(batch, model) -> LossOutput:
    return path_loss("ce", batch, model)


def dce_weight(lam, scheme: str):
    if scheme in ("one", "1", "const"):
        return np.ones_like(lam)
    if scheme in ("inv", "1/lambda", "inverse"):
        return 1.0 / lam
    raise ValueError(f"unknown w(lambda) scheme {scheme!r}")


def wdce(buffer: WeightedSamples, model, R: int, w_scheme: str, rng: np.random.Generator,
         lam=None) -> LossOutput:
    """Importance-weighted denoising cross-entropy over R remasked replicates.

    ``lam`` may fix the (B, R) masking rates; otherwise they are drawn
    uniformly on (0, 1].
    """
    if len(buffer) == 0:
        raise ValueError("empty replay buffer")
    if R < 1:
        raise ValueError("R must be >= 1")
    B, D = buffer.final.shape
    omega = softmax(np.asarray(buffer.log_weight, dtype=np.float64))
    if lam is None:
        lam = 1.0 - rng.random((B, R))
    lam = np.asarray(lam, dtype=np.float64).reshape(B, R)
    target = np.repeat(buffer.final, R, axis=0)                    # (B*R, D)
    xt = remask(target, lam.reshape(-1), rng)
    coef = (omega[:, None] * dce_weight(lam, w_scheme) / R).reshape(-1)   # (B*R,)
    cache = model._forward(xt)
    masked = xt == 0
    rows = np.arange(B * R)[:, None]
    s = cache.out[rows, np.arange(D)[None, :], target - 1]          # (B*R, D)
    with np.errstate(divide="ignore"):
        nll = np.where(masked, -np.log(s), 0.0)
    value = float((coef * nll.sum(1)).sum())
    adj = np.zeros_like(cache.out)
    adj[rows, np.arange(D)[None, :], target - 1] = np.where(masked, -coef[:, None] / s, 0.0)
    return LossOutput(value, [AdjointStep(xt, None, adj, cache)])
