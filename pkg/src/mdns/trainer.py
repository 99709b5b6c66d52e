"""Training loop: sampling, objectives, AdamW, EMA, warm-up and replay buffer."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import losses
from .lattice import ModelSpec
from .masked import WeightedSamples, sample_trajectories
from .metrics import ess
from .rng import stream

log = logging.getLogger(__name__)


@dataclass
class WdceConfig:
    R: int = 16
    resample_every: int = 10
    w_scheme: str = "one"


@dataclass
class WarmupConfig:
    enabled: bool = False
    beta_warm: float = 0.28
    warm_steps: int = 0
    # start the target phase like a fresh run from the warm-up checkpoint:
    # new optimizer moments and a restarted EMA
    reset_at_switch: bool = True


@dataclass
class TrainConfig:
    objective: str = "lv"
    steps: int = 1000
    batch: int = 256
    lr: float = 1e-3
    weight_decay: float = 0.0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    ema_decay: float = 0.9999
    ema_warmup: bool = True
    clip_norm: float | None = None
    rerf_baseline: str = "mean"
    wdce: WdceConfig = field(default_factory=WdceConfig)
    warmup: WarmupConfig = field(default_factory=WarmupConfig)
    eval_every: int = 0
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.wdce, dict):
            self.wdce = WdceConfig(**self.wdce)
        if isinstance(self.warmup, dict):
            self.warmup = WarmupConfig(**self.warmup)
        self.betas = tuple(self.betas)
        self.validate()

    def validate(self):
        if self.objective not in losses.OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.objective == "lv" and self.batch < 2:
            raise ValueError("lv needs batch >= 2")
        if self.objective == "wdce" and (self.wdce.R < 1 or self.wdce.resample_every < 1):
            raise ValueError("wdce needs R >= 1 and resample_every >= 1")

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls({k: np.zeros_like(p, dtype=np.float64) for k, p in params.items()},
                   {k: np.zeros_like(p, dtype=np.float64) for k, p in params.items()})


def adam_step(params, grads, state: AdamState, lr, wd=0.0, betas=(0.9, 0.999), eps=1e-8):
    """One AdamW update in place (decoupled weight decay applied first)."""
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for k, p in params.items():
        g = grads[k].astype(np.float64)
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        upd = p.astype(np.float64) * (1.0 - lr * wd)
        upd -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p[...] = upd


def ema_update(ema_params, params, decay):
    for k, p in params.items():
        e = ema_params[k]
        e[...] = decay * e + (1.0 - decay) * p


def ema_decay_at(config: TrainConfig, step: int) -> float:
    """Effective EMA decay; with ema_warmup the average starts short and grows."""
    if not config.ema_warmup:
        return config.ema_decay
    return min(config.ema_decay, (1.0 + step) / (10.0 + step))


def warmup_schedule(config: TrainConfig, step: int, target_beta: float) -> float:
    w = config.warmup
    if w.enabled and step < w.warm_steps:
        return w.beta_warm
    return target_beta


def clip_grads(grads, max_norm):
    total = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
    if total > max_norm:
        for g in grads.values():
            g *= max_norm / total
    return total


@dataclass
class TrainResult:
    model: object
    ema: object
    metrics: list
    sampler_calls: int = 0


def train(spec: ModelSpec, model, config: TrainConfig, metrics_path=None,
          on_eval=None, sampler=None, loss_fn=None) -> TrainResult:
    """Run the training loop.

    ``sampler(model, spec, batch, rng)`` and ``loss_fn(objective, ...)`` default
    to the masked-diffusion sampler and objectives; the uniform-diffusion
    module passes its own. ``on_eval(step, ema_model)`` is called every
    ``eval_every`` steps.
    """
    config.validate()
    sampler = sampler or sample_trajectories
    ema = model.copy()
    opt = AdamState.zeros_like(model.params)
    records = []
    buffer = None
    buffer_ess = float("nan")
    buffer_logz = float("nan")
    calls = 0
    phase_start = 0
    sink = open(metrics_path, "a") if metrics_path else None
    try:
        for step in range(config.steps):
            t0 = time.perf_counter()
            active = spec.with_beta(warmup_schedule(config, step, spec.beta))
            w = config.warmup
            if w.enabled and w.reset_at_switch and 0 < w.warm_steps == step:
                opt = AdamState.zeros_like(model.params)
                ema = model.copy()
                phase_start = step
                buffer = None
            model.zero_grad()
            if config.objective == "wdce":
                if buffer is None or step % config.wdce.resample_every == 0:
                    batch = sampler(model, active, config.batch, stream(config.seed, "sample", step))
                    calls += 1
                    buffer = WeightedSamples(batch.final, batch.log_weight)
                    buffer_ess = ess(batch.log_weight)
                    buffer_logz = losses.estimate_logZ(batch.log_weight)
                rng = stream(config.seed, "remask", step)
                if loss_fn is None:
                    out = losses.wdce(buffer, model, config.wdce.R, config.wdce.w_scheme, rng)
                else:
                    out = loss_fn("wdce", buffer, model, config, rng, active)
                step_ess, logz = buffer_ess, buffer_logz
            else:
                batch = sampler(model, active, config.batch, stream(config.seed, "sample", step))
                calls += 1
                step_ess = ess(batch.log_weight)
                logz = losses.estimate_logZ(batch.log_weight)
                if loss_fn is None:
                    out = losses.path_loss(config.objective, batch, model, config.rerf_baseline)
                else:
                    out = loss_fn(config.objective, batch, model, config, None, active)
            if not math.isfinite(out.value):
                raise FloatingPointError(
                    f"non-finite loss at step {step}; batch log-weights "
                    f"min/max {np.min(batch.log_weight):.4g}/{np.max(batch.log_weight):.4g}")
            out.backward(model)
            if config.clip_norm:
                clip_grads(model.grads, config.clip_norm)
            adam_step(model.params, model.grads, opt, config.lr, config.weight_decay,
                      config.betas, config.eps)
            ema_update(ema.params, model.params, ema_decay_at(config, step - phase_start))
            rec = {"step": step, "loss": out.value, "ess": step_ess, "logZ_hat": logz,
                   "beta": active.beta,
                   "wallclock_ms": 1000.0 * (time.perf_counter() - t0)}
            records.append(rec)
            if sink:
                sink.write(json.dumps(rec) + "\n")
            if config.eval_every and on_eval and (step + 1) % config.eval_every == 0:
                on_eval(step + 1, ema)
            if step % 100 == 0:
                log.debug("step %d loss %.4g ess %.4f", step, out.value, step_ess)
    finally:
        if sink:
            sink.close()
    return TrainResult(model, ema, records, calls)
