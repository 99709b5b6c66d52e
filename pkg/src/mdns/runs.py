"""Run orchestration shared by the CLI and the acceptance suite.

A run config is a plain dict (JSON on disk):

    {"spec":    {"kind": "Ising", "L": 4, "N": 2, "J": 1, "h": 0.1, "beta": 0.28},
     "sampler": {"family": "mdns"}            # or {"family": "udns", "K": 50, "eps": "auto"}
     "arch":    {"hidden": [128, 128], "precondition": false},
     "train":   {... TrainConfig fields ...},
     "eval":    {"num_samples": 262144, "seed": 1, "use_ema": true, "chunk": 8192},
     "init_checkpoint": null}

``resolve_config`` fills every default so the resolved dict fully describes
the run.
"""

from __future__ import annotations

import copy
import logging
import math

import numpy as np

from .exact import STATE_CAP, build_exact, divergences, histogram
from .lattice import ModelSpec
from .losses import estimate_logZ
from .masked import sample_trajectories
from .metrics import ess, observable_errors, observables, path_kl_estimate
from .mcmc import ChainConfig, run_chain
from .rng import stream
from .score import Arch, init_model
from .trainer import TrainConfig, train
from .udns import UdnsConfig, make_loss_fn, make_sampler, sample_trajectories_unif

log = logging.getLogger(__name__)

DEFAULT_EVAL = {"num_samples": 2 ** 18, "seed": 1, "use_ema": True, "chunk": 8192}


def _spec_from(d) -> ModelSpec:
    d = dict(d)
    d.setdefault("N", 2 if str(d.get("kind", "")).lower() == "ising" else 3)
    d.setdefault("J", 1.0)
    d.setdefault("h", 0.0)
    return ModelSpec.from_dict(d)


def resolve_config(config: dict) -> dict:
    """Validate a run config and expand all defaults."""
    if "spec" not in config:
        raise ValueError("config needs a 'spec' section")
    unknown = set(config) - {"spec", "sampler", "arch", "train", "eval", "init_checkpoint"}
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")
    spec = _spec_from(config["spec"])
    sampler = dict(config.get("sampler") or {"family": "mdns"})
    family = sampler.pop("family", "mdns")
    if family not in ("mdns", "udns"):
        raise ValueError(f"unknown sampler family {family!r}")
    train_cfg = TrainConfig(**(config.get("train") or {}))
    out = {"spec": spec.to_dict()}
    if family == "udns":
        ucfg = UdnsConfig(**{"objective": train_cfg.objective, **sampler})
        if ucfg.objective != train_cfg.objective:
            raise ValueError("sampler.objective and train.objective disagree")
        out["sampler"] = {"family": "udns", **ucfg.to_dict()}
    else:
        if sampler:
            raise ValueError(f"unexpected mdns sampler options {sorted(sampler)}")
        out["sampler"] = {"family": "mdns"}
    arch_in = dict(config.get("arch") or {})
    for k in ("D", "N", "time_conditioned"):
        if k in arch_in:
            want = {"D": spec.D, "N": spec.N, "time_conditioned": family == "udns"}[k]
            if arch_in.pop(k) != want:
                raise ValueError(f"arch.{k} is inconsistent with the spec / sampler family")
    arch = Arch(spec.D, spec.N, time_conditioned=family == "udns", **arch_in)
    if arch.precondition and spec.kind != "ising":
        raise ValueError("preconditioning is implemented for Ising targets only")
    out["arch"] = arch.to_dict()
    out["train"] = train_cfg.to_dict()
    ev = {**DEFAULT_EVAL, **(config.get("eval") or {})}
    extra = set(ev) - set(DEFAULT_EVAL)
    if extra:
        raise ValueError(f"unknown eval options {sorted(extra)}")
    out["eval"] = ev
    out["init_checkpoint"] = config.get("init_checkpoint")
    return out


def parts(resolved: dict):
    spec = ModelSpec.from_dict(resolved["spec"])
    arch = Arch.from_dict(resolved["arch"])
    tcfg = TrainConfig(**copy.deepcopy(resolved["train"]))
    s = dict(resolved["sampler"])
    ucfg = UdnsConfig(**{k: v for k, v in s.items() if k != "family"}) if s["family"] == "udns" else None
    return spec, arch, tcfg, ucfg


def train_run(resolved: dict, metrics_path=None, model=None):
    spec, arch, tcfg, ucfg = parts(resolved)
    if model is None:
        model = init_model(arch, stream(tcfg.seed, "init"), spec=spec)
    kw = {}
    if ucfg is not None:
        kw = {"sampler": make_sampler(ucfg), "loss_fn": make_loss_fn(ucfg)}
    return train(spec, model, tcfg, metrics_path=metrics_path, **kw)


def draw_samples(model, spec: ModelSpec, count: int, seed: int, ucfg: UdnsConfig | None = None,
                 chunk: int = 8192):
    """Sample ``count`` trajectories in chunks; returns (finals, log-weights)."""
    finals, weights = [], []
    for i, start in enumerate(range(0, count, chunk)):
        n = min(chunk, count - start)
        rng = stream(seed, "eval", i)
        if ucfg is None:
            b = sample_trajectories(model, spec, n, rng)
        else:
            b = sample_trajectories_unif(model, spec, ucfg, n, rng)
        finals.append(b.final)
        weights.append(b.log_weight)
    return np.concatenate(finals), np.concatenate(weights)


def exact_feasible(spec: ModelSpec) -> bool:
    return spec.D * math.log(spec.N) <= math.log(STATE_CAP) + 1e-9


def sample_report(spec: ModelSpec, samples, log_weights=None, table=None, truth=None) -> dict:
    """Metrics for a set of samples: divergences (exact oracle), weights, observables."""
    rep = {"n_samples": int(len(samples))}
    if table is None and exact_feasible(spec):
        table = build_exact(spec)
    if table is not None:
        rep.update(divergences(histogram(samples, spec.N), table))
        rep["logZ"] = table.log_Z
    if log_weights is not None:
        rep["ess"] = ess(log_weights)
        rep["logZ_hat"] = estimate_logZ(log_weights)
        if table is not None:
            rep["abs_dlogZ"] = abs(rep["logZ_hat"] - table.log_Z)
            rep["path_kl"] = path_kl_estimate(log_weights, table.log_Z)
    obs = observables(samples, spec)
    rep["observables"] = obs.to_dict()
    if truth is not None:
        rep.update(observable_errors(obs, observables(truth, spec)))
    return rep


def evaluate_model(model, spec: ModelSpec, ucfg=None, num_samples=2 ** 18, seed=1,
                   chunk=8192, table=None) -> dict:
    x, w = draw_samples(model, spec, num_samples, seed, ucfg, chunk)
    return sample_report(spec, x, w, table)


# --- reproduction tables -----------------------------------------------------

ISING4 = {"kind": "Ising", "L": 4, "N": 2, "J": 1.0, "h": 0.1}
COLUMNS = ("ess", "tv", "kl", "chi2", "path_kl", "abs_dlogZ")


def _row(name, rep):
    return {"method": name, **{k: rep.get(k) for k in COLUMNS}}


def repro_configs(table: str, steps_scale: float = 1.0) -> dict:
    """Named run configs for a reproduction table."""
    def steps(n):
        return max(1, int(round(n * steps_scale)))

    if table == "ising4_high":
        return {obj: {"spec": {**ISING4, "beta": 0.28},
                      "train": {"objective": obj, "steps": steps(1000),
                                **({"wdce": {"R": 16, "resample_every": 1}} if obj == "wdce" else {})}}
                for obj in ("rerf", "lv", "ce", "wdce")}
    if table == "ising4_crit":
        return {obj: {"spec": {**ISING4, "beta": 0.4407},
                      "train": {"objective": obj, "steps": steps(2000),
                                **({"wdce": {"R": 16, "resample_every": 1}} if obj == "wdce" else {})}}
                for obj in ("rerf", "lv", "ce", "wdce")}
    if table == "ising4_low_warmup":
        w = steps(1000)
        return {"lv_warmup": {"spec": {**ISING4, "beta": 0.6},
                              "train": {"objective": "lv", "steps": 2 * w,
                                        "warmup": {"enabled": True, "beta_warm": 0.28,
                                                   "warm_steps": w}}},
                "lv_scratch": {"spec": {**ISING4, "beta": 0.6},
                               "train": {"objective": "lv", "steps": 2 * w}}}
    if table == "potts3":
        return {"wdce": {"spec": {"kind": "Potts", "L": 3, "N": 3, "J": 1.0, "beta": 0.5},
                         "train": {"objective": "wdce", "steps": steps(5000), "lr": 5e-4,
                                   "wdce": {"R": 8, "resample_every": 10}},
                         "eval": {"num_samples": 2 ** 20}}}
    if table == "udns4":
        return {"lv": {"spec": {**ISING4, "beta": 0.28},
                       "sampler": {"family": "udns", "K": 50},
                       "train": {"objective": "lv", "steps": steps(3000)},
                       "eval": {"num_samples": 2 ** 20}}}
    raise ValueError(f"unknown reproduction table {table!r}")


REPRO_TABLES = ("ising4_high", "ising4_crit", "ising4_low_warmup", "potts3", "udns4")


def run_repro(table: str, steps_scale=1.0, baseline=True, chain: ChainConfig | None = None,
              out_dir=None, eval_samples=None) -> dict:
    from pathlib import Path
    from .io import write_json
    rows, resolved_all = [], {}
    spec = None
    for name, cfg in repro_configs(table, steps_scale).items():
        if eval_samples:
            cfg["eval"] = {**cfg.get("eval", {}), "num_samples": int(eval_samples)}
        resolved = resolve_config(cfg)
        resolved_all[name] = resolved
        spec, arch, tcfg, ucfg = parts(resolved)
        mpath = Path(out_dir) / f"{name}.metrics.ndjson" if out_dir else None
        if mpath and mpath.exists():
            mpath.unlink()
        res = train_run(resolved, metrics_path=mpath)
        ev = resolved["eval"]
        model = res.ema if ev["use_ema"] else res.model
        rep = evaluate_model(model, spec, ucfg, ev["num_samples"], ev["seed"], ev["chunk"])
        rep["train_ess_trailing100"] = float(np.mean([r["ess"] for r in res.metrics[-100:]]))
        rows.append({**_row(name, rep), "train_ess_trailing100": rep["train_ess_trailing100"]})
    if baseline and spec is not None:
        chain = chain or ChainConfig()
        algo = "sw" if spec.kind == "potts" else "mh"
        x = run_chain(spec, algo, chain)
        rep = sample_report(spec, x)
        rows.append(_row(f"baseline ({algo.upper()})", rep))
    report = {"table": table, "steps_scale": steps_scale, "rows": rows, "configs": resolved_all}
    if out_dir:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        write_json(Path(out_dir) / f"{table}.report.json", report)
    return report


def format_rows(rows) -> str:
    cols = ["method", *COLUMNS]
    lines = ["  ".join(f"{c:>12}" for c in cols)]
    for r in rows:
        cells = []
        for c in cols:
            v = r.get(c)
            cells.append(f"{v:>12}" if isinstance(v, str) else
                         (f"{'/':>12}" if v is None else f"{v:12.5f}"))
        lines.append("  ".join(cells))
    return "\n".join(lines)

