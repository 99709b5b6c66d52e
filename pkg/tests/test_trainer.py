import numpy as np
import pytest

from mdns.lattice import ModelSpec
from mdns.rng import stream
from mdns.score import Arch, init_model
from mdns.trainer import (AdamState, TrainConfig, adam_step, ema_decay_at, ema_update, train,
                          warmup_schedule)


def tiny(spec, seed=0):
    return init_model(Arch(spec.D, spec.N, hidden=(16,)), stream(seed, "init"), spec=spec)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(steps=0)
    with pytest.raises(ValueError):
        TrainConfig(objective="kl")
    with pytest.raises(ValueError):
        TrainConfig(objective="wdce", wdce={"R": 0})


def test_one_step(ising2):
    m = tiny(ising2)
    res = train(ising2, m, TrainConfig(steps=1, batch=16))
    assert len(res.metrics) == 1 and res.sampler_calls == 1


def test_wdce_sampler_schedule(ising2):
    for steps in (1, 10, 25):
        res = train(ising2, tiny(ising2), TrainConfig(objective="wdce", steps=steps, batch=8,
                                                      wdce={"R": 2, "resample_every": 10}))
        assert res.sampler_calls == -(-steps // 10)


def test_adam_examples():
    p = {"w": np.array([0.7])}
    st = AdamState.zeros_like(p)
    adam_step(p, {"w": np.zeros(1)}, st, 0.1)
    assert p["w"][0] == 0.7
    p = {"w": np.array([0.0])}
    st = AdamState.zeros_like(p)
    adam_step(p, {"w": np.array([1.0])}, st, 0.01, betas=(0.0, 0.0), eps=1e-12)
    assert p["w"][0] == pytest.approx(-0.01)
    p = {"w": np.array([1.0])}
    st = AdamState.zeros_like(p)
    for _ in range(2000):
        adam_step(p, {"w": p["w"].copy()}, st, 0.01)
    assert abs(p["w"][0]) < 1e-3


def test_ema_examples():
    e = {"w": np.array([1.0, 2.0])}
    ema_update(e, {"w": np.array([5.0, 6.0])}, 0.0)
    assert list(e["w"]) == [5.0, 6.0]
    ema_update(e, {"w": np.array([0.0, 0.0])}, 1.0)
    assert list(e["w"]) == [5.0, 6.0]
    for _ in range(10):
        ema_update(e, {"w": np.array([5.0, 6.0])}, 0.9)
    assert list(e["w"]) == [5.0, 6.0]


def test_ema_decay_schedule():
    cfg = TrainConfig(ema_decay=0.9999)
    assert ema_decay_at(cfg, 0) == pytest.approx(0.1)
    assert ema_decay_at(cfg, 10 ** 7) == 0.9999
    assert ema_decay_at(TrainConfig(ema_warmup=False), 0) == 0.9999


def test_warmup_schedule():
    cfg = TrainConfig(warmup={"enabled": True, "beta_warm": 0.28, "warm_steps": 5})
    assert warmup_schedule(cfg, 4, 0.6) == 0.28
    assert warmup_schedule(cfg, 5, 0.6) == 0.6
    cfg0 = TrainConfig(warmup={"enabled": True, "beta_warm": 0.28, "warm_steps": 0})
    assert warmup_schedule(cfg0, 0, 0.6) == 0.6


def test_warmup_run_logs_beta(ising2):
    cfg = TrainConfig(steps=4, batch=8, warmup={"enabled": True, "beta_warm": 0.1,
                                                "warm_steps": 2})
    res = train(ising2, tiny(ising2), cfg)
    assert [r["beta"] for r in res.metrics] == [0.1, 0.1, 0.28, 0.28]


@pytest.mark.parametrize("objective", ["lv", "wdce"])
def test_warmup_switch_reset(ising2, objective):
    # EMA restarts from the switch-time weights; without reset it stays near init
    def run(reset):
        cfg = TrainConfig(steps=12, batch=16, objective=objective, ema_warmup=False,
                          warmup={"enabled": True, "beta_warm": 0.1, "warm_steps": 10,
                                  "reset_at_switch": reset},
                          wdce={"R": 2, "resample_every": 3})
        init = tiny(ising2)
        start = {k: v.copy() for k, v in init.params.items()}
        res = train(ising2, init, cfg)
        return res, start

    def gap(a, b):
        return max(np.abs(a[k] - b[k]).max() for k in a)

    res, start = run(True)
    assert gap(res.ema.params, res.model.params) < gap(start, res.model.params)
    res0, start0 = run(False)
    assert gap(res0.ema.params, start0) < 1e-2 * gap(start0, res0.model.params)
    assert [r["loss"] for r in res.metrics[:10]] == [r["loss"] for r in res0.metrics[:10]]
    assert res.metrics[11]["loss"] != res0.metrics[11]["loss"]


def test_determinism_and_ema_hull(ising2):
    cfg = TrainConfig(steps=15, batch=16, objective="lv", ema_decay=0.9)
    a = train(ising2, tiny(ising2), cfg)
    b = train(ising2, tiny(ising2), cfg)
    for k in a.model.params:
        assert np.array_equal(a.model.params[k], b.model.params[k])
        assert np.array_equal(a.ema.params[k], b.ema.params[k])
    assert [r["loss"] for r in a.metrics] == [r["loss"] for r in b.metrics]


def test_ema_is_convex_combination():
    rng = np.random.default_rng(0)
    hist = [rng.normal(size=4) for _ in range(50)]
    e = {"w": hist[0].copy()}
    cfg = TrainConfig(ema_decay=0.95)
    for i, h in enumerate(hist):
        ema_update(e, {"w": h}, ema_decay_at(cfg, i))
    assert np.abs(e["w"]).max() <= max(np.abs(h).max() for h in hist) + 1e-12


def test_training_improves_ess(ising2):
    m = tiny(ising2)
    res = train(ising2, m, TrainConfig(steps=150, batch=64, lr=3e-3))
    first = np.mean([r["ess"] for r in res.metrics[:10]])
    last = np.mean([r["ess"] for r in res.metrics[-10:]])
    assert last > first


def test_metrics_file(tmp_path, ising2):
    path = tmp_path / "m.ndjson"
    train(ising2, tiny(ising2), TrainConfig(steps=3, batch=8), metrics_path=path)
    lines = path.read_text().splitlines()
    assert len(lines) == 3 and '"ess"' in lines[0]


def test_warm_model_matches_fresh_spec():
    spec = ModelSpec.ising(2, 1.0, 0.0, 0.5)
    assert spec.with_beta(0.1).beta == 0.1 and spec.beta == 0.5
