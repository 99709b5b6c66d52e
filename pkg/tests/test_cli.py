import json

import numpy as np
import pytest

from mdns import cli, io, runs

SPEC3 = ["--kind", "ising", "--L", "3", "--h", "0.1", "--beta", "0.28"]


def run(argv, capsys):
    rc = cli.main(argv)
    return rc, capsys.readouterr()


def test_oracle(capsys, tmp_path):
    rc, out = run(["oracle", *SPEC3], capsys)
    assert rc == 0
    a = json.loads(out.out)
    assert a["log_Z"] == pytest.approx(7.192466152695664, rel=1e-12)
    rc, out = run(["oracle", *SPEC3, "--dump-pi", str(tmp_path / "pi.csv"),
                   "--samples", "100", "--out", str(tmp_path / "x.txt")], capsys)
    assert rc == 0 and json.loads(out.out)["log_Z"] == a["log_Z"]
    assert len((tmp_path / "pi.csv").read_text().splitlines()) == 513
    assert io.read_samples(tmp_path / "x.txt")[0].shape == (100, 9)


def test_exit_codes(capsys, tmp_path):
    assert run(["oracle", "--kind", "ising", "--L", "6", "--beta", "0.3"], capsys)[0] == 4
    assert run(["oracle", "--kind", "ising", "--L", "3"], capsys)[0] == 2
    assert run(["eval", "--samples", str(tmp_path / "missing"), *SPEC3], capsys)[0] == 2
    assert run(["nonsense"], capsys)[0] == 2
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"spec": {"kind": "ising", "L": 3, "beta": 0.3},
                               "train": {"steps": 1, "lr": "fast"}}))
    assert run(["train", "--config", str(cfg), "--out", str(tmp_path / "o")], capsys)[0] == 2
    cfg.write_text(json.dumps({"spec": {"kind": "ising", "L": 3, "beta": 0.3},
                               "arch": {"D": 4}}))
    assert run(["train", "--config", str(cfg), "--out", str(tmp_path / "o")], capsys)[0] == 2


def test_train_sample_eval(capsys, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"spec": {"kind": "Ising", "L": 3, "h": 0.1, "beta": 0.28},
                               "arch": {"hidden": [16]}, "train": {"steps": 3, "batch": 16}}))
    out = tmp_path / "run"
    rc, _ = run(["train", "--config", str(cfg), "--set", "train.lr=5e-4", "--out", str(out)],
                capsys)
    assert rc == 0
    resolved = json.loads((out / "config.resolved.json").read_text())
    assert resolved["train"]["lr"] == 5e-4 and resolved["eval"]["num_samples"] == 2 ** 18
    assert len((out / "metrics.ndjson").read_text().splitlines()) == 3
    dumps = []
    for i in range(2):
        path = tmp_path / f"s{i}.txt"
        rc, _ = run(["sample", "--checkpoint", str(out / "checkpoint.mdns"), "--count", "500",
                     "--seed", "3", "--out", str(path)], capsys)
        assert rc == 0
        dumps.append(path.read_text())
    assert dumps[0] == dumps[1]
    rc, res = run(["eval", "--samples", str(tmp_path / "s0.txt"), *SPEC3,
                   "--corr-csv", str(tmp_path / "c.csv")], capsys)
    rep = json.loads(res.out)
    assert rc == 0 and 0 <= rep["tv"] <= 1 and "ess" in rep
    rc, res = run(["eval", "--checkpoint", str(out / "checkpoint.mdns"), "--count", "256"],
                  capsys)
    assert rc == 0 and "path_kl" in json.loads(res.out)


def test_training_determinism(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"spec": {"kind": "Ising", "L": 2, "beta": 0.3},
                               "arch": {"hidden": [8]}, "train": {"steps": 4, "batch": 8}}))
    for name in ("a", "b"):
        assert run(["train", "--config", str(cfg), "--out", str(tmp_path / name)], capsys)[0] == 0
    assert ((tmp_path / "a" / "checkpoint.mdns").read_bytes()
            == (tmp_path / "b" / "checkpoint.mdns").read_bytes())


def test_eval_on_exact_samples_decreases(capsys, tmp_path):
    tvs = []
    for n in (2000, 32000):
        path = tmp_path / f"x{n}.txt"
        run(["oracle", *SPEC3, "--samples", str(n), "--out", str(path)], capsys)
        rc, res = run(["eval", "--samples", str(path), *SPEC3], capsys)
        tvs.append(json.loads(res.out)["tv"])
    assert tvs[1] < tvs[0]


def test_baseline(capsys, tmp_path):
    path = tmp_path / "mh.txt"
    rc, _ = run(["baseline", "--algo", "mh", *SPEC3, "--chains", "8", "--burnin", "4",
                 "--thin", "2", "--rounds", "5", "--out", str(path)], capsys)
    assert rc == 0
    x = io.read_samples(path)[0]
    assert x.shape == (40, 9)
    assert json.loads((tmp_path / "mh.txt.config.json").read_text())["algo"] == "mh"
    rc, _ = run(["baseline", "--algo", "sw", *SPEC3, "--out", str(path)], capsys)
    assert rc == 2


def test_repro_quick(capsys, tmp_path):
    rc, res = run(["repro", "ising4_high", "--steps-scale", "0.003", "--eval-samples", "4096",
                   "--chains", "16", "--burnin", "2", "--thin", "2", "--rounds", "4",
                   "--out", str(tmp_path)], capsys)
    assert rc == 0
    rep = json.loads((tmp_path / "ising4_high.report.json").read_text())
    names = [r["method"] for r in rep["rows"]]
    assert names == ["rerf", "lv", "ce", "wdce", "baseline (MH)"]
    for col in runs.COLUMNS:
        assert col in res.out


def test_resolve_config_udns():
    r = runs.resolve_config({"spec": {"kind": "Ising", "L": 4, "h": 0.1, "beta": 0.28},
                             "sampler": {"family": "udns"}, "train": {"objective": "lv"}})
    assert r["arch"]["time_conditioned"] is True
    assert r["sampler"]["K"] == 50
    with pytest.raises(ValueError):
        runs.resolve_config({"spec": {"kind": "Ising", "L": 4, "beta": 0.28},
                             "sampler": {"family": "udns"}, "train": {"objective": "ce"}})
    with pytest.raises(ValueError):
        runs.resolve_config({"spec": {"kind": "Potts", "L": 3, "beta": 0.5},
                             "arch": {"precondition": True}})
    assert np.isclose(runs.resolve_config({"spec": {"kind": "Potts", "L": 3, "beta": 0.5}})
                      ["spec"]["N"], 3)
