"""Command-line interface: ``mdns {train,sample,eval,baseline,oracle,repro}``.

Exit codes: 0 success, 2 configuration / input error, 3 numeric failure,
4 enumeration cap exceeded.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import io, runs
from .exact import CapExceeded, build_exact, dump_csv, exact_sample
from .lattice import ModelSpec
from .mcmc import ChainConfig, run_chain
from .metrics import observables
from .rng import stream

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_CAP = 0, 2, 3, 4

log = logging.getLogger("mdns")


def _add_spec_args(p):
    g = p.add_argument_group("target")
    g.add_argument("--spec", help="ModelSpec JSON file or inline JSON object")
    g.add_argument("--kind", choices=["ising", "potts"])
    g.add_argument("--L", type=int)
    g.add_argument("--N", "--q", dest="N", type=int)
    g.add_argument("--J", type=float)
    g.add_argument("--h", type=float)
    g.add_argument("--beta", type=float)


def _spec_from_args(a) -> ModelSpec:
    d = {}
    if a.spec:
        text = a.spec
        if not text.lstrip().startswith("{"):
            text = Path(text).read_text()
        d.update(json.loads(text))
    for k in ("kind", "L", "N", "J", "h", "beta"):
        v = getattr(a, k)
        if v is not None:
            d[k] = v
    missing = [k for k in ("kind", "L", "beta") if k not in d]
    if missing:
        raise ValueError(f"target spec is missing {missing}")
    return runs._spec_from(d)


def cmd_train(a):
    cfg = io.load_config(a.config) if a.config else {}
    cfg = io.apply_overrides(cfg, a.set)
    resolved = runs.resolve_config(cfg)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    io.write_json(out / "config.resolved.json", resolved)
    spec, arch, tcfg, ucfg = runs.parts(resolved)
    model = None
    if resolved["init_checkpoint"]:
        model, _, header = io.load_checkpoint(resolved["init_checkpoint"])
        if header["arch"] != resolved["arch"]:
            raise ValueError("init checkpoint architecture differs from the config")
        model.spec = spec
    metrics = out / "metrics.ndjson"
    if metrics.exists():
        metrics.unlink()
    res = runs.train_run(resolved, metrics_path=metrics, model=model)
    extra = {"sampler": resolved["sampler"]}
    io.save_checkpoint(out / "checkpoint.mdns", res.model, step=tcfg.steps, ema=res.ema,
                       rng_state_digest=f"{tcfg.seed}:{tcfg.steps}", extra=extra)
    summary = {"steps": tcfg.steps, "sampler_calls": res.sampler_calls,
               "final": res.metrics[-1],
               "ess_trailing100": float(np.mean([r["ess"] for r in res.metrics[-100:]]))}
    if a.eval:
        ev = resolved["eval"]
        model = res.ema if ev["use_ema"] else res.model
        rep = runs.evaluate_model(model, spec, ucfg, ev["num_samples"], ev["seed"], ev["chunk"])
        rep.pop("observables", None)
        summary["eval"] = rep
    io.write_json(out / "summary.json", summary)
    print(json.dumps(summary, indent=2))


def _load_model(path, use_raw):
    model, ema, header = io.load_checkpoint(path)
    if ema is not None and not use_raw:
        model = ema
    sampler = header.get("sampler", {"family": "mdns"})
    ucfg = None
    if sampler.get("family") == "udns":
        from .udns import UdnsConfig
        ucfg = UdnsConfig(**{k: v for k, v in sampler.items() if k != "family"})
    spec = model.spec
    if spec is None:
        raise ValueError("checkpoint carries no target spec")
    return model, spec, ucfg


def cmd_sample(a):
    model, spec, ucfg = _load_model(a.checkpoint, a.raw)
    x, w = runs.draw_samples(model, spec, a.count, a.seed, ucfg, a.chunk)
    io.write_samples(a.out, x, spec.N, w)
    print(json.dumps({"samples": a.count, "out": str(a.out)}))


def cmd_eval(a):
    if bool(a.checkpoint) == bool(a.samples):
        raise ValueError("give exactly one of --checkpoint / --samples")
    truth = io.read_samples(a.truth)[0] if a.truth else None
    if a.checkpoint:
        model, spec, ucfg = _load_model(a.checkpoint, a.raw)
        x, w = runs.draw_samples(model, spec, a.count, a.seed, ucfg, a.chunk)
    else:
        spec = _spec_from_args(a)
        x, w, N, D = io.read_samples(a.samples)
        if (N, D) != (spec.N, spec.D):
            raise ValueError(f"dump has N={N}, D={D}; spec expects N={spec.N}, D={spec.D}")
    rep = runs.sample_report(spec, x, w, truth=truth)
    if a.corr_csv:
        observables(x, spec).write_corr_csv(a.corr_csv)
    text = json.dumps(rep, indent=2)
    if a.out:
        Path(a.out).write_text(text + "\n")
    else:
        print(text)


def cmd_baseline(a):
    spec = _spec_from_args(a)
    cfg = ChainConfig(a.chains, a.burnin, a.thin, a.rounds, a.seed, a.unit)
    x = run_chain(spec, a.algo, cfg)
    io.write_samples(a.out, x, spec.N)
    io.write_json(str(a.out) + ".config.json",
                  {"spec": spec.to_dict(), "algo": a.algo, "chain": asdict(cfg)})
    print(json.dumps({"samples": len(x), "out": str(a.out)}))


def cmd_oracle(a):
    spec = _spec_from_args(a)
    table = build_exact(spec)
    res = {"spec": spec.to_dict(), "log_Z": table.log_Z, "states": int(len(table.log_weights))}
    if a.dump_pi:
        dump_csv(table, a.dump_pi)
    if a.samples:
        if not a.out:
            raise ValueError("--samples needs --out")
        x = exact_sample(table, stream(a.seed, "oracle"), a.samples)
        io.write_samples(a.out, x, spec.N)
        res["samples_out"] = str(a.out)
    print(json.dumps(res, indent=2))


def cmd_repro(a):
    chain = ChainConfig(a.chains, a.burnin, a.thin, a.rounds, a.seed, a.unit)
    rep = runs.run_repro(a.table, a.steps_scale, not a.no_baseline, chain, a.out,
                         a.eval_samples)
    print(runs.format_rows(rep["rows"]))


def _add_chain_args(p, defaults=(1024, 1024, 1024, 1024)):
    p.add_argument("--chains", type=int, default=defaults[0])
    p.add_argument("--burnin", type=int, default=defaults[1])
    p.add_argument("--thin", type=int, default=defaults[2])
    p.add_argument("--rounds", type=int, default=defaults[3])
    p.add_argument("--unit", choices=["sweep", "proposal"], default="sweep",
                   help="MH step unit (SW always counts cluster updates)")
    p.add_argument("--seed", type=int, default=0)


def build_parser():
    ap = argparse.ArgumentParser(prog="mdns", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a score model")
    p.add_argument("--config", help="run config JSON")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a dotted config path, e.g. train.lr=5e-4")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--eval", action="store_true", help="evaluate the trained model")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="draw samples from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--count", type=int, default=2 ** 16)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--chunk", type=int, default=8192)
    p.add_argument("--raw", action="store_true", help="use raw weights instead of the EMA")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="metrics for a checkpoint or a sample dump")
    p.add_argument("--checkpoint")
    p.add_argument("--samples")
    p.add_argument("--truth", help="reference sample dump for observable errors")
    p.add_argument("--count", type=int, default=2 ** 18)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--chunk", type=int, default=8192)
    p.add_argument("--raw", action="store_true")
    p.add_argument("--corr-csv")
    p.add_argument("--out")
    _add_spec_args(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("baseline", help="MH / SW chains")
    p.add_argument("--algo", choices=["mh", "sw"], required=True)
    p.add_argument("--out", required=True)
    _add_chain_args(p)
    _add_spec_args(p)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("oracle", help="exact enumeration")
    p.add_argument("--dump-pi", help="CSV of (state index, energy, probability)")
    p.add_argument("--samples", type=int, default=0, help="draw exact samples")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    _add_spec_args(p)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("repro", help="desk-scale reproduction tables")
    p.add_argument("table", choices=runs.REPRO_TABLES)
    p.add_argument("--out", help="directory for the report and metrics logs")
    p.add_argument("--steps-scale", type=float, default=1.0,
                   help="multiply every training budget (for quick runs)")
    p.add_argument("--eval-samples", type=int,
                   help="override the evaluation sample count of every run")
    p.add_argument("--no-baseline", action="store_true")
    _add_chain_args(p)
    p.set_defaults(func=cmd_repro)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        a = ap.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if a.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        a.func(a)
    except CapExceeded as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CAP
    except FloatingPointError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, TypeError, KeyError, OSError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
