"""Persistence: checkpoints, sample dumps and JSON run configs.

Checkpoint layout (little-endian):

    b"MDNS" | uint32 version | uint32 header length | UTF-8 JSON header
    | float32 arrays in header["order"], row-major
    | (optional) the EMA copy in the same order when header["ema"] is true

Sample dumps are text: a header ``#mdns-samples v1 N=<N> D=<D>`` followed by
one configuration per line, token n written as the base-36 digit of n - 1,
optionally followed by a tab and the log-weight.
"""

from __future__ import annotations

import copy
import json
import struct
from pathlib import Path

import numpy as np

from .lattice import ModelSpec
from .score import Arch, ScoreModel

MAGIC = b"MDNS"
VERSION = 1
DIGITS = "0123456789abcdefghijklmnopqrstuvwxyz"


class FormatError(ValueError):
    pass


def save_checkpoint(path, model: ScoreModel, step: int = 0, ema: ScoreModel | None = None,
                    rng_state_digest: str = "", extra: dict | None = None):
    order = list(model.arch.param_names())
    header = {"arch": model.arch.to_dict(),
              "spec": model.spec.to_dict() if model.spec is not None else None,
              "step": int(step), "rng_state_digest": rng_state_digest,
              "order": order, "shapes": [list(model.params[k].shape) for k in order],
              "ema": ema is not None}
    if extra:
        header.update(extra)
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(blob)))
        fh.write(blob)
        for m in ([model, ema] if ema is not None else [model]):
            for k in order:
                fh.write(np.ascontiguousarray(m.params[k], dtype="<f4").tobytes())


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        return _read_header(fh)


def _read_header(fh) -> dict:
    if fh.read(4) != MAGIC:
        raise FormatError("not an mdns checkpoint (bad magic)")
    raw = fh.read(8)
    if len(raw) != 8:
        raise FormatError("truncated checkpoint header")
    version, n = struct.unpack("<II", raw)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    try:
        return json.loads(fh.read(n).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"corrupt checkpoint header: {e}") from None


def load_checkpoint(path):
    """Return (model, ema or None, header)."""
    with open(path, "rb") as fh:
        header = _read_header(fh)
        arch = Arch.from_dict(header["arch"])
        spec = ModelSpec.from_dict(header["spec"]) if header.get("spec") else None
        order = header["order"]
        if order != list(arch.param_names()):
            raise FormatError("parameter order does not match the architecture")

        def read_params():
            params = {}
            for k, shape in zip(order, header["shapes"]):
                count = int(np.prod(shape))
                buf = fh.read(4 * count)
                if len(buf) != 4 * count:
                    raise FormatError(f"truncated parameter block {k}")
                params[k] = np.frombuffer(buf, dtype="<f4").astype(np.float32).reshape(shape)
            return params

        model = ScoreModel(arch, read_params(), spec)
        ema = ScoreModel(arch, read_params(), spec) if header.get("ema") else None
    return model, ema, header


def encode_tokens(x) -> str:
    return "".join(DIGITS[int(t) - 1] for t in x)


def decode_tokens(line: str) -> np.ndarray:
    try:
        return np.array([DIGITS.index(c) + 1 for c in line], dtype=np.int64)
    except ValueError:
        raise FormatError(f"bad token string {line!r}") from None


def write_samples(path, samples, N: int, log_weights=None):
    samples = np.asarray(samples)
    if N > len(DIGITS):
        raise FormatError(f"dump format supports N <= {len(DIGITS)}")
    D = samples.shape[1]
    with open(path, "w") as fh:
        fh.write(f"#mdns-samples v1 N={N} D={D}\n")
        table = np.array(list(DIGITS[:N]))
        rows = ["".join(r) for r in table[samples - 1]]
        if log_weights is None:
            fh.write("\n".join(rows))
        else:
            fh.write("\n".join(f"{r}\t{float(w)!r}" for r, w in zip(rows, log_weights)))
        if rows:
            fh.write("\n")


def read_samples(path):
    """Return (samples, log_weights or None, N, D)."""
    with open(path) as fh:
        head = fh.readline().split()
        if len(head) != 4 or head[:2] != ["#mdns-samples", "v1"]:
            raise FormatError("missing '#mdns-samples v1' header")
        try:
            N = int(head[2].removeprefix("N="))
            D = int(head[3].removeprefix("D="))
        except ValueError:
            raise FormatError("bad N/D fields in sample header") from None
        toks, weights = [], []
        for ln, line in enumerate(fh, 2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            x = decode_tokens(parts[0])
            if len(x) != D or x.max() > N:
                raise FormatError(f"line {ln}: expected {D} tokens in 1..{N}")
            toks.append(x)
            if len(parts) > 1:
                weights.append(float(parts[1]))
    samples = np.array(toks, dtype=np.int64).reshape(-1, D)
    if weights and len(weights) != len(toks):
        raise FormatError("log-weights present on some lines only")
    return samples, (np.array(weights) if weights else None), N, D


def load_config(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(config: dict, overrides) -> dict:
    """Apply ``a.b.c=value`` overrides; values are parsed as JSON when possible."""
    out = copy.deepcopy(config)
    for item in overrides or ():
        if "=" not in item:
            raise ValueError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        node = out
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ValueError(f"override {key!r} descends into a non-object")
        node[parts[-1]] = parse_value(value)
    return out


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
