"""MLP score network with an explicit output-adjoint reverse pass.

Input encoding: one-hot over N+1 tokens per site (mask included), flattened;
time-conditioned models append (sin(pi t), cos(pi t)). Hidden layers use
SiLU. The output head produces D x N logits which become

* a row softmax (masked diffusion: rows are conditional marginals), or
* an elementwise exponential (uniform diffusion: rows are rate ratios, and
  a zero head gives the reference rates s = 1).

The final linear layer is zero-initialised, so a fresh model is the
reference sampler exactly.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .lattice import ISING, MASK, ModelSpec, conditional_logits, flip_log_ratio

SIGMA_HIDDEN = (32, 32, 32)


@dataclass(frozen=True)
class Arch:
    D: int
    N: int
    hidden: tuple = (128, 128)
    activation: str = "silu"
    time_conditioned: bool = False
    precondition: bool = False

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.activation != "silu":
            raise ValueError("only the 'silu' activation is implemented")

    @property
    def head(self) -> str:
        return "exp" if self.time_conditioned else "softmax"

    @property
    def in_features(self) -> int:
        return self.D * (self.N + 1) + (2 if self.time_conditioned else 0)

    def layer_sizes(self):
        return [self.in_features, *self.hidden, self.D * self.N]

    def param_names(self):
        n = len(self.hidden) + 1
        names = [f"{k}{i}" for i in range(n) for k in ("W", "b")]
        if self.time_conditioned and self.precondition:
            names += [f"sigma_{k}{i}" for i in range(len(SIGMA_HIDDEN) + 1) for k in ("W", "b")]
        return names

    def param_shapes(self):
        shapes = {}
        sizes = self.layer_sizes()
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            shapes[f"W{i}"] = (a, b)
            shapes[f"b{i}"] = (b,)
        if self.time_conditioned and self.precondition:
            ss = [1, *SIGMA_HIDDEN, 1]
            for i, (a, b) in enumerate(zip(ss[:-1], ss[1:])):
                shapes[f"sigma_W{i}"] = (a, b)
                shapes[f"sigma_b{i}"] = (b,)
        return {k: shapes[k] for k in self.param_names()}

    def n_params(self) -> int:
        return int(sum(np.prod(s) for s in self.param_shapes().values()))

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**{**d, "hidden": tuple(d["hidden"])})


def _silu(z):
    return z / (1.0 + np.exp(-z))


def _silu_grad(z):
    sig = 1.0 / (1.0 + np.exp(-z))
    return sig * (1.0 + z * (1.0 - sig))


def _mlp_forward(params, prefix, n_layers, h):
    cache = [h]
    for i in range(n_layers):
        z = h @ params[f"{prefix}W{i}"] + params[f"{prefix}b{i}"]
        if i < n_layers - 1:
            cache.append(z)
            h = _silu(z)
            cache.append(h)
        else:
            h = z
    return h, cache


def _mlp_backward(params, grads, prefix, n_layers, cache, g):
    for i in reversed(range(n_layers)):
        h_in = cache[2 * i]
        grads[f"{prefix}W{i}"] += h_in.T @ g
        grads[f"{prefix}b{i}"] += g.sum(0)
        if i > 0:
            g = (g @ params[f"{prefix}W{i}"].T) * _silu_grad(cache[2 * i - 1])


@dataclass
class ForwardCache:
    mlp: list
    logits: np.ndarray            # float64, (B, D, N), after any bias
    out: np.ndarray               # float64 s = softmax/exp(logits)
    sigma_cache: list | None = None
    flip: np.ndarray | None = None


@dataclass
class ScoreModel:
    arch: Arch
    params: dict
    spec: ModelSpec | None = None      # required for preconditioning
    grads: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.arch.precondition:
            if self.spec is None:
                raise ValueError("preconditioning needs the target ModelSpec")
            if self.spec.kind != ISING:
                raise ValueError("preconditioning is implemented for Ising targets only")
        if not self.grads:
            self.zero_grad()

    @property
    def D(self):
        return self.arch.D

    @property
    def N(self):
        return self.arch.N

    @property
    def time_conditioned(self):
        return self.arch.time_conditioned

    @property
    def dtype(self):
        return self.params["W0"].dtype

    def zero_grad(self):
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def copy(self) -> "ScoreModel":
        return ScoreModel(self.arch, {k: v.copy() for k, v in self.params.items()}, self.spec)

    def astype(self, dtype) -> "ScoreModel":
        return ScoreModel(self.arch, {k: v.astype(dtype) for k, v in self.params.items()}, self.spec)

    # ------------------------------------------------------------------ forward
    def encode(self, x, t=None) -> np.ndarray:
        x = np.asarray(x)
        B = x.shape[0]
        onehot = np.zeros((B, self.D, self.N + 1), dtype=self.dtype)
        np.put_along_axis(onehot, x[..., None].astype(np.int64), 1.0, axis=-1)
        feats = onehot.reshape(B, -1)
        if self.time_conditioned:
            t = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,))
            tf = np.stack([np.sin(np.pi * t), np.cos(np.pi * t)], 1).astype(self.dtype)
            feats = np.concatenate([feats, tf], 1)
        return feats

    def _check_t(self, t):
        if self.time_conditioned:
            if t is None:
                raise ValueError("time-conditioned model needs t")
            t = np.asarray(t, dtype=np.float64)
            if np.any(t < 0) or np.any(t > 1):
                raise ValueError("t must lie in [0, 1]")
        elif t is not None:
            raise ValueError("t given to a model without time conditioning")

    def _forward(self, x, t=None) -> ForwardCache:
        self._check_t(t)
        x = np.asarray(x)
        if x.ndim == 1:
            x = x[None]
        n_layers = len(self.arch.hidden) + 1
        raw, cache = _mlp_forward(self.params, "", n_layers, self.encode(x, t))
        logits = raw.astype(np.float64).reshape(-1, self.D, self.N)
        fc = ForwardCache(cache, logits, None)
        if self.arch.precondition and not self.time_conditioned:
            logits = apply_precondition(self.spec, x, logits)
        elif self.arch.precondition:
            B = x.shape[0]
            tt = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,))[:, None].astype(self.dtype)
            sig, fc.sigma_cache = _mlp_forward(self.params, "sigma_", len(SIGMA_HIDDEN) + 1, tt)
            fc.flip = flip_log_ratio(self.spec, x)
            logits = logits + sig.astype(np.float64)[:, :, None] * fc.flip
        fc.logits = logits
        if self.arch.head == "softmax":
            z = logits - logits.max(-1, keepdims=True)
            e = np.exp(z)
            fc.out = e / e.sum(-1, keepdims=True)
        else:
            fc.out = np.exp(logits)
        return fc

    def forward(self, x, t=None) -> np.ndarray:
        """Score matrix s(x [, t]) of shape (B, D, N) (float64)."""
        return self._forward(x, t).out

    def log_probs(self, x, t=None) -> np.ndarray:
        """log s(x [, t]), computed stably from the logits."""
        fc = self._forward(x, t)
        if self.arch.head == "softmax":
            z = fc.logits - fc.logits.max(-1, keepdims=True)
            return z - np.log(np.exp(z).sum(-1, keepdims=True))
        return fc.logits

    # ----------------------------------------------------------------- backward
    def backward(self, x, t=None, adjoint=None, cache: ForwardCache | None = None):
        """grads += d(sum adjoint * s(x, t)) / d params."""
        x = np.asarray(x)
        if x.ndim == 1:
            x = x[None]
        adjoint = np.asarray(adjoint, dtype=np.float64)
        if adjoint.shape != (x.shape[0], self.D, self.N):
            raise ValueError(f"adjoint shape {adjoint.shape} != {(x.shape[0], self.D, self.N)}")
        if cache is None:
            cache = self._forward(x, t)
        s = cache.out
        if self.arch.head == "softmax":
            g_logits = s * (adjoint - (adjoint * s).sum(-1, keepdims=True))
        else:
            g_logits = adjoint * s
        self.backward_logits(x, t, g_logits, cache)

    def backward_logits(self, x, t, g_logits, cache: ForwardCache):
        """grads += d(sum g_logits * logits) / d params (precondition bias is constant)."""
        B = g_logits.shape[0]
        if self.arch.precondition and self.time_conditioned:
            g_sigma = (g_logits * cache.flip).sum((1, 2))[:, None].astype(self.dtype)
            _mlp_backward(self.params, self.grads, "sigma_", len(SIGMA_HIDDEN) + 1,
                          cache.sigma_cache, g_sigma)
        g = g_logits.reshape(B, -1).astype(self.dtype)
        _mlp_backward(self.params, self.grads, "", len(self.arch.hidden) + 1, cache.mlp, g)


def apply_precondition(spec: ModelSpec, x, raw_logits) -> np.ndarray:
    """Add closed-form single-site conditional logits at masked sites (Ising only)."""
    if spec.kind != ISING:
        raise ValueError("preconditioning is implemented for Ising targets only")
    x = np.asarray(x)
    bias = conditional_logits(spec, x)
    return raw_logits + np.where((x == MASK)[..., None], bias, 0.0)


def precondition_unif(spec: ModelSpec, x, t, raw_logits, sigma) -> np.ndarray:
    """log s = raw + sigma(t) * log pi(x^{d<-n}) / pi(x) (Ising only)."""
    if spec.kind != ISING:
        raise ValueError("preconditioning is implemented for Ising targets only")
    sigma = np.asarray(sigma, dtype=np.float64)
    return raw_logits + sigma.reshape(sigma.shape + (1, 1)) * flip_log_ratio(spec, x)


def init_model(arch: Arch, rng: np.random.Generator, spec: ModelSpec | None = None,
               dtype=np.float32) -> ScoreModel:
    """Fan-in scaled uniform init for hidden layers; zero output layers."""
    params = {}
    shapes = arch.param_shapes()
    last = f"W{len(arch.hidden)}"
    sigma_last = f"sigma_W{len(SIGMA_HIDDEN)}"
    for name in arch.param_names():
        shape = shapes[name]
        if name.startswith("sigma_b") or name.startswith("b") or name in (last, sigma_last):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            bound = 1.0 / np.sqrt(shape[0])
            params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return ScoreModel(arch, params, spec)


def sigma_value(model: ScoreModel, t) -> np.ndarray:
    """sigma(t) of a preconditioned time-conditioned model."""
    tt = np.atleast_1d(np.asarray(t, dtype=np.float64))[:, None].astype(model.dtype)
    out, _ = _mlp_forward(model.params, "sigma_", len(SIGMA_HIDDEN) + 1, tt)
    return out[:, 0].astype(np.float64)
