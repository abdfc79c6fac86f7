"""Small fully connected tanh networks with hand-written backpropagation,
batch normalization and Adam.

Layout for ``L`` hidden layers::

    x -> BN_0 -> [W_1, b_1] -> BN_1 -> tanh -> ... -> [W_L, b_L] -> BN_L -> tanh
      -> [W_out, b_out]

Batch normalization sits on the input and on every hidden pre-activation.
Parameters live in a flat ``dict[str, ndarray]`` so optimizers and
serialization can treat them uniformly.
"""
from __future__ import annotations

import copy
import io
import json
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from .errors import IncompatibleArtifact, ShapeMismatch

BN_EPS = 1e-5
BN_MOMENTUM = 0.99
# features whose variance is below this fraction of their squared scale are
# treated as constants and normalized to exactly zero; without this, rounding
# noise in a constant feature is amplified by 1/sqrt(eps) at every layer
DEGENERATE_REL = 1e-20


@dataclass(frozen=True)
class MLPSpec:
    input_dim: int
    output_shape: Tuple[int, ...]
    hidden_layers: int = 4
    width: int = 50
    batch_norm: bool = True

    def __post_init__(self):
        object.__setattr__(self, "output_shape", tuple(int(s) for s in self.output_shape))
        if self.input_dim < 1 or self.width < 1 or self.hidden_layers < 0:
            raise ShapeMismatch(f"invalid network dimensions {self}")
        if not self.output_shape or min(self.output_shape) < 1:
            raise ShapeMismatch(f"invalid output shape {self.output_shape}")

    @property
    def output_dim(self) -> int:
        return int(np.prod(self.output_shape))

    @property
    def layer_dims(self):
        return [self.input_dim] + [self.width] * self.hidden_layers + [self.output_dim]

    def to_dict(self) -> dict:
        return {"input_dim": self.input_dim, "output_shape": list(self.output_shape),
                "hidden_layers": self.hidden_layers, "width": self.width,
                "batch_norm": self.batch_norm}


@dataclass(eq=False)
class ParamSet:
    """Trainable weights plus batch-norm running statistics.

    ``bn_count`` counts running-stat updates; ``frozen`` blocks any further
    change to the running statistics.
    """

    spec: MLPSpec
    weights: Dict[str, np.ndarray]
    running: Dict[str, np.ndarray] = field(default_factory=dict)
    bn_count: int = 0
    frozen: bool = False

    def copy(self) -> "ParamSet":
        return copy.deepcopy(self)

    def reset_running(self) -> None:
        for k in self.running:
            self.running[k] = (np.zeros_like(self.running[k]) if k.startswith("rm")
                               else np.ones_like(self.running[k]))
        self.bn_count = 0
        self.frozen = False


def init_params(spec: MLPSpec, rng: np.random.Generator) -> ParamSet:
    """Glorot-uniform weights, zero biases, unit BN scale and zero shift."""
    dims = spec.layer_dims
    w = {}
    run = {}
    for i in range(len(dims) - 1):
        lim = np.sqrt(6.0 / (dims[i] + dims[i + 1]))
        w[f"W{i}"] = rng.uniform(-lim, lim, size=(dims[i], dims[i + 1]))
        w[f"b{i}"] = np.zeros(dims[i + 1])
    if spec.batch_norm:
        for i in range(spec.hidden_layers + 1):
            w[f"gamma{i}"] = np.ones(dims[i])
            w[f"beta{i}"] = np.zeros(dims[i])
            run[f"rm{i}"] = np.zeros(dims[i])
            run[f"rv{i}"] = np.ones(dims[i])
    return ParamSet(spec, w, run)


def _degenerate(mu, var):
    return var <= DEGENERATE_REL * np.maximum(mu * mu, 1.0)


def _check_input(spec: MLPSpec, x: np.ndarray):
    if x.ndim != 2 or x.shape[1] != spec.input_dim or x.shape[0] < 1:
        raise ShapeMismatch(f"expected a nonempty (n, {spec.input_dim}) batch, got {x.shape}")


def forward(params: ParamSet, x, training: bool = False, update_stats: bool = True):
    """Network output ``(n, *output_shape)`` and, in training mode, a cache.

    Training mode normalizes with batch statistics and, unless the parameter
    set is frozen, folds them into the running statistics with a warm-started
    exponential moving average. Inference uses the running statistics.
    """
    spec = params.spec
    x = np.asarray(x, dtype=float)
    _check_input(spec, x)
    w = params.weights
    L = spec.hidden_layers
    cache = {"bn": [], "h": []}
    stats = []
    h = x
    for i in range(L + 1):
        if spec.batch_norm:
            if training:
                mu = h.mean(axis=0)
                var = h.var(axis=0)
                stats.append((mu, var))
            else:
                mu, var = params.running[f"rm{i}"], params.running[f"rv{i}"]
            inv = np.where(_degenerate(mu, var), 0.0, 1.0 / np.sqrt(var + BN_EPS))
            xhat = (h - mu) * inv
            if training:
                cache["bn"].append((xhat, inv))
            h = xhat * w[f"gamma{i}"] + w[f"beta{i}"]
        if i > 0:
            h = np.tanh(h)
        cache["h"].append(h)
        h = h @ w[f"W{i}"] + w[f"b{i}"]
    if training and spec.batch_norm and update_stats and not params.frozen:
        params.bn_count += 1
        a = max(1.0 - BN_MOMENTUM, 1.0 / params.bn_count)
        n = x.shape[0]
        for i, (mu, var) in enumerate(stats):
            unbiased = var * n / max(n - 1, 1)
            rm, rv = params.running[f"rm{i}"], params.running[f"rv{i}"]
            params.running[f"rm{i}"] = rm + a * (mu - rm)
            params.running[f"rv{i}"] = rv + a * (unbiased - rv)
    out = h.reshape((x.shape[0],) + spec.output_shape)
    return (out, cache) if training else out


def backward(params: ParamSet, cache, upstream) -> Tuple[Dict[str, np.ndarray], np.ndarray]:
    """Parameter gradients and the input gradient for ``sum(upstream * out)``.

    Batch-norm layers are differentiated through their batch statistics, as
    used by the training-mode forward pass.
    """
    spec = params.spec
    w = params.weights
    L = spec.hidden_layers
    g = np.asarray(upstream, dtype=float).reshape(-1, spec.output_dim)
    grads = {}
    for i in range(L, -1, -1):
        h = cache["h"][i]
        grads[f"W{i}"] = h.T @ g
        grads[f"b{i}"] = g.sum(axis=0)
        g = g @ w[f"W{i}"].T
        if i > 0:
            g = g * (1.0 - h * h)
        if spec.batch_norm:
            xhat, inv = cache["bn"][i]
            grads[f"gamma{i}"] = (g * xhat).sum(axis=0)
            grads[f"beta{i}"] = g.sum(axis=0)
            gx = g * w[f"gamma{i}"]
            g = inv * (gx - gx.mean(axis=0) - xhat * (gx * xhat).mean(axis=0))
    return grads, g


# -- optimizer ---------------------------------------------------------------

def piecewise_lr(total: int, rates=(1e-3, 1e-4, 1e-5)):
    """Piecewise-constant schedule switching at equal fractions of ``total``."""
    cuts = [total * (k + 1) / len(rates) for k in range(len(rates) - 1)]

    def lr(i: int) -> float:
        for c, r in zip(cuts, rates):
            if i < c:
                return r
        return rates[-1]

    return lr


@dataclass(eq=False)
class OptimizerState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step: int = 0
    lr: object = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: ParamSet, lr=1e-3, keys=None) -> "OptimizerState":
        keys = list(params.weights) if keys is None else list(keys)
        return cls({k: np.zeros_like(params.weights[k]) for k in keys},
                   {k: np.zeros_like(params.weights[k]) for k in keys}, 0, lr)

    def rate(self) -> float:
        return self.lr(self.step) if callable(self.lr) else float(self.lr)


def adam_step(opt: OptimizerState, params: ParamSet, grads: Dict[str, np.ndarray]) -> None:
    """In-place Adam update over the keys tracked by ``opt``."""
    lr = opt.rate()
    opt.step += 1
    c1 = 1.0 - opt.beta1 ** opt.step
    c2 = 1.0 - opt.beta2 ** opt.step
    for k in opt.m:
        g = grads[k]
        m = opt.m[k]
        v = opt.v[k]
        m *= opt.beta1
        m += (1 - opt.beta1) * g
        v *= opt.beta2
        v += (1 - opt.beta2) * g * g
        params.weights[k] -= lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)


def transfer_init(source: ParamSet, expect: Optional[MLPSpec] = None) -> ParamSet:
    """Deep copy of a trained set with fresh batch-norm running statistics."""
    if expect is not None and expect != source.spec:
        raise ShapeMismatch(f"cannot transfer {source.spec} into {expect}")
    out = source.copy()
    out.reset_running()
    return out


# -- serialization -----------------------------------------------------------

def save_params(path, params: ParamSet, role: str, step: int) -> None:
    header = {"spec": params.spec.to_dict(), "role": role, "step": int(step),
              "bn_count": params.bn_count, "frozen": params.frozen}
    arrays = {f"w_{k}": v for k, v in params.weights.items()}
    arrays.update({f"r_{k}": v for k, v in params.running.items()})
    arrays["header"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **dict(sorted(arrays.items())))
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_params(path, role: Optional[str] = None, step: Optional[int] = None) -> ParamSet:
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(bytes(data["header"]).decode())
        if role is not None and header["role"] != role:
            raise IncompatibleArtifact(f"{path}: role {header['role']!r}, expected {role!r}")
        if step is not None and header["step"] != step:
            raise IncompatibleArtifact(f"{path}: step {header['step']}, expected {step}")
        s = header["spec"]
        spec = MLPSpec(s["input_dim"], tuple(s["output_shape"]), s["hidden_layers"],
                       s["width"], s["batch_norm"])
        w = {k[2:]: data[k].copy() for k in data.files if k.startswith("w_")}
        r = {k[2:]: data[k].copy() for k in data.files if k.startswith("r_")}
    return ParamSet(spec, w, r, header["bn_count"], header["frozen"])
