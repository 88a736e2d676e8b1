"""Dense feedforward networks under NTK parametrization.

A layer maps ``z -> act(W z / sqrt(fan_in) + bias_scale * b)`` with ``W`` and
``b`` drawn i.i.d. standard normal, so the effective bias is ``N(0, bias_scale^2)``.
The output layer has no activation.  Everything is float64.
"""
from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Union

import numpy as np
from scipy.special import erf

from .errors import ConfigError, DivergenceError, NumericError, ParseError, ShapeError

ACTIVATIONS = ("relu", "erf", "tanh", "identity")
PARAMS_MAGIC = b"CSDPARMS"
DIVERGENCE_LOSS = 1e12


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_widths: tuple = (256,)
    activation: str = "relu"
    ntk_param: bool = True
    bias_scale: float = 0.1
    seed: int = 0
    output_dim: int = 1

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if int(self.input_dim) < 1:
            raise ConfigError(f"input_dim must be positive, got {self.input_dim}")
        if any(w < 1 for w in self.hidden_widths):
            raise ConfigError(f"hidden widths must be positive, got {self.hidden_widths}")
        if int(self.output_dim) < 1:
            raise ConfigError(f"output_dim must be positive, got {self.output_dim}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}; expected one of {ACTIVATIONS}")
        if not (self.bias_scale >= 0 and math.isfinite(self.bias_scale)):
            raise ConfigError(f"bias_scale must be finite and nonnegative, got {self.bias_scale}")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError(f"seed must fit in 64 unsigned bits, got {self.seed}")

    @property
    def layer_dims(self):
        """List of ``(fan_in, fan_out)`` per layer, output layer last."""
        dims = [self.input_dim, *self.hidden_widths, self.output_dim]
        return list(zip(dims[:-1], dims[1:]))

    @property
    def n_params(self):
        return sum(fi * fo + fo for fi, fo in self.layer_dims)

    def with_seed(self, seed):
        return MlpSpec(**{**self.to_dict(), "seed": int(seed)})

    def to_dict(self):
        d = asdict(self)
        d["hidden_widths"] = list(self.hidden_widths)
        return d

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown MlpSpec keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class MlpParams:
    spec: MlpSpec
    weights: list  # (fan_out, fan_in) per layer
    biases: list

    def __post_init__(self):
        for (fi, fo), w, b in zip(self.spec.layer_dims, self.weights, self.biases):
            if w.shape != (fo, fi) or b.shape != (fo,):
                raise ShapeError(f"layer shapes {w.shape}/{b.shape} do not match ({fo}, {fi})")

    @property
    def size(self):
        return self.spec.n_params

    def flat(self):
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b)
        return np.concatenate(parts)

    @classmethod
    def from_flat(cls, spec, flat):
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (spec.n_params,):
            raise ShapeError(f"flat vector has shape {flat.shape}, expected ({spec.n_params},)")
        weights, biases, pos = [], [], 0
        for fi, fo in spec.layer_dims:
            weights.append(flat[pos:pos + fi * fo].reshape(fo, fi).copy())
            pos += fi * fo
            biases.append(flat[pos:pos + fo].copy())
            pos += fo
        return cls(spec, weights, biases)

    def copy(self):
        return MlpParams(self.spec, [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def checksum(self):
        return hashlib.sha256(self.flat().tobytes()).hexdigest()


@dataclass
class TrainConfig:
    """Plain gradient descent settings.

    ``learning_rate=None`` picks ``N / lambda_max(Theta(X, X))``, i.e. the inverse
    top curvature of the mean squared loss in the linearized model.
    """

    learning_rate: Union[float, None] = None
    max_steps: int = 10_000
    batch_size: Union[int, str] = "full"
    loss_tolerance: float = 0.0
    seed: int = 0

    def __post_init__(self):
        lr = self.learning_rate
        if lr is not None and not (math.isfinite(lr) and lr > 0):
            raise ConfigError(f"learning_rate must be positive and finite, got {lr}")
        if int(self.max_steps) < 1:
            raise ConfigError(f"max_steps must be positive, got {self.max_steps}")
        if self.batch_size != "full" and int(self.batch_size) < 1:
            raise ConfigError(f"batch_size must be positive or 'full', got {self.batch_size}")
        if not self.loss_tolerance >= 0:
            raise ConfigError(f"loss_tolerance must be nonnegative, got {self.loss_tolerance}")


def init_mlp(spec: MlpSpec) -> MlpParams:
    """Draw weights and biases i.i.d. N(0, 1) from a generator seeded by ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    weights, biases = [], []
    for fi, fo in spec.layer_dims:
        w = rng.standard_normal((fo, fi))
        if not spec.ntk_param:
            w /= math.sqrt(fi)
        weights.append(w)
        biases.append(rng.standard_normal(fo))
    return MlpParams(spec, weights, biases)


def _act(name, h):
    if name == "relu":
        return np.maximum(h, 0.0)
    if name == "tanh":
        return np.tanh(h)
    if name == "erf":
        return erf(h)
    return h


def _act_grad(name, h):
    if name == "relu":
        return (h > 0).astype(np.float64)  # subgradient 0 at 0
    if name == "tanh":
        return 1.0 - np.tanh(h) ** 2
    if name == "erf":
        return (2.0 / math.sqrt(math.pi)) * np.exp(-h * h)
    return np.ones_like(h)


def layer_scales(spec):
    if not spec.ntk_param:
        return [1.0] * len(spec.layer_dims)
    return [1.0 / math.sqrt(fi) for fi, _ in spec.layer_dims]


def _as_batch(params, x):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2 or X.shape[1] != params.spec.input_dim:
        raise ShapeError(f"input has shape {x.shape}; expected trailing dimension {params.spec.input_dim}")
    if not np.all(np.isfinite(X)):
        raise NumericError("non-finite input to forward pass")
    return X, single


def forward_cache(params, X):
    """Forward pass that keeps layer inputs ``zs`` and pre-activations ``hs``."""
    spec = params.spec
    scales = layer_scales(spec)
    last = len(params.weights) - 1
    zs, hs = [X], []
    z = X
    for l, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = (z @ w.T) * scales[l] + spec.bias_scale * b
        hs.append(h)
        if l < last:
            z = _act(spec.activation, h)
            zs.append(z)
        else:
            z = h
    return zs, hs, z


def forward(params: MlpParams, x) -> np.ndarray:
    """Network output.  A single input row gives a scalar (or a vector when output_dim > 1)."""
    X, single = _as_batch(params, x)
    out = forward_cache(params, X)[2]
    if params.spec.output_dim == 1:
        out = out[:, 0]
        return float(out[0]) if single else out
    return out[0] if single else out


def vjp(params, zs, hs, dout):
    """Parameter gradients of ``sum(dout * output)``, returned as per-layer lists."""
    spec = params.spec
    scales = layer_scales(spec)
    n_layers = len(params.weights)
    gw, gb = [None] * n_layers, [None] * n_layers
    delta = dout
    for l in range(n_layers - 1, -1, -1):
        gw[l] = scales[l] * (delta.T @ zs[l])
        gb[l] = spec.bias_scale * delta.sum(axis=0)
        if l > 0:
            delta = (delta @ params.weights[l]) * scales[l] * _act_grad(spec.activation, hs[l - 1])
    return gw, gb


def input_vjp(params, hs, dout):
    """Gradient of ``sum(dout * output)`` with respect to the network inputs."""
    spec = params.spec
    scales = layer_scales(spec)
    delta = dout
    for l in range(len(params.weights) - 1, -1, -1):
        delta = (delta @ params.weights[l]) * scales[l]
        if l > 0:
            delta = delta * _act_grad(spec.activation, hs[l - 1])
    return delta


def per_example_factors(params, X):
    """Per-layer ``(deltas, inputs)`` for a scalar-output net.

    The gradient of ``f(x_i)`` w.r.t. layer ``l`` weights is
    ``scale_l * outer(deltas[i], inputs[i])`` and w.r.t. its bias
    ``bias_scale * deltas[i]``.
    """
    if params.spec.output_dim != 1:
        raise ShapeError("per-example gradients need a scalar-output network")
    spec = params.spec
    scales = layer_scales(spec)
    zs, hs, _ = forward_cache(params, X)
    n_layers = len(params.weights)
    factors = [None] * n_layers
    delta = np.ones((X.shape[0], 1))
    for l in range(n_layers - 1, -1, -1):
        factors[l] = (delta, zs[l])
        if l > 0:
            delta = (delta @ params.weights[l]) * scales[l] * _act_grad(spec.activation, hs[l - 1])
    return factors


def jacobian(params, X):
    """Per-example gradient matrix, shape ``(N, P)`` in flat-parameter order."""
    X, _ = _as_batch(params, X)
    scales = layer_scales(params.spec)
    beta = params.spec.bias_scale
    blocks = []
    for l, (delta, z) in enumerate(per_example_factors(params, X)):
        blocks.append((scales[l] * delta[:, :, None] * z[:, None, :]).reshape(X.shape[0], -1))
        blocks.append(beta * delta)
    return np.concatenate(blocks, axis=1)


def backprop_grads(params: MlpParams, x) -> np.ndarray:
    """Exact gradient of the scalar output w.r.t. the flat parameter vector."""
    X, single = _as_batch(params, x)
    if not single:
        raise ShapeError("backprop_grads takes a single input vector; use jacobian for batches")
    return jacobian(params, X)[0]


def auto_learning_rate(params, X, kind="full", n_iter=100):
    """``N / lambda_max`` of the Gram matrix, estimated by power iteration."""
    from .kernel import gram

    K = gram(params, X, kind).values
    v = np.ones(K.shape[0]) / math.sqrt(K.shape[0])
    lam = 0.0
    for _ in range(n_iter):
        w = K @ v
        lam = float(np.linalg.norm(w))
        if lam == 0.0:
            break
        v = w / lam
    if lam <= 0.0:
        raise NumericError("Gram matrix is zero; cannot pick a learning rate")
    return K.shape[0] / lam


def train_regression(params: MlpParams, X, Y, cfg: TrainConfig, *, small_init=False,
                     last_layer_only=False):
    """Gradient descent on ``0.5 * mean((f(X) - Y)^2)``.

    Returns ``(trained_params, loss_trace)``; the trace holds the loss before
    every update plus the final loss.  With ``small_init`` the fitted function is
    ``f(., theta) - f(., theta_start)``, which is zero at the start.
    ``last_layer_only`` updates only the output-layer weights, so the tangent
    kernel of the trained part is exactly the last-layer kernel.  The input
    ``params`` is never modified.
    """
    X, _ = _as_batch(params, X)
    Y = np.asarray(Y, dtype=np.float64).reshape(X.shape[0], -1)
    if Y.shape[1] != params.spec.output_dim or X.shape[0] == 0:
        raise ShapeError(f"labels of shape {Y.shape} do not match {X.shape[0]} inputs")
    n = X.shape[0]
    if cfg.batch_size != "full" and int(cfg.batch_size) > n:
        raise ConfigError(f"batch_size {cfg.batch_size} exceeds dataset size {n}")
    p = params.copy()
    if small_init:
        Y = Y + forward_cache(p, X)[2]
    if cfg.learning_rate is not None:
        lr = cfg.learning_rate
    else:
        lr = auto_learning_rate(p, X, "last_layer" if last_layer_only else "full")
    last = len(p.weights) - 1
    rng = np.random.default_rng(cfg.seed)
    full = cfg.batch_size == "full" or int(cfg.batch_size) == n
    trace = []
    for step in range(cfg.max_steps + 1):
        if full:
            xb, yb = X, Y
        else:
            idx = rng.choice(n, size=int(cfg.batch_size), replace=False)
            xb, yb = X[idx], Y[idx]
        zs, hs, out = forward_cache(p, xb)
        r = out - yb
        loss = 0.5 * float(np.mean(np.sum(r * r, axis=1)))
        trace.append(loss)
        if not math.isfinite(loss) or loss > DIVERGENCE_LOSS:
            raise DivergenceError(f"training diverged at step {step} (loss={loss:.3e})", step=step)
        if loss <= cfg.loss_tolerance or step == cfg.max_steps:
            break
        gw, gb = vjp(p, zs, hs, r / xb.shape[0])
        if last_layer_only:
            p.weights[last] -= lr * gw[last]
            continue
        for l in range(len(p.weights)):
            p.weights[l] -= lr * gw[l]
            p.biases[l] -= lr * gb[l]
    return p, np.asarray(trace)


class SmallInitView:
    """``x -> f(x, params) - f(x, theta0)`` with ``theta0`` frozen at creation.

    Rebind ``view.params`` after training; the snapshot stays fixed.
    """

    def __init__(self, params):
        self.params = params
        self.theta0 = params.copy()

    def __call__(self, x):
        return forward(self.params, x) - forward(self.theta0, x)

    def grad(self, x):
        return backprop_grads(self.params, x)


def small_init_view(params: MlpParams) -> SmallInitView:
    return SmallInitView(params)


def save_params(params: MlpParams, path):
    Path(path).write_bytes(params_to_bytes(params))


def params_to_bytes(params):
    dims = params.spec.layer_dims
    out = [PARAMS_MAGIC, struct.pack("<I", len(dims))]
    for fi, fo in dims:
        out.append(struct.pack("<II", fi, fo))
    out.append(params.flat().astype("<f8").tobytes())
    return b"".join(out)


def params_from_bytes(buf, spec, offset=0):
    """Parse one parameter block starting at ``offset``; returns ``(params, end_offset)``."""
    if buf[offset:offset + 8] != PARAMS_MAGIC:
        raise ParseError("bad parameter-file magic", offset)
    pos = offset + 8
    if len(buf) < pos + 4:
        raise ParseError("truncated layer count", pos)
    (n_layers,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    if len(buf) < pos + 8 * n_layers:
        raise ParseError("truncated layer dimensions", pos)
    dims = [struct.unpack_from("<II", buf, pos + 8 * i) for i in range(n_layers)]
    pos += 8 * n_layers
    if [tuple(d) for d in dims] != [tuple(d) for d in spec.layer_dims]:
        raise ShapeError(f"file layer dims {dims} do not match spec {spec.layer_dims}")
    nbytes = 8 * spec.n_params
    if len(buf) < pos + nbytes:
        raise ParseError("truncated parameter payload", pos)
    flat = np.frombuffer(buf, dtype="<f8", count=spec.n_params, offset=pos).astype(np.float64)
    return MlpParams.from_flat(spec, flat), pos + nbytes


def load_params(path, spec: MlpSpec) -> MlpParams:
    return params_from_bytes(Path(path).read_bytes(), spec)[0]
