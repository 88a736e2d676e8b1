"""Contextual similarity distillation.

A single model ``g(x, c) = phi(x)^T psi(c)`` (unit-normalized embeddings) is
regressed onto normalized last-layer kernel similarities of a frozen prior
network.  Ensemble variance then follows from one forward pass:

    V(x) ~= ||phi_prior(x)||^2 * (1 - g(x, x))

``single_query_variance`` is the a-priori-known-query special case: one scalar
regressor trained on kernel labels ``K(X, x_t)``.
"""
from __future__ import annotations

import json
import math
import struct
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

from .errors import ConfigError, DivergenceError, ParseError, ShapeError
from .gp import clamp_variance
from .kernel import KernelKind, cross, last_layer_features
from .nn import (
    DIVERGENCE_LOSS,
    MlpParams,
    MlpSpec,
    TrainConfig,
    auto_learning_rate,
    forward,
    forward_cache,
    init_mlp,
    params_from_bytes,
    params_to_bytes,
    train_regression,
    vjp,
)

NORM_EPSILON = 1e-12
DEFAULT_CSD_LR = 5.0
MODEL_MAGIC = b"CSDMODEL"


# --------------------------------------------------------------------------
# context providers


@dataclass
class AugConfig:
    """Random transforms used to turn training inputs into extra contexts.

    Vector inputs: additive Gaussian jitter, per-coordinate masking and a
    global rescale.  When ``image_shape`` is set, rows are also treated as
    ``(h, w)`` images for flips and patch zeroing.
    """

    jitter_sigma: float = 0.0
    mask_prob: float = 0.0
    scale_prob: float = 0.0
    scale_range: tuple = (1.0, 1.0)
    image_shape: Union[tuple, None] = None
    hflip_prob: float = 0.0
    vflip_prob: float = 0.0
    patch_prob: float = 0.0
    patch_frac: float = 0.25

    def __post_init__(self):
        self.scale_range = tuple(float(s) for s in self.scale_range)
        for name in ("mask_prob", "scale_prob", "hflip_prob", "vflip_prob", "patch_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {p}")
        if self.jitter_sigma < 0:
            raise ConfigError(f"jitter_sigma must be nonnegative, got {self.jitter_sigma}")
        if len(self.scale_range) != 2 or self.scale_range[0] > self.scale_range[1]:
            raise ConfigError(f"scale_range must be (lo, hi) with lo <= hi, got {self.scale_range}")
        if not 0.0 < self.patch_frac <= 1.0:
            raise ConfigError(f"patch_frac must lie in (0, 1], got {self.patch_frac}")
        if self.image_shape is not None:
            self.image_shape = tuple(int(s) for s in self.image_shape)


def augment_batch(X, cfg: AugConfig, rng):
    X = np.array(X, dtype=np.float64, copy=True)
    n, dim = X.shape
    if cfg.jitter_sigma > 0:
        X += cfg.jitter_sigma * rng.standard_normal(X.shape)
    if cfg.mask_prob > 0:
        X[rng.random(X.shape) < cfg.mask_prob] = 0.0
    if cfg.scale_prob > 0:
        hit = rng.random(n) < cfg.scale_prob
        factors = rng.uniform(cfg.scale_range[0], cfg.scale_range[1], size=n)
        X[hit] *= factors[hit, None]
    if cfg.image_shape is not None:
        h, w = cfg.image_shape
        if h * w != dim:
            raise ShapeError(f"image_shape {cfg.image_shape} does not match input dimension {dim}")
        img = X.reshape(n, h, w)
        hflip = rng.random(n) < cfg.hflip_prob
        img[hflip] = img[hflip, :, ::-1]
        vflip = rng.random(n) < cfg.vflip_prob
        img[vflip] = img[vflip, ::-1, :]
        ph, pw = max(1, round(h * cfg.patch_frac)), max(1, round(w * cfg.patch_frac))
        for i in np.flatnonzero(rng.random(n) < cfg.patch_prob):
            r0 = rng.integers(0, h - ph + 1)
            c0 = rng.integers(0, w - pw + 1)
            img[i, r0:r0 + ph, c0:c0 + pw] = 0.0
        X = img.reshape(n, dim)
    return X


def augment(x, aug_config: AugConfig, seed=0):
    """Seeded random transform of a single input vector."""
    x = np.asarray(x, dtype=np.float64)
    return augment_batch(x[None], aug_config, np.random.default_rng(seed))[0]


@dataclass
class ReuseTrain:
    tag = "reuse"

    def sample(self, X, idx, rng):
        return X[idx]


@dataclass
class Augment:
    config: AugConfig = field(default_factory=AugConfig)
    tag = "augment"

    def sample(self, X, idx, rng):
        return augment_batch(X[idx], self.config, rng)


@dataclass
class External:
    """Unlabeled context inputs, e.g. from a target domain."""

    data: np.ndarray
    tag = "external"

    def sample(self, X, idx, rng):
        j = rng.choice(self.data.shape[0], size=len(idx), replace=self.data.shape[0] < len(idx))
        return self.data[j]


# --------------------------------------------------------------------------
# model


@dataclass
class CsdModel:
    prior: MlpParams
    phi: MlpParams
    psi: MlpParams
    embed_dim: int
    norm_epsilon: float = NORM_EPSILON
    train_config: TrainConfig = field(
        default_factory=lambda: TrainConfig(learning_rate=DEFAULT_CSD_LR, max_steps=5000, batch_size=64)
    )
    phi0: Union[MlpParams, None] = None
    psi0: Union[MlpParams, None] = None
    provider_tag: str = "none"
    trained: bool = False
    clamp_count: int = 0

    @property
    def small_init(self):
        return self.phi0 is not None


INIT_MODES = ("split", "subtract", "plain")


def make_csd_model(prior: MlpParams, embed_dim=256, *, hidden_widths=None, seed=None,
                   share_prior_torso=True, init="split", norm_epsilon=NORM_EPSILON,
                   train_config=None) -> CsdModel:
    """Fresh feature/context nets for a frozen scalar-output ``prior``.

    With ``share_prior_torso`` both nets start from the prior's hidden layers
    (their output layers stay independent), so their tangent kernels agree
    with the prior's at initialization.

    ``init`` controls how ``g(x, c) = 0`` is enforced at the start:

    * ``"split"``: the output layer of ``phi`` starts at zero on the second half
      of the embedding and that of ``psi`` on the first half, so the normalized
      embeddings are orthogonal for every input pair.
    * ``"subtract"``: the initial inner product is stored and subtracted.  Its
      random offset of order ``1/sqrt(embed_dim)`` bounds how closely
      ``g(x, x)`` can approach 1.
    * ``"plain"``: no correction.
    """
    if prior.spec.output_dim != 1:
        raise ConfigError("prior network must have a scalar output")
    if init not in INIT_MODES:
        raise ConfigError(f"init must be one of {INIT_MODES}, got {init!r}")
    if init == "split" and int(embed_dim) < 2:
        raise ConfigError("split init needs embed_dim >= 2")
    ps = prior.spec
    widths = ps.hidden_widths if hidden_widths is None else tuple(hidden_widths)
    if share_prior_torso and widths != ps.hidden_widths:
        raise ConfigError("share_prior_torso needs the prior's hidden widths")
    base = ps.seed if seed is None else int(seed)
    ss = np.random.SeedSequence([base, 0xC5D])
    seeds = [int(s.generate_state(1, np.uint64)[0]) for s in ss.spawn(2)]
    nets = []
    for s in seeds:
        spec = MlpSpec(ps.input_dim, widths, ps.activation, ps.ntk_param, ps.bias_scale, s, int(embed_dim))
        net = init_mlp(spec)
        if share_prior_torso:
            for l in range(len(widths)):
                net.weights[l] = prior.weights[l].copy()
                net.biases[l] = prior.biases[l].copy()
        nets.append(net)
    phi, psi = nets
    if init == "split":
        half = int(embed_dim) // 2
        for net, rows in ((phi, slice(half, None)), (psi, slice(None, half))):
            net.weights[-1][rows] = 0.0
            net.biases[-1][rows] = 0.0
    model = CsdModel(prior.copy(), phi, psi, int(embed_dim), norm_epsilon)
    if train_config is not None:
        model.train_config = train_config
    if init == "subtract":
        model.phi0, model.psi0 = phi.copy(), psi.copy()
    return model


def _unit(F, eps):
    n = np.linalg.norm(F, axis=1, keepdims=True)
    nf = np.maximum(n, eps)
    return F / nf, nf, n > eps


def _unit_backward(u, nf, active, g):
    proj = np.sum(u * g, axis=1, keepdims=True)
    return np.where(active, (g - u * proj) / nf, g / nf)


def prior_sq_norm(prior, X):
    """``||phi_prior(x)||^2``, i.e. the last-layer kernel diagonal."""
    F = last_layer_features(prior, X)
    return np.sum(F * F, axis=1)


def csd_labels(prior_params, X_batch, C_batch, norm_epsilon=NORM_EPSILON):
    """Cosine similarities of prior penultimate features, ``|X| x |C|``."""
    a, _, _ = _unit(last_layer_features(prior_params, X_batch), norm_epsilon)
    c, _, _ = _unit(last_layer_features(prior_params, C_batch), norm_epsilon)
    return a @ c.T


def _embed(net, X, eps):
    zs, hs, out = forward_cache(net, X)
    u, nf, active = _unit(out, eps)
    return u, nf, active, zs, hs


def _init_inner(model, X, C):
    if not model.small_init:
        return 0.0
    a = _unit(forward_cache(model.phi0, X)[2], model.norm_epsilon)[0]
    c = _unit(forward_cache(model.psi0, C)[2], model.norm_epsilon)[0]
    return a @ c.T


def pair_weights(b):
    """Loss weights: mean over the diagonal plus mean over the off-diagonal."""
    W = np.full((b, b), 1.0 / (b * (b - 1))) if b > 1 else np.zeros((1, 1))
    np.fill_diagonal(W, 1.0 / b)
    return W


def csd_loss(model: CsdModel, X_batch, C_batch, labels=None):
    """Paired squared loss and its gradients.

    Returns ``(loss, grads)`` with ``grads = {"phi": (gw, gb), "psi": (gw, gb)}``.
    """
    X_batch = np.atleast_2d(np.asarray(X_batch, dtype=np.float64))
    C_batch = np.atleast_2d(np.asarray(C_batch, dtype=np.float64))
    if X_batch.shape[0] != C_batch.shape[0]:
        raise ShapeError(f"batch sizes differ: {X_batch.shape[0]} inputs vs {C_batch.shape[0]} contexts")
    if labels is None:
        labels = csd_labels(model.prior, X_batch, C_batch, model.norm_epsilon)
    eps = model.norm_epsilon
    a, na, act_a, zs_a, hs_a = _embed(model.phi, X_batch, eps)
    c, nc, act_c, zs_c, hs_c = _embed(model.psi, C_batch, eps)
    R = a @ c.T - _init_inner(model, X_batch, C_batch) - labels
    W = pair_weights(X_batch.shape[0])
    loss = 0.5 * float(np.sum(W * R * R))
    dG = W * R
    da = _unit_backward(a, na, act_a, dG @ c)
    dc = _unit_backward(c, nc, act_c, dG.T @ a)
    grads = {"phi": vjp(model.phi, zs_a, hs_a, da), "psi": vjp(model.psi, zs_c, hs_c, dc)}
    return loss, grads


def train_csd(model: CsdModel, X, provider=None, cfg: TrainConfig = None):
    """Seeded minibatch gradient descent on :func:`csd_loss`.

    Each step draws an input batch from ``X`` and a same-sized context batch
    from ``provider`` (index-aligned for :class:`ReuseTrain`).  The prior is
    never touched.  Returns ``(model, loss_trace)``; the model is updated in place.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[0] == 0:
        raise ShapeError("training set is empty")
    if X.shape[1] != model.prior.spec.input_dim:
        raise ShapeError(f"inputs have dimension {X.shape[1]}, model expects {model.prior.spec.input_dim}")
    provider = ReuseTrain() if provider is None else provider
    if isinstance(provider, External):
        provider.data = np.atleast_2d(np.asarray(provider.data, dtype=np.float64))
        if provider.data.shape[1] != X.shape[1] or provider.data.shape[0] == 0:
            raise ShapeError("external context data must be nonempty and match the input dimension")
    cfg = model.train_config if cfg is None else cfg
    lr = DEFAULT_CSD_LR if cfg.learning_rate is None else cfg.learning_rate
    n = X.shape[0]
    b = n if cfg.batch_size == "full" else min(int(cfg.batch_size), n)
    rng = np.random.default_rng(cfg.seed)
    trace = np.empty(cfg.max_steps)
    for step in range(cfg.max_steps):
        idx = np.arange(n) if b == n else rng.choice(n, size=b, replace=False)
        C_b = provider.sample(X, idx, rng)
        loss, grads = csd_loss(model, X[idx], C_b)
        if not math.isfinite(loss) or loss > DIVERGENCE_LOSS:
            raise DivergenceError(f"CSD training diverged at step {step} (loss={loss:.3e})", step=step)
        trace[step] = loss
        for net, key in ((model.phi, "phi"), (model.psi, "psi")):
            gw, gb = grads[key]
            for l in range(len(gw)):
                net.weights[l] -= lr * gw[l]
                net.biases[l] -= lr * gb[l]
        if loss <= cfg.loss_tolerance:
            trace = trace[: step + 1]
            break
    model.trained = True
    model.provider_tag = provider.tag
    return model, trace


def confidence(model: CsdModel, X, C=None):
    """``g(x, c)`` row-wise (``c = x`` when ``C`` is omitted)."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    C = X if C is None else np.atleast_2d(np.asarray(C, dtype=np.float64))
    eps = model.norm_epsilon
    a = _unit(forward_cache(model.phi, X)[2], eps)[0]
    c = _unit(forward_cache(model.psi, C)[2], eps)[0]
    g = np.sum(a * c, axis=1)
    if model.small_init:
        a0 = _unit(forward_cache(model.phi0, X)[2], eps)[0]
        c0 = _unit(forward_cache(model.psi0, C)[2], eps)[0]
        g = g - np.sum(a0 * c0, axis=1)
    return g


def predict_variance(model: CsdModel, x, *, clamp=True, return_info=False):
    """Ensemble-variance estimate ``||phi_prior(x)||^2 (1 - g(x, x))``.

    Negative estimates are clamped to 0; those beyond rounding tolerance are
    counted in ``model.clamp_count``.
    With ``return_info`` a dict ``{"trained", "clamped"}`` is returned too.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None] if single else x
    if X.shape[1] != model.prior.spec.input_dim:
        raise ShapeError(f"inputs have dimension {X.shape[1]}, model expects {model.prior.spec.input_dim}")
    scale = prior_sq_norm(model.prior, X)
    v = scale * (1.0 - confidence(model, X))
    clamped = 0
    if clamp:
        v, clamped = clamp_variance(v, scale)
        model.clamp_count += clamped
    if not model.trained:
        warnings.warn("predict_variance called on an untrained CSD model", UserWarning)
    out = float(v[0]) if single else v
    if return_info:
        return out, {"trained": model.trained, "clamped": clamped}
    return out


def _flat_grad_g(model, x, c):
    X, C = x[None], c[None]
    eps = model.norm_epsilon
    a, na, act_a, zs_a, hs_a = _embed(model.phi, X, eps)
    u, nc, act_c, zs_c, hs_c = _embed(model.psi, C, eps)
    da = _unit_backward(a, na, act_a, u)
    dc = _unit_backward(u, nc, act_c, a)
    parts = []
    for net, zs, hs, d in ((model.phi, zs_a, hs_a, da), (model.psi, zs_c, hs_c, dc)):
        gw, gb = vjp(net, zs, hs, d)
        for w, b in zip(gw, gb):
            parts.append(w.ravel())
            parts.append(b)
    return np.concatenate(parts)


def context_alignment(model: CsdModel, x, c, c2) -> float:
    """Cosine between parameter gradients of ``g(x, c)`` and ``g(x, c2)``.

    Values near 0 for distinct contexts mean the per-context regressions do not
    interfere with each other.
    """
    x, c, c2 = (np.asarray(v, dtype=np.float64) for v in (x, c, c2))
    g1 = _flat_grad_g(model, x, c)
    g2 = g1 if np.array_equal(c, c2) else _flat_grad_g(model, x, c2)
    n1, n2 = np.linalg.norm(g1), np.linalg.norm(g2)
    if n1 == 0 or n2 == 0:
        raise ValueError("alignment undefined: zero gradient")
    if g2 is g1:
        return 1.0
    return float(np.clip(g1 @ g2 / (n1 * n2), -1.0, 1.0))


# --------------------------------------------------------------------------
# single known query


@dataclass
class QueryRegressor:
    """How the single-query regressor is built from the prior.

    ``trainable="last"`` trains only the output-layer weights, so the regressor's tangent
    kernel is exactly the last-layer kernel.  ``"all"`` trains every layer and
    uses the full kernel for labels.
    """

    trainable: str = "last"

    def __post_init__(self):
        if self.trainable not in ("last", "all"):
            raise ConfigError(f"trainable must be 'last' or 'all', got {self.trainable!r}")

    @property
    def kind(self):
        return KernelKind.LAST_LAYER if self.trainable == "last" else KernelKind.FULL


def single_query_variance(prior_params: MlpParams, X, x_t, g_spec: QueryRegressor = None,
                          cfg: TrainConfig = None) -> float:
    """Ensemble variance at a known query from one kernel-label regression.

    The regressor starts as a copy of the prior (same tangent kernel) seen
    through its small-init view, is fit to ``K(X, x_t)``, and the result is
    ``K(x_t, x_t) - g(x_t)``.  No Gram matrix is ever inverted.
    """
    g_spec = QueryRegressor() if g_spec is None else g_spec
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    x_t = np.asarray(x_t, dtype=np.float64)
    if x_t.ndim != 1 or x_t.shape[0] != prior_params.spec.input_dim or X.shape[1] != x_t.shape[0]:
        raise ShapeError("query and training inputs must match the prior's input dimension")
    kind = g_spec.kind
    labels = cross(prior_params, X, x_t[None], kind)[:, 0]
    cfg = TrainConfig(max_steps=20_000, loss_tolerance=1e-20) if cfg is None else cfg
    if cfg.learning_rate is None:
        cfg = TrainConfig(auto_learning_rate(prior_params, X, kind), cfg.max_steps, cfg.batch_size,
                          cfg.loss_tolerance, cfg.seed)
    trained, _ = train_regression(prior_params, X, labels, cfg, small_init=True,
                                  last_layer_only=g_spec.trainable == "last")
    g_t = forward(trained, x_t) - forward(prior_params, x_t)
    prior_t = float(cross(prior_params, x_t[None], x_t[None], kind)[0, 0])
    return prior_t - g_t


# --------------------------------------------------------------------------
# serialization


def save_csd_model(model: CsdModel, path):
    header = {
        "embed_dim": model.embed_dim,
        "norm_epsilon": model.norm_epsilon,
        "provider": model.provider_tag,
        "trained": model.trained,
        "small_init": model.small_init,
        "prior_spec": model.prior.spec.to_dict(),
        "phi_spec": model.phi.spec.to_dict(),
        "psi_spec": model.psi.spec.to_dict(),
    }
    hb = json.dumps(header, sort_keys=True).encode()
    blocks = [model.prior, model.phi, model.psi]
    if model.small_init:
        blocks += [model.phi0, model.psi0]
    payload = [MODEL_MAGIC, struct.pack("<I", len(hb)), hb] + [params_to_bytes(p) for p in blocks]
    Path(path).write_bytes(b"".join(payload))


def load_csd_model(path) -> CsdModel:
    buf = Path(path).read_bytes()
    if buf[:8] != MODEL_MAGIC:
        raise ParseError("bad CSD model magic", 0)
    if len(buf) < 12:
        raise ParseError("truncated header length", 8)
    (hlen,) = struct.unpack_from("<I", buf, 8)
    try:
        header = json.loads(buf[12:12 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"unreadable header: {exc}", 12) from exc
    pos = 12 + hlen
    specs = [MlpSpec.from_dict(header[k]) for k in ("prior_spec", "phi_spec", "psi_spec")]
    if header["small_init"]:
        specs += specs[1:]
    nets = []
    for spec in specs:
        net, pos = params_from_bytes(buf, spec, pos)
        nets.append(net)
    model = CsdModel(nets[0], nets[1], nets[2], header["embed_dim"], header["norm_epsilon"])
    if header["small_init"]:
        model.phi0, model.psi0 = nets[3], nets[4]
    model.provider_tag = header["provider"]
    model.trained = header["trained"]
    return model
