"""Empirical neural tangent kernels and PSD linear algebra.

The full kernel is assembled per parameter block without materializing the
Jacobian: for layer ``l`` with per-example deltas ``D`` and inputs ``Z``,

    weights: scale_l^2 * (D_a D_b^T) * (Z_a Z_b^T)
    biases:  bias_scale^2 * (D_a D_b^T)

The last-layer kernel keeps only the output-layer weight block, which reduces
to an inner product of scaled penultimate activations.
"""
from __future__ import annotations

import csv
import enum
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import ShapeError, SingularKernelError
from .nn import _as_batch, forward_cache, layer_scales, per_example_factors

DEFAULT_JITTER = 1e-10
MAX_JITTER = 1e-4
# A pivot this many times below the starting jitter marks numerical rank deficiency.
PIVOT_FACTOR = 10.0


class KernelKind(str, enum.Enum):
    FULL = "full"
    LAST_LAYER = "last_layer"


@dataclass
class KernelMatrix:
    values: np.ndarray
    kind: KernelKind = KernelKind.FULL
    jitter_used: float = 0.0
    source_seed: int = 0

    @property
    def n(self):
        return self.values.shape[0]


def last_layer_features(params, X):
    """Penultimate activations times the output layer's NTK scale."""
    X, _ = _as_batch(params, X)
    zs, _, _ = forward_cache(params, X)
    return zs[-1] * layer_scales(params.spec)[-1]


def layer_blocks(params, A, B):
    """Per-parameter-block kernel contributions as ``[(name, |A| x |B| matrix), ...]``.

    Names are ``W{l}`` and ``b{l}``; the sum over all blocks is the full NTK.
    """
    A, _ = _as_batch(params, A)
    B, _ = _as_batch(params, B)
    scales = layer_scales(params.spec)
    beta2 = params.spec.bias_scale ** 2
    fa = per_example_factors(params, A)
    fb = fa if B is A else per_example_factors(params, B)
    out = []
    for l, ((da, za), (db, zb)) in enumerate(zip(fa, fb)):
        dd = da @ db.T
        out.append((f"W{l}", scales[l] ** 2 * dd * (za @ zb.T)))
        out.append((f"b{l}", beta2 * dd))
    return out


def cross(params, A, B, kind=KernelKind.FULL):
    """Kernel matrix between point sets ``A`` and ``B``."""
    kind = KernelKind(kind)
    if kind is KernelKind.LAST_LAYER:
        fa = last_layer_features(params, A)
        fb = fa if B is A else last_layer_features(params, B)
        return fa @ fb.T
    blocks = layer_blocks(params, A, B)
    total = blocks[0][1].copy()
    for _, m in blocks[1:]:
        total += m
    return total


def gram(params, X, kind=KernelKind.FULL) -> KernelMatrix:
    M = cross(params, X, X, kind)
    return KernelMatrix(0.5 * (M + M.T), KernelKind(kind), 0.0, params.spec.seed)


def ntk(params, x, x2, kind=KernelKind.FULL) -> float:
    x = np.asarray(x, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    if x.ndim != 1 or x2.ndim != 1:
        raise ShapeError("ntk takes two single input vectors")
    return float(cross(params, x[None], x2[None], kind)[0, 0])


def cholesky_psd(K, jitter_start=DEFAULT_JITTER, jitter_max=MAX_JITTER, ladder=True):
    """Lower Cholesky factor of ``K + lam * mean(diag K) * I``.

    ``lam`` starts at ``jitter_start`` and grows tenfold (up to ``jitter_max``)
    whenever the factorization fails or a pivot drops below
    ``PIVOT_FACTOR * jitter_start * mean(diag K)``.  Returns ``(L, lam)``.
    """
    values = K.values if isinstance(K, KernelMatrix) else np.asarray(K, dtype=np.float64)
    if values.ndim != 2 or values.shape[0] != values.shape[1]:
        raise ShapeError(f"kernel must be square, got {values.shape}")
    scale = float(np.mean(np.diag(values)))
    if not np.isfinite(scale) or scale <= 0:
        raise SingularKernelError("kernel diagonal is not positive")
    floor = PIVOT_FACTOR * jitter_start * scale
    lam = jitter_start
    eye = np.eye(values.shape[0])
    while True:
        try:
            L = scipy.linalg.cholesky(values + lam * scale * eye, lower=True, check_finite=True)
            if np.min(np.diag(L)) ** 2 >= floor:
                break
        except (scipy.linalg.LinAlgError, ValueError):
            pass
        lam *= 10.0
        if not ladder or lam > jitter_max * (1 + 1e-9):
            raise SingularKernelError(
                f"kernel of size {values.shape[0]} not factorizable up to relative jitter "
                f"{lam / 10.0:.1e}"
            )
    if isinstance(K, KernelMatrix):
        K.jitter_used = lam
    return L, lam


def solve_psd(K, B, jitter_start=DEFAULT_JITTER, jitter_max=MAX_JITTER, ladder=True):
    """Solve ``(K + lam I) X = B`` by Cholesky with the escalating jitter ladder.

    The relative jitter finally used is stored in ``K.jitter_used`` when ``K``
    is a :class:`KernelMatrix`.
    """
    B = np.asarray(B, dtype=np.float64)
    n = K.n if isinstance(K, KernelMatrix) else np.shape(K)[0]
    if B.shape[0] != n:
        raise ShapeError(f"right-hand side has {B.shape[0]} rows, kernel has {n}")
    L, _ = cholesky_psd(K, jitter_start, jitter_max, ladder)
    return scipy.linalg.cho_solve((L, True), B)


def write_kernel_csv(K, path):
    values = K.values if isinstance(K, KernelMatrix) else np.asarray(K)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["i", "j", "value"])
        for i in range(values.shape[0]):
            for j in range(values.shape[1]):
                w.writerow([i, j, repr(float(values[i, j]))])
