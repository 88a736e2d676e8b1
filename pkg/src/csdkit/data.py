"""Toy datasets, IDX ingestion, perturbations and CSV matrices."""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError, ParseError, ShapeError

# fixed layout of the 2D regression task; all points lie in [-2, 2]^2
GRID2D_TRAIN = np.array([
    [-1.5, -1.5], [-1.0, 1.2], [0.0, 0.0], [0.5, -1.0],
    [1.5, 1.5], [1.8, -0.5], [-1.8, 0.3], [0.3, 1.8],
])

IDX_TYPES = {0x08: ("u1", 1), 0x09: ("i1", 1), 0x0B: (">i2", 2), 0x0C: (">i4", 4),
             0x0D: (">f4", 4), 0x0E: (">f8", 8)}
IDX_MAX_ELEMENTS = 1 << 31


@dataclass
class LabeledDataset:
    """Inputs plus the per-coordinate statistics they were normalized with.

    ``splits`` holds further matrices (query grid, held-out test points, OOD
    sets, unlabeled contexts) in the same normalized coordinates.
    """

    inputs: np.ndarray
    name: str = "dataset"
    mean: Optional[np.ndarray] = None
    std: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None
    splits: dict = field(default_factory=dict)

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=np.float64))
        n = self.inputs.shape[1]
        self.mean = np.zeros(n) if self.mean is None else np.asarray(self.mean, dtype=np.float64)
        self.std = np.ones(n) if self.std is None else np.asarray(self.std, dtype=np.float64)

    @property
    def dim(self):
        return self.inputs.shape[1]

    def __len__(self):
        return self.inputs.shape[0]


def normalize(train, *others):
    """Standardize with ``train`` statistics; returns ``(mean, std, train_n, *others_n)``."""
    mean = train.mean(axis=0)
    std = train.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return (mean, std, (train - mean) / std) + tuple((o - mean) / std for o in others)


def grid2d_queries(size=41, extent=4.0):
    g = np.linspace(-extent, extent, int(size))
    xx, yy = np.meshgrid(g, g)
    return np.column_stack([xx.ravel(), yy.ravel()])


def _grid2d(p, rng):
    X = GRID2D_TRAIN.copy()
    Y = np.sin(X[:, 0]) * np.cos(X[:, 1])
    Q = grid2d_queries(p.pop("grid_size", 41), p.pop("extent", 4.0))
    return LabeledDataset(X, "grid2d", labels=Y, splits={"query": Q})


def _gaussians(p, rng):
    dim = int(p.pop("dim", 8))
    n_train = int(p.pop("n_train", 500))
    n_test = int(p.pop("n_test", 500))
    n_ood = int(p.pop("n_ood", 500))
    n_context = int(p.pop("n_context", 200))
    sep = float(p.pop("separation", 3.0))
    shift = float(p.pop("ood_shift", 6.0))
    if dim < 1 or min(n_train, n_test, n_ood) < 1 or n_context < 0:
        raise ConfigError("gaussians needs dim >= 1 and positive split sizes")
    centers = np.zeros((2, dim))
    centers[0, 0], centers[1, 0] = -sep / 2, sep / 2
    ood_center = np.zeros(dim)
    ood_center[min(1, dim - 1)] += shift

    def id_draw(n):
        lab = rng.integers(0, 2, n)
        return centers[lab] + rng.standard_normal((n, dim)), lab.astype(np.float64)

    Xtr, ytr = id_draw(n_train)
    Xte, _ = id_draw(n_test)
    ood = ood_center + rng.standard_normal((n_ood + n_context, dim))
    mean, std, Xtr, Xte, ood = normalize(Xtr, Xte, ood)
    return LabeledDataset(Xtr, "gaussians", mean, std, ytr, splits={
        "test": Xte, "ood_shift": ood[:n_ood], "ood_shift_context": ood[n_ood:]})


def _two_moons(p, rng):
    n_train = int(p.pop("n_train", 500))
    n_test = int(p.pop("n_test", 500))
    n_ood = int(p.pop("n_ood", 500))
    n_context = int(p.pop("n_context", 200))
    noise = float(p.pop("noise", 0.1))
    shift = float(p.pop("ood_shift", 3.0))
    if min(n_train, n_test, n_ood) < 1 or n_context < 0 or noise < 0:
        raise ConfigError("two_moons needs positive split sizes and nonnegative noise")

    def moons(n):
        lab = rng.integers(0, 2, n)
        t = rng.uniform(0, np.pi, n)
        x = np.where(lab == 0, np.cos(t), 1 - np.cos(t))
        y = np.where(lab == 0, np.sin(t), 0.5 - np.sin(t))
        return np.column_stack([x, y]) + noise * rng.standard_normal((n, 2)), lab.astype(np.float64)

    Xtr, ytr = moons(n_train)
    Xte, _ = moons(n_test)
    ood, _ = moons(n_ood + n_context)
    ood = ood + np.array([0.0, shift])
    mean, std, Xtr, Xte, ood = normalize(Xtr, Xte, ood)
    return LabeledDataset(Xtr, "two_moons", mean, std, ytr, splits={
        "test": Xte, "ood_shift": ood[:n_ood], "ood_shift_context": ood[n_ood:]})


TOY_KINDS = {"grid2d": _grid2d, "gaussians": _gaussians, "two_moons": _two_moons}


def gen_toy(kind, params=None, seed=0) -> LabeledDataset:
    """Synthetic dataset, deterministic per ``seed``.

    * ``grid2d``: the 8 fixed points of ``GRID2D_TRAIN`` with labels
      ``sin(x1) cos(x2)`` and a ``query`` split on a 41x41 grid over [-4, 4]^2.
      Not normalized.
    * ``gaussians``: two unit-variance ID components ``separation`` apart
      along the first axis, an OOD component shifted by ``ood_shift`` along
      the second; ``ood_shift=0`` makes OOD indistinguishable from the
      component-mixture center.
    * ``two_moons``: interleaved half circles; OOD moons shifted upward.

    The latter two are standardized with the training split's statistics
    and carry ``test``, ``ood_shift`` and ``ood_shift_context`` splits.
    """
    if kind not in TOY_KINDS:
        raise ConfigError(f"unknown toy dataset {kind!r}; choose from {sorted(TOY_KINDS)}")
    p = dict(params or {})
    ds = TOY_KINDS[kind](p, np.random.default_rng(seed))
    if p:
        raise ConfigError(f"unknown {kind} parameters: {sorted(p)}")
    return ds


@dataclass(frozen=True)
class PerturbConfig:
    """Global shift and scale followed by random coordinate zero-masking."""

    shift: float = 0.0
    scale: float = 1.0
    mask_prob: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.mask_prob <= 1.0:
            raise ConfigError(f"mask_prob must lie in [0, 1], got {self.mask_prob}")
        if not np.isfinite(self.shift) or not np.isfinite(self.scale):
            raise ConfigError("shift and scale must be finite")


def perturb(dataset: LabeledDataset, cfg: PerturbConfig, seed=0) -> LabeledDataset:
    rng = np.random.default_rng(seed)
    X = dataset.inputs * cfg.scale + cfg.shift
    if cfg.mask_prob > 0:
        X = np.where(rng.random(X.shape) < cfg.mask_prob, 0.0, X)
    return replace(dataset, inputs=X, name=f"{dataset.name}_perturbed", splits={})


# --------------------------------------------------------------------------
# IDX files


def parse_idx(buf):
    """Decode an IDX tensor; returns an ndarray of its native dtype and shape."""
    if len(buf) < 4:
        raise ParseError("truncated header", 0)
    zero, code, ndim = struct.unpack_from(">HBB", buf, 0)
    if zero != 0 or code not in IDX_TYPES or ndim == 0:
        raise ParseError(f"bad magic 0x{int.from_bytes(buf[:4], 'big'):08x}", 0)
    if len(buf) < 4 + 4 * ndim:
        raise ParseError("truncated dimension list", 4)
    dims = struct.unpack_from(f">{ndim}I", buf, 4)
    count = 1
    for d in dims:
        count *= d
        if count > IDX_MAX_ELEMENTS:
            raise ParseError(f"dimensions {dims} overflow the element limit", 4)
    dtype, size = IDX_TYPES[code]
    start = 4 + 4 * ndim
    if len(buf) < start + count * size:
        raise ParseError(f"truncated payload: need {count * size} bytes, have {len(buf) - start}", start)
    if len(buf) > start + count * size:
        raise ParseError("trailing bytes after payload", start + count * size)
    return np.frombuffer(buf, dtype=dtype, count=count, offset=start).reshape(dims)


def load_idx(path, subsample=None, seed=0, name=None) -> LabeledDataset:
    """Read an IDX image file as rows scaled to [0, 1] (``u8`` divided by 255).

    Each leading-axis entry is flattened row-major.  ``subsample`` keeps that
    many rows, chosen without replacement by ``seed``, in file order.
    """
    arr = parse_idx(Path(path).read_bytes())
    X = arr.reshape(arr.shape[0], -1).astype(np.float64)
    if arr.dtype == np.uint8:
        X /= 255.0
    if subsample is not None and subsample < X.shape[0]:
        keep = np.sort(np.random.default_rng(seed).choice(X.shape[0], int(subsample), replace=False))
        X = X[keep]
    return LabeledDataset(X, name or Path(path).stem)


def write_idx(path, array):
    """Write an array as IDX; uint8 arrays keep the image-file magic ``0x00000803`` for rank 3."""
    array = np.asarray(array)
    codes = {np.dtype(np.uint8): 0x08, np.dtype(np.int8): 0x09, np.dtype(np.int16): 0x0B,
             np.dtype(np.int32): 0x0C, np.dtype(np.float32): 0x0D, np.dtype(np.float64): 0x0E}
    if array.dtype not in codes or array.ndim == 0:
        raise ShapeError(f"cannot store dtype {array.dtype} with rank {array.ndim} as IDX")
    code = codes[array.dtype]
    dtype = IDX_TYPES[code][0]
    header = struct.pack(">HBB", 0, code, array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + np.ascontiguousarray(array, dtype=dtype).tobytes())


# --------------------------------------------------------------------------
# CSV matrices


def write_csv_matrix(path, M):
    M = np.atleast_2d(np.asarray(M, dtype=np.float64))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"dim{j}" for j in range(M.shape[1])])
        for row in M:
            w.writerow([repr(float(v)) for v in row])


def read_csv_matrix(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ShapeError(f"{path} is empty")
    header = rows[0]
    if header != [f"dim{j}" for j in range(len(header))]:
        raise ShapeError(f"{path}: header must be dim0,dim1,...")
    try:
        data = np.array([[float(v) for v in r] for r in rows[1:]], dtype=np.float64)
    except ValueError as exc:
        raise ShapeError(f"{path}: {exc}") from exc
    if data.size and data.shape[1] != len(header):
        raise ShapeError(f"{path}: rows do not match header width {len(header)}")
    return data.reshape(-1, len(header))
