"""Distribution-shift detection benchmark.

Per seed a method is fit to the ID training inputs and scores held-out ID
points and each OOD set by predicted variance; AUROC and both AUPR variants
are then aggregated over seeds.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .csd import AugConfig, Augment, External, ReuseTrain, make_csd_model, predict_variance, train_csd
from .data import LabeledDataset, PerturbConfig, gen_toy, load_idx, normalize, perturb
from .ensemble import train_ensemble
from .errors import ConfigError, CsdError
from .gp import posterior
from .kernel import KernelKind
from .metrics import detection_report
from .nn import MlpSpec, TrainConfig, init_mlp

METHODS = ("csd", "csd_aug", "csd_ood", "ensemble", "gp_exact")
REPORT_FIELDS = ("method", "id_set", "ood_set", "seed", "auroc", "aupr_in", "aupr_out")


@dataclass
class BenchConfig:
    hidden_widths: tuple = (256,)
    activation: str = "relu"
    bias_scale: float = 1.0
    embed_dim: int = 256
    csd_train: TrainConfig = field(
        default_factory=lambda: TrainConfig(learning_rate=5.0, max_steps=1000, batch_size=64))
    aug: AugConfig = field(default_factory=lambda: AugConfig(jitter_sigma=1.0, scale_prob=0.5,
                                                             scale_range=(0.5, 2.0)))
    # share of each context batch drawn from the OOD domain for csd_ood
    external_fraction: float = 0.5
    ensemble_members: int = 10
    ensemble_train: TrainConfig = field(default_factory=lambda: TrainConfig(max_steps=500))
    gp_kind: str = "full"


@dataclass
class ShiftReport:
    rows: list = field(default_factory=list)

    def add(self, **row):
        self.rows.append(row)

    def __len__(self):
        return len(self.rows)

    def values(self, method=None, ood_set=None, metric="auroc"):
        return np.array([r[metric] for r in self.rows
                         if (method is None or r["method"] == method)
                         and (ood_set is None or r["ood_set"] == ood_set)])

    def seed_means(self, method, metric="auroc"):
        """Per-seed metric averaged over OOD sets, in seed order."""
        seeds = sorted({r["seed"] for r in self.rows if r["method"] == method})
        return np.array([np.mean([r[metric] for r in self.rows
                                  if r["method"] == method and r["seed"] == s]) for s in seeds])

    def aggregate(self):
        """Mean and std (divisor n-1, 0 for one seed) per (method, id_set, ood_set)."""
        keys = []
        for r in self.rows:
            k = (r["method"], r["id_set"], r["ood_set"])
            if k not in keys:
                keys.append(k)
        out = []
        for method, id_set, ood_set in keys:
            sel = [r for r in self.rows
                   if (r["method"], r["id_set"], r["ood_set"]) == (method, id_set, ood_set)]
            row = {"method": method, "id_set": id_set, "ood_set": ood_set, "n_seeds": len(sel)}
            for m in ("auroc", "aupr_in", "aupr_out"):
                v = np.array([r[m] for r in sel])
                row[f"{m}_mean"] = float(v.mean())
                row[f"{m}_std"] = float(v.std(ddof=1)) if v.size > 1 else 0.0
            out.append(row)
        return out

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(REPORT_FIELDS)
            for r in self.rows:
                w.writerow([r[k] if isinstance(r[k], (str, int)) else repr(float(r[k]))
                            for k in REPORT_FIELDS])

    def aggregate_csv(self, path):
        agg = self.aggregate()
        cols = ["method", "id_set", "ood_set", "n_seeds"]
        cols += [f"{m}_{s}" for m in ("auroc", "aupr_in", "aupr_out") for s in ("mean", "std")]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for r in agg:
                w.writerow([r[c] if isinstance(r[c], (str, int)) else repr(r[c]) for c in cols])


def toy_benchmark(kind="gaussians", seed=0, params=None, perturb_cfg=None):
    """ID set plus two OOD sets (shifted component, perturbed ID) with contexts.

    ``kind`` is ``"gaussians"`` or ``"two_moons"``.  Each OOD dataset carries a
    disjoint unlabeled ``context`` split.
    """
    if kind not in ("gaussians", "two_moons"):
        raise ConfigError(f"no shift benchmark for toy dataset {kind!r}")
    ds = gen_toy(kind, params, seed)
    id_set = LabeledDataset(ds.inputs, kind, ds.mean, ds.std, ds.labels,
                            splits={"test": ds.splits["test"]})
    perturb_cfg = PerturbConfig(shift=0.5, scale=1.5, mask_prob=0.1) if perturb_cfg is None else perturb_cfg
    test = LabeledDataset(ds.splits["test"], kind)
    shifted = LabeledDataset(ds.splits["ood_shift"], "shifted",
                             splits={"context": ds.splits["ood_shift_context"]})
    pert = perturb(test, perturb_cfg, seed + 1)
    pert_ctx = perturb(LabeledDataset(ds.inputs, kind), perturb_cfg, seed + 2)
    pert.name = "perturbed"
    pert.splits = {"context": pert_ctx.inputs}
    return id_set, {"shifted": shifted, "perturbed": pert}


def gaussians_benchmark(seed=0, params=None, perturb_cfg=None):
    return toy_benchmark("gaussians", seed, params, perturb_cfg)


def idx_benchmark(id_path, ood_paths, subsample=1000, seed=0, test_fraction=0.5,
                  context_fraction=0.25):
    """Shift benchmark from IDX image files.

    The ID file is split into training and held-out rows; each OOD file into
    evaluation rows and a disjoint unlabeled ``context`` split.  Every row is
    standardized with the ID training statistics.
    """
    id_ds = load_idx(id_path, subsample, seed)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(id_ds))
    n_test = int(round(test_fraction * len(id_ds)))
    if n_test < 1 or n_test >= len(id_ds):
        raise ConfigError("ID file too small to split into training and test rows")
    train_raw, test_raw = id_ds.inputs[order[n_test:]], id_ds.inputs[order[:n_test]]
    oods_raw = {}
    for k, path in enumerate(ood_paths):
        ds = load_idx(path, subsample, seed + k + 1)
        if ds.dim != id_ds.dim:
            raise ConfigError(f"{path}: rows have {ds.dim} values, ID rows have {id_ds.dim}")
        oods_raw[ds.name] = ds.inputs
    mean, std, train, test, *oods = normalize(train_raw, test_raw, *oods_raw.values())
    id_set = LabeledDataset(train, id_ds.name, mean, std, splits={"test": test})
    ood_sets = {}
    for name, X in zip(oods_raw, oods):
        n_ctx = int(round(context_fraction * X.shape[0]))
        if X.shape[0] - n_ctx < 1:
            raise ConfigError(f"OOD file {name} too small")
        ood_sets[name] = LabeledDataset(X[n_ctx:], name, splits={"context": X[:n_ctx]})
    return id_set, ood_sets


class _MixedContext:
    """Index-aligned training contexts, with a fixed share replaced by external ones."""

    tag = "external"

    def __init__(self, data, fraction):
        self.data = np.atleast_2d(np.asarray(data, dtype=np.float64))
        self.fraction = float(fraction)

    def sample(self, X, idx, rng):
        C = X[idx].copy()
        k = int(round(self.fraction * len(idx)))
        if k:
            C[:k] = External(self.data).sample(X, idx[:k], rng)
        return C


def _score_fn(method, id_set, ood_sets, seed, cfg: BenchConfig):
    X = id_set.inputs
    spec = MlpSpec(X.shape[1], tuple(cfg.hidden_widths), cfg.activation, bias_scale=cfg.bias_scale,
                   seed=int(seed))
    prior = init_mlp(spec)
    if method in ("csd", "csd_aug", "csd_ood"):
        if method == "csd":
            provider = ReuseTrain()
        elif method == "csd_aug":
            provider = Augment(cfg.aug)
        else:
            ctx = [o.splits.get("context") for o in ood_sets.values()]
            if any(c is None for c in ctx):
                raise ConfigError("csd_ood needs a 'context' split on every OOD set")
            provider = _MixedContext(np.vstack(ctx), cfg.external_fraction)
        model = make_csd_model(prior, cfg.embed_dim, seed=int(seed))
        tc = cfg.csd_train
        train_csd(model, X, provider, TrainConfig(tc.learning_rate, tc.max_steps, tc.batch_size,
                                                  tc.loss_tolerance, int(seed)))
        return lambda Z: predict_variance(model, Z)
    if method == "gp_exact":
        return lambda Z: posterior(prior, X, np.zeros(X.shape[0]), Z, KernelKind(cfg.gp_kind)).var
    if method == "ensemble":
        evals = [id_set.splits["test"]] + [o.inputs for o in ood_sets.values()]
        Q = np.vstack(evals)
        Y = id_set.labels if id_set.labels is not None else np.zeros(X.shape[0])
        stats = train_ensemble(spec, X, Y, cfg.ensemble_members, cfg.ensemble_train, Q,
                               prior_params=prior, seed=int(seed))
        table = {}
        start = 0
        for Z in evals:
            table[id(Z)] = stats.var[start:start + Z.shape[0]]
            start += Z.shape[0]
        return lambda Z: table[id(Z)]
    raise ConfigError(f"unknown method {method!r}; choose from {METHODS}")


def run_shift_benchmark(method, id_set: LabeledDataset, ood_sets: dict, seeds,
                        cfg: Optional[BenchConfig] = None) -> ShiftReport:
    """Fit ``method`` once per seed and score held-out ID against each OOD set."""
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; choose from {METHODS}")
    if "test" not in id_set.splits:
        raise ConfigError("ID dataset needs a held-out 'test' split")
    cfg = BenchConfig() if cfg is None else cfg
    report = ShiftReport()
    for seed in seeds:
        try:
            score = _score_fn(method, id_set, ood_sets, seed, cfg)
            s_id = score(id_set.splits["test"])
            for name, ood in ood_sets.items():
                report.add(method=method, id_set=id_set.name, ood_set=name, seed=int(seed),
                           **detection_report(s_id, score(ood.inputs)))
        except CsdError as exc:
            raise type(exc)(f"{method} seed {seed}: {exc}") from exc
    return report
