"""``csd-kit``: the four reproducible workflows.

Exit codes: 0 success, 1 a check failed, 2 configuration or input error,
3 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import os
import sys
import tempfile
import time
import warnings
from pathlib import Path

import numpy as np
from scipy.stats import pearsonr, spearmanr

from . import checks
from .benchmark import idx_benchmark, run_shift_benchmark, toy_benchmark
from .config import WORKFLOWS, RunConfig, default_ini, load_config
from .csd import ReuseTrain, make_csd_model, predict_variance, train_csd
from .data import gen_toy
from .ensemble import train_ensemble, write_pgm
from .errors import ConfigError, CsdError, NumericError
from .explore import q_learning_with_bonus, write_curves_csv
from .gp import posterior
from .nn import init_mlp

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3


def _atomic(path, write):
    """Run ``write(tmp_path)`` and move the result onto ``path``."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    os.close(fd)
    try:
        write(tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def _write_rows(path, header, rows):
    def write(tmp):
        with open(tmp, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            w.writerows(rows)

    _atomic(path, write)


# --------------------------------------------------------------------------
# workflows


def cmd_verify(cfg: RunConfig, out: Path) -> int:
    v = "verify"
    fault = cfg.fault()
    runners = {
        "gp_mc": lambda: checks.gp_vs_mc(members=cfg.get_int(v, "mc_members")),
        "ensemble": lambda: checks.ensemble_convergence(cfg.get_ints(v, "ensemble_widths"),
                                                        cfg.get_int(v, "ensemble_members")),
        "single_query": lambda: checks.single_query(cfg.get_int(v, "single_query_instances")),
        "csd": lambda: checks.csd_fidelity(steps=cfg.get_int(v, "csd_steps")),
        "jitter": lambda: checks.rank_deficient_gram(ladder=fault != "no_jitter_ladder"),
        "dynamics": checks.dynamics_fidelity,
    }
    suites = cfg.get_names(v, "suites")
    unknown = [s for s in suites if s not in runners]
    if unknown or not suites:
        raise ConfigError(f"[verify] suites must be a nonempty subset of {sorted(runners)}")
    t0 = time.perf_counter()
    rows = []
    for name in suites:
        try:
            result = runners[name]()
        except CsdError as exc:
            result = [checks.failed(name, exc)]
        for c in result:
            if c.name.endswith("_runtime_s"):
                # wall time is machine dependent: reported, never written
                if not c.passed:
                    warnings.warn(f"{c.name} = {c.value:.1f} exceeds {c.threshold}", RuntimeWarning)
                continue
            rows.append(c)
    _write_rows(out / "verify.csv", ["name", "value", "threshold", "pass"], [c.row() for c in rows])
    width = max(len(c.name) for c in rows)
    for c in rows:
        line = f"{'PASS' if c.passed else 'FAIL'}  {c.name:<{width}}  {c.value:.6g} {c.op} {c.threshold:g}"
        print(f"{line}  ({c.detail})" if c.detail else line)
    elapsed = time.perf_counter() - t0
    if elapsed > cfg.get_float(v, "time_budget_s"):
        warnings.warn(f"verify took {elapsed:.0f} s, over the {cfg.get_float(v, 'time_budget_s'):.0f} s budget",
                      RuntimeWarning)
    bad = [c.name for c in rows if not c.passed]
    if bad:
        print(f"failed checks: {', '.join(bad)}", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


def _grid_rows(G, values):
    return [(repr(float(x)), repr(float(y)), repr(float(z))) for (x, y), z in zip(G, values)]


def cmd_toy2d(cfg: RunConfig, out: Path) -> int:
    ds = gen_toy("grid2d")
    X, Y, G = ds.inputs, ds.labels, ds.splits["query"]
    side = int(round(np.sqrt(G.shape[0])))
    spec = cfg.mlp_spec(2)
    prior = init_mlp(spec)
    seed = cfg.seeds[0]
    surfaces = {
        "gp": posterior(prior, X, Y, G).var,
        "ensemble": train_ensemble(spec, X, Y, cfg.get_int("toy2d", "members"), cfg.train_config(seed), G,
                                   prior_params=prior, seed=seed).var,
    }
    model = make_csd_model(prior, cfg.get_int("csd", "embed_dim"), init=cfg.csd_init(),
                           norm_epsilon=cfg.get_float("csd", "norm_epsilon"))
    train_csd(model, X, ReuseTrain(), cfg.csd_train_config(seed))
    surfaces["csd"] = predict_variance(model, G)
    for name, values in surfaces.items():
        # rows of the image run from the top (largest y) down
        img = values.reshape(side, side)[::-1]
        write_pgm(img, out / f"{name}_var.pgm")
        _write_rows(out / f"{name}_var.csv", ["x", "y", "var"], _grid_rows(G, values))
    rows = []
    for a, b in (("ensemble", "gp"), ("csd", "gp"), ("ensemble", "csd")):
        rows.append((f"{a}_vs_{b}", repr(float(pearsonr(surfaces[a], surfaces[b])[0])),
                     repr(float(spearmanr(surfaces[a], surfaces[b])[0]))))
    _write_rows(out / "correlations.csv", ["pair", "pearson", "spearman"], rows)
    for r in rows:
        print(f"{r[0]:<16} pearson {float(r[1]):.4f}  spearman {float(r[2]):.4f}")
    return EXIT_OK


def _shift_sets(cfg: RunConfig):
    kind = cfg.get_str("data", "dataset")
    if kind == "idx":
        id_path = cfg.get_str("data", "id_idx")
        ood_paths = cfg.get_names("data", "ood_idx")
        if not id_path or not ood_paths:
            raise ConfigError("[data] dataset = idx needs id_idx and ood_idx paths")
        return idx_benchmark(id_path, ood_paths, cfg.get_int("data", "subsample"), seed=0)
    return toy_benchmark(kind, 0, cfg.toy_params(), cfg.perturb_config())


def cmd_ood(cfg: RunConfig, out: Path) -> int:
    id_set, ood_sets = _shift_sets(cfg)
    bench = cfg.bench_config()
    for method in cfg.methods():
        report = run_shift_benchmark(method, id_set, ood_sets, cfg.seeds, bench)
        _atomic(out / f"ood_{method}.csv", report.to_csv)
        _atomic(out / f"ood_{method}_aggregate.csv", report.aggregate_csv)
        for row in report.aggregate():
            print(f"{method:<9} {row['ood_set']:<12} AUROC {row['auroc_mean']:.4f} +- {row['auroc_std']:.4f}")
    return EXIT_OK


def cmd_explore(cfg: RunConfig, out: Path) -> int:
    mdp = cfg.mdp()
    source, schedule, qcfg = cfg.bonus_source(), cfg.bonus_schedule(), cfg.q_config()
    curves = [q_learning_with_bonus(mdp, source, schedule, qcfg, seed) for seed in cfg.seeds]
    _atomic(out / "explore_curves.csv", lambda tmp: write_curves_csv(curves, tmp))
    rows = []
    for c in curves:
        f = c.first_success_frame
        rows.append((c.seed, "" if f is None else f, int(c.solved_within(qcfg.frames))))
    _write_rows(out / "explore_summary.csv", ["seed", "first_success_frame", "solved"], rows)
    solved = sum(r[2] for r in rows)
    print(f"{source}: goal reached within {qcfg.frames} frames in {solved}/{len(rows)} seeds")
    return EXIT_OK


COMMANDS = {"verify": cmd_verify, "toy2d": cmd_toy2d, "ood": cmd_ood, "explore": cmd_explore}


# --------------------------------------------------------------------------
# entry point


def build_parser():
    p = argparse.ArgumentParser(prog="csd-kit", description=__doc__.splitlines()[0])
    p.add_argument("workflow", choices=WORKFLOWS)
    p.add_argument("--config", help="INI file; unspecified keys take their defaults")
    p.add_argument("--seeds", help="comma-separated seeds, overriding [run] seeds")
    p.add_argument("--out", help="output directory, overriding [run] out")
    p.add_argument("--print-defaults", action="store_true", help="print the default config and exit")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.print_defaults:
        sys.stdout.write(default_ini())
        return EXIT_OK
    try:
        if args.config is None:
            raise ConfigError("--config is required")
        cfg = load_config(args.config)
        overrides = {}
        if args.seeds is not None:
            overrides["seeds"] = args.seeds
        if args.out is not None:
            overrides["out"] = args.out
        cfg.set_section("run", overrides)
        cfg.seeds  # validate early
        out = cfg.out
        out.mkdir(parents=True, exist_ok=True)
        cfg.write_resolved(out)
        return COMMANDS[args.workflow](cfg, out)
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CsdError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
