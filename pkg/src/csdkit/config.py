"""Run configuration: one INI file with every default embedded.

Sections map onto the library's settings objects.  Unknown sections or keys
are rejected, and every run writes the fully resolved file next to its
outputs, so a run can be repeated from that copy alone.
"""
from __future__ import annotations

import configparser
import io
from pathlib import Path

from .benchmark import METHODS, BenchConfig
from .csd import INIT_MODES, NORM_EPSILON, AugConfig
from .data import PerturbConfig
from .errors import ConfigError
from .explore import BONUS_SOURCES, BonusSchedule, QConfig, chain, gridworld
from .nn import MlpSpec, TrainConfig

WORKFLOWS = ("verify", "toy2d", "ood", "explore")
FAULTS = ("none", "no_jitter_ladder")

DEFAULTS = {
    "run": {
        "seeds": "0,1,2,3,4,5,6,7,8,9",
        "out": "csd-kit-out",
    },
    "mlp": {
        "hidden_widths": "1024",
        "activation": "relu",
        "ntk_param": "true",
        "bias_scale": "1.0",
        "seed": "12345",
    },
    "train": {
        "learning_rate": "auto",
        "max_steps": "20000",
        "batch_size": "full",
        "loss_tolerance": "1e-12",
    },
    "csd": {
        "embed_dim": "256",
        "init": "split",
        "norm_epsilon": repr(NORM_EPSILON),
        "learning_rate": "5.0",
        "max_steps": "5000",
        "batch_size": "full",
    },
    "aug": {
        "jitter_sigma": "1.0",
        "mask_prob": "0.0",
        "scale_prob": "0.5",
        "scale_range": "0.5,2.0",
    },
    "bonus": {
        "beta_init": "0.1",
        "beta_final": "0.01",
        "decay_frames": "10000",
    },
    "data": {
        "dataset": "gaussians",
        "params": "",
        "id_idx": "",
        "ood_idx": "",
        "subsample": "1000",
        "perturb_shift": "0.5",
        "perturb_scale": "1.5",
        "perturb_mask_prob": "0.1",
    },
    "toy2d": {
        "members": "100",
    },
    "ood": {
        "methods": "csd,csd_aug,csd_ood,ensemble,gp_exact",
        "hidden_widths": "256",
        "bias_scale": "1.0",
        "embed_dim": "256",
        "csd_learning_rate": "5.0",
        "csd_max_steps": "1000",
        "csd_batch_size": "64",
        "external_fraction": "0.5",
        "ensemble_members": "10",
        "ensemble_max_steps": "500",
        "gp_kind": "full",
    },
    "explore": {
        "mdp": "chain",
        "n_states": "40",
        "width": "8",
        "height": "8",
        "walls": "",
        "gamma": "0.99",
        "cap": "auto",
        "bonus_source": "csd",
        "frames": "8000",
        "alpha_q": "0.5",
        "epsilon": "0.01",
        "tie_break": "random",
        "retrain_frames": "500",
        "csd_steps": "1000",
        "csd_batch": "64",
        "csd_lr": "20.0",
        "hidden_widths": "64",
        "embed_dim": "64",
        "bias_scale": "0.1",
        "feature_k": "8",
        "coord_scale": "0.0",
        "sqrt_bonus": "false",
        "bonus_target": "plan",
        "reset_csd": "false",
        "stop_on_success": "false",
    },
    "verify": {
        "suites": "gp_mc,ensemble,single_query,csd,jitter",
        "inject_fault": "none",
        "mc_members": "100000",
        "ensemble_members": "100",
        "ensemble_widths": "64,256,1024",
        "single_query_instances": "10",
        "csd_steps": "5000",
        "time_budget_s": "600",
    },
}


def _ints(text):
    text = text.strip()
    return tuple(int(t) for t in text.split(",")) if text else ()


def _floats(text):
    text = text.strip()
    return tuple(float(t) for t in text.split(",")) if text else ()


def _names(text):
    return tuple(t.strip() for t in text.split(",") if t.strip())


def _kv(text):
    """``"a=1, b=2.5"`` -> ``{"a": 1, "b": 2.5}`` (ints where possible)."""
    out = {}
    for item in _names(text):
        if "=" not in item:
            raise ConfigError(f"expected key=value, got {item!r}")
        k, v = (s.strip() for s in item.split("=", 1))
        try:
            out[k] = int(v)
        except ValueError:
            out[k] = float(v)
    return out


class RunConfig:
    """Resolved configuration: defaults overlaid with a file's values."""

    def __init__(self, values=None):
        self.values = {s: dict(kv) for s, kv in DEFAULTS.items()}
        for section, kv in (values or {}).items():
            self.set_section(section, kv)

    def set_section(self, section, kv):
        if section not in DEFAULTS:
            raise ConfigError(f"unknown section [{section}]; expected one of {sorted(DEFAULTS)}")
        for key, value in kv.items():
            if key not in DEFAULTS[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            self.values[section][key] = str(value).strip()

    # typed access -------------------------------------------------------

    def _raw(self, section, key):
        return self.values[section][key]

    def _conv(self, section, key, fn):
        raw = self._raw(section, key)
        try:
            return fn(raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{section}] {key} = {raw!r}: {exc}") from exc

    def get_str(self, section, key):
        return self._raw(section, key)

    def get_int(self, section, key):
        return self._conv(section, key, int)

    def get_float(self, section, key):
        return self._conv(section, key, float)

    def get_bool(self, section, key):
        raw = self._raw(section, key).lower()
        if raw in ("1", "true", "yes", "on"):
            return True
        if raw in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"[{section}] {key} = {raw!r} is not a boolean")

    def get_ints(self, section, key):
        return self._conv(section, key, _ints)

    def get_floats(self, section, key):
        return self._conv(section, key, _floats)

    def get_names(self, section, key):
        return _names(self._raw(section, key))

    def _optional_float(self, section, key):
        raw = self._raw(section, key)
        return None if raw.lower() == "auto" else self.get_float(section, key)

    def _batch(self, section, key):
        raw = self._raw(section, key)
        return "full" if raw.lower() == "full" else self.get_int(section, key)

    # settings objects ---------------------------------------------------

    @property
    def seeds(self):
        seeds = self.get_ints("run", "seeds")
        if not seeds:
            raise ConfigError("[run] seeds must list at least one seed")
        return seeds

    @property
    def out(self):
        return Path(self.get_str("run", "out"))

    def mlp_spec(self, input_dim) -> MlpSpec:
        return MlpSpec(int(input_dim), self.get_ints("mlp", "hidden_widths"), self.get_str("mlp", "activation"),
                       self.get_bool("mlp", "ntk_param"), self.get_float("mlp", "bias_scale"),
                       self.get_int("mlp", "seed"))

    def train_config(self, seed=0) -> TrainConfig:
        return TrainConfig(self._optional_float("train", "learning_rate"), self.get_int("train", "max_steps"),
                           self._batch("train", "batch_size"), self.get_float("train", "loss_tolerance"),
                           int(seed))

    def csd_train_config(self, seed=0) -> TrainConfig:
        return TrainConfig(self.get_float("csd", "learning_rate"), self.get_int("csd", "max_steps"),
                           self._batch("csd", "batch_size"), 0.0, int(seed))

    def csd_init(self):
        init = self.get_str("csd", "init")
        if init not in INIT_MODES:
            raise ConfigError(f"[csd] init must be one of {INIT_MODES}, got {init!r}")
        return init

    def aug_config(self) -> AugConfig:
        lo_hi = self.get_floats("aug", "scale_range")
        if len(lo_hi) != 2:
            raise ConfigError("[aug] scale_range needs two values")
        return AugConfig(self.get_float("aug", "jitter_sigma"), self.get_float("aug", "mask_prob"),
                         self.get_float("aug", "scale_prob"), lo_hi)

    def bonus_schedule(self) -> BonusSchedule:
        return BonusSchedule(self.get_float("bonus", "beta_init"), self.get_float("bonus", "beta_final"),
                             self.get_int("bonus", "decay_frames"))

    def perturb_config(self) -> PerturbConfig:
        return PerturbConfig(self.get_float("data", "perturb_shift"), self.get_float("data", "perturb_scale"),
                             self.get_float("data", "perturb_mask_prob"))

    def toy_params(self):
        return self._conv("data", "params", _kv)

    def bench_config(self) -> BenchConfig:
        kind = self.get_str("ood", "gp_kind")
        if kind not in ("full", "last_layer"):
            raise ConfigError(f"[ood] gp_kind must be 'full' or 'last_layer', got {kind!r}")
        return BenchConfig(
            hidden_widths=self.get_ints("ood", "hidden_widths"),
            activation=self.get_str("mlp", "activation"),
            bias_scale=self.get_float("ood", "bias_scale"),
            embed_dim=self.get_int("ood", "embed_dim"),
            csd_train=TrainConfig(self.get_float("ood", "csd_learning_rate"), self.get_int("ood", "csd_max_steps"),
                                  self._batch("ood", "csd_batch_size")),
            aug=self.aug_config(),
            external_fraction=self.get_float("ood", "external_fraction"),
            ensemble_members=self.get_int("ood", "ensemble_members"),
            ensemble_train=TrainConfig(max_steps=self.get_int("ood", "ensemble_max_steps")),
            gp_kind=kind,
        )

    def methods(self):
        methods = self.get_names("ood", "methods")
        bad = [m for m in methods if m not in METHODS]
        if bad or not methods:
            raise ConfigError(f"[ood] methods must be a nonempty subset of {METHODS}, got {methods}")
        return methods

    def mdp(self):
        kind = self.get_str("explore", "mdp")
        cap_raw = self.get_str("explore", "cap")
        cap = None if cap_raw.lower() == "auto" else self.get_int("explore", "cap")
        gamma = self.get_float("explore", "gamma")
        if not 0.0 <= gamma < 1.0:
            raise ConfigError(f"[explore] gamma must lie in [0, 1), got {gamma}")
        if kind == "chain":
            return chain(self.get_int("explore", "n_states"), gamma, cap)
        if kind == "gridworld":
            flat = self.get_ints("explore", "walls")
            if len(flat) % 2:
                raise ConfigError("[explore] walls must list x,y pairs")
            walls = list(zip(flat[::2], flat[1::2]))
            return gridworld(self.get_int("explore", "width"), self.get_int("explore", "height"), walls,
                             gamma=gamma, cap=cap)
        raise ConfigError(f"[explore] mdp must be 'chain' or 'gridworld', got {kind!r}")

    def bonus_source(self):
        src = self.get_str("explore", "bonus_source")
        if src not in BONUS_SOURCES:
            raise ConfigError(f"[explore] bonus_source must be one of {BONUS_SOURCES}, got {src!r}")
        return src

    def q_config(self) -> QConfig:
        e = "explore"
        return QConfig(
            alpha_q=self.get_float(e, "alpha_q"), epsilon=self.get_float(e, "epsilon"),
            frames=self.get_int(e, "frames"), tie_break=self.get_str(e, "tie_break"),
            retrain_frames=self.get_int(e, "retrain_frames"), csd_steps=self.get_int(e, "csd_steps"),
            csd_batch=self.get_int(e, "csd_batch"), csd_lr=self.get_float(e, "csd_lr"),
            hidden_widths=self.get_ints(e, "hidden_widths"), embed_dim=self.get_int(e, "embed_dim"),
            bias_scale=self.get_float(e, "bias_scale"), feature_k=self.get_int(e, "feature_k"),
            coord_scale=self.get_float(e, "coord_scale"), sqrt_bonus=self.get_bool(e, "sqrt_bonus"),
            bonus_target=self.get_str(e, "bonus_target"), reset_csd=self.get_bool(e, "reset_csd"),
            stop_on_success=self.get_bool(e, "stop_on_success"),
        )

    def fault(self):
        f = self.get_str("verify", "inject_fault")
        if f not in FAULTS:
            raise ConfigError(f"[verify] inject_fault must be one of {FAULTS}, got {f!r}")
        return f

    # serialization ------------------------------------------------------

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        for section, kv in self.values.items():
            cp[section] = kv
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def write_resolved(self, directory):
        path = Path(directory) / "resolved_config.ini"
        path.write_text(self.to_ini())
        return path


def parse_config(text) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    if cp.defaults():
        raise ConfigError("keys outside a section are not allowed")
    return RunConfig({s: dict(cp[s]) for s in cp.sections()})


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def default_ini() -> str:
    return RunConfig().to_ini()
