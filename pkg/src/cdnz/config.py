"""Experiment configuration: INI-style key=value sections.

Every key is validated against the schema below; unknown sections or keys
are rejected (exit code 2 at the CLI). Each run writes its fully resolved
config into the output directory as resolved.ini.
"""

import configparser
import io

import numpy as np

from .denoiser import DenoiserConfig
from .training import OptimizerSchedule


class ConfigError(ValueError):
    pass


_SCHEMA = {
    "experiment": {
        "task": str,          # none | classification | segmentation
        "sigma": float,
        "lambda": float,
        "seed": int,
        "deterministic": bool,
    },
    "denoiser": {
        "scales": int,
        "fusion": str,
        "downsample": str,
        "input_channels": int,
        "activate_after_skip": bool,
        "final_proj_init": str,
    },
    "training": {
        "batch_size": int,
        "patch_size": int,
        "lr0": float,
        "decay_every": int,
        "total_iters": int,
        "momentum": float,
        "weight_decay": float,
        "fresh_noise": bool,
        "pretrain_target": float,
        "bn_freeze_frac": float,
        "bn_recal_batches": int,
        "bn_recal_patch": int,
    },
    "data": {
        "train_manifest": str,
        "test_manifest": str,
    },
    "paths": {
        "out_dir": str,
        "denoiser_checkpoint": str,
        "head_checkpoint": str,
        "warm_start": str,
    },
}

_DEFAULTS = {
    "experiment": {
        "task": "none",
        "sigma": 25.0,
        "lambda": 0.0,
        "seed": 0,
        "deterministic": False,
    },
    "denoiser": {
        "scales": 3,
        "fusion": "concat",
        "downsample": "strided_conv",
        "input_channels": 3,
        "activate_after_skip": False,
        "final_proj_init": "zero",
    },
    "training": {
        "batch_size": 16,
        "patch_size": 48,
        "lr0": 2e-3,
        "decay_every": 8000,
        "total_iters": 20000,
        "momentum": 0.0,
        "weight_decay": 0.0,
        "fresh_noise": True,
        "pretrain_target": float("nan"),
        "bn_freeze_frac": 0.5,
        "bn_recal_batches": 50,
        "bn_recal_patch": 0,
    },
    "data": {
        "train_manifest": "",
        "test_manifest": "",
    },
    "paths": {
        "out_dir": "out",
        "denoiser_checkpoint": "",
        "head_checkpoint": "",
        "warm_start": "",
    },
}

_BOOL_TRUE = {"1", "true", "yes", "on"}
_BOOL_FALSE = {"0", "false", "no", "off"}


def _convert(section, key, raw):
    typ = _SCHEMA[section][key]
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low in _BOOL_TRUE:
                return True
            if low in _BOOL_FALSE:
                return False
            raise ValueError(raw)
        return typ(raw)
    except ValueError:
        raise ConfigError(
            f"invalid value {raw!r} for key [{section}] {key} (expected {typ.__name__})")


class ExperimentConfig:
    def __init__(self, values=None):
        self.values = {s: dict(d) for s, d in _DEFAULTS.items()}
        for section, kv in (values or {}).items():
            for key, val in kv.items():
                self.set(section, key, val)

    @classmethod
    def from_file(cls, path):
        parser = configparser.ConfigParser()
        try:
            with open(path) as f:
                parser.read_file(f)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}")
        cfg = cls()
        for section in parser.sections():
            if section not in _SCHEMA:
                raise ConfigError(f"unknown config section [{section}]")
            for key, raw in parser.items(section):
                if key not in _SCHEMA[section]:
                    raise ConfigError(f"unknown config key [{section}] {key}")
                cfg.values[section][key] = _convert(section, key, raw)
        cfg.validate()
        return cfg

    def get(self, section, key):
        return self.values[section][key]

    def set(self, section, key, value):
        if section not in _SCHEMA or key not in _SCHEMA[section]:
            raise ConfigError(f"unknown config key [{section}] {key}")
        self.values[section][key] = value

    def validate(self):
        task = self.get("experiment", "task")
        if task not in ("none", "classification", "segmentation"):
            raise ConfigError(f"invalid task {task!r}")
        if self.get("experiment", "sigma") < 0:
            raise ConfigError("sigma must be >= 0")
        if self.get("experiment", "lambda") < 0:
            raise ConfigError("lambda must be >= 0")
        if self.get("experiment", "seed") < 0:
            raise ConfigError("seed must be >= 0")
        self.denoiser_config()
        sched = self.schedule()
        try:
            sched.validate()
        except ValueError as exc:
            raise ConfigError(str(exc))
        return self

    def denoiser_config(self):
        d = self.values["denoiser"]
        try:
            return DenoiserConfig(
                scales=d["scales"], fusion=d["fusion"], downsample=d["downsample"],
                input_channels=d["input_channels"],
                activate_after_skip=d["activate_after_skip"],
                final_proj_init=d["final_proj_init"]).validate()
        except ValueError as exc:
            raise ConfigError(str(exc))

    def schedule(self):
        t = self.values["training"]
        return OptimizerSchedule(
            lr0=t["lr0"], decay_every=t["decay_every"], total_iters=t["total_iters"],
            batch_size=t["batch_size"], patch_size=t["patch_size"],
            momentum=t["momentum"], weight_decay=t["weight_decay"],
            bn_freeze_frac=t["bn_freeze_frac"], bn_recal_batches=t["bn_recal_batches"],
            bn_recal_patch=t["bn_recal_patch"])

    def pretrain_target(self):
        v = self.get("training", "pretrain_target")
        return None if np.isnan(v) else v

    def dump(self):
        parser = configparser.ConfigParser()
        for section, kv in self.values.items():
            parser[section] = {}
            for key, val in kv.items():
                if isinstance(val, float) and np.isnan(val):
                    continue
                parser[section][key] = str(val)
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def save(self, path):
        with open(path, "w") as f:
            f.write(self.dump())
