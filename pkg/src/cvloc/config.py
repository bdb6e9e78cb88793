"""Run configuration: flat dotted keys in diff-friendly `key = value` text.

Every key has a default; unknown keys are rejected. The canonical sorted
rendering of a config hashes to the run directory name, so identical configs
always land in the same place.
"""

from __future__ import annotations

import hashlib
import os

from .errors import ConfigError
from .losses import LossConfig
from .model import ModelConfig
from .synthdata import SamplerConfig

DEFAULTS = {
    "seed": 0,
    "run.dir": "",
    "model.L": 64,
    "model.L_feat": 8,
    "model.N": 4,
    "model.C": 32,
    "model.K": 4,
    "model.ground_h": 16,
    "model.ground_w": 64,
    "model.decoder_stages": 4,
    "model.concat_ground": False,
    "loss.beta": 1e4,
    "loss.tau": 0.1,
    "loss.sigma_px": 4.0,
    "optim.lr": 1e-3,
    "optim.beta1": 0.9,
    "optim.beta2": 0.999,
    "optim.eps": 1e-8,
    "data.dir": "data/desk",
    "data.world_px": 512,
    "data.meters_per_px": 0.114,
    "data.max_range_px": 32.0,
    "data.view": "panorama",
    "data.heading_mode": "fixed",
    "data.split_mode": "same",
    "data.train": 2000,
    "data.val": 200,
    "data.test": 500,
    "data.train_semi_frac": 0.5,
    "data.val_semi_frac": 0.0,
    "data.test_semi_frac": 0.5,
    "train.model": "dense",
    "train.epochs": 12,
    "train.batch": 4,
    "eval.include_semi": False,
    "eval.rejection": "1.0,0.9,0.8,0.7,0.6,0.5,0.4,0.3,0.2,0.1",
    "eval.orient_n": 16,
    "eval.orient_samples": 200,
    "eval.cvr_sd_px": 0.0,
}

_CHOICES = {
    "data.view": {"panorama", "front"},
    "data.heading_mode": {"fixed", "random"},
    "data.split_mode": {"same", "cross"},
    "train.model": {"dense", "cvr"},
}


def _parse_value(key: str, raw: str):
    default = DEFAULTS[key]
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


class RunConfig:
    """Typed view over the flat key space."""

    def __init__(self, values: dict = None):
        self.values = dict(DEFAULTS)
        for key, val in (values or {}).items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            self.values[key] = val
        for key, allowed in _CHOICES.items():
            if self.values[key] not in allowed:
                raise ConfigError(
                    f"{key} must be one of {sorted(allowed)}, got {self.values[key]!r}"
                )

    def __getitem__(self, key):
        if key not in self.values:
            raise ConfigError(f"unknown config key {key!r}")
        return self.values[key]

    def with_overrides(self, overrides: dict) -> "RunConfig":
        merged = dict(self.values)
        for key, val in overrides.items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            merged[key] = val if not isinstance(val, str) else _parse_value(key, val)
        return RunConfig(merged)

    # -- typed sub-configs ---------------------------------------------------

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            L=self["model.L"],
            L_feat=self["model.L_feat"],
            N=self["model.N"],
            C=self["model.C"],
            K=self["model.K"],
            ground_h=self["model.ground_h"],
            ground_w=self["model.ground_w"],
            decoder_stages=self["model.decoder_stages"],
            concat_ground=self["model.concat_ground"],
            seed=self["seed"],
        ).validate()

    def loss_config(self) -> LossConfig:
        cfg = LossConfig(
            beta=self["loss.beta"],
            tau=self["loss.tau"],
            sigma_px=self["loss.sigma_px"],
        )
        cfg.validate()
        return cfg

    def sampler_config(self) -> SamplerConfig:
        return SamplerConfig(
            L=self["model.L"],
            ground_h=self["model.ground_h"],
            ground_w=self["model.ground_w"],
            max_range_px=self["data.max_range_px"],
            view=self["data.view"],
            heading_mode=self["data.heading_mode"],
        )

    def rejection_fractions(self):
        try:
            fracs = [float(x) for x in str(self["eval.rejection"]).split(",") if x.strip()]
        except ValueError as exc:
            raise ConfigError(f"bad eval.rejection list: {self['eval.rejection']!r}") from exc
        if not fracs or any(not 0 < f <= 1 for f in fracs):
            raise ConfigError("eval.rejection fractions must lie in (0, 1]")
        return fracs

    # -- text round trip -------------------------------------------------------

    def canonical_text(self) -> str:
        lines = []
        for key in sorted(self.values):
            val = self.values[key]
            if isinstance(val, bool):
                val = "true" if val else "false"
            lines.append(f"{key} = {val}")
        return "".join(line + "\n" for line in lines)

    def run_id(self) -> str:
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()[:12]

    def run_dir(self) -> str:
        explicit = self["run.dir"]
        return explicit if explicit else os.path.join("runs", self.run_id())


def parse_config_text(text: str) -> RunConfig:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        if key not in DEFAULTS:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        values[key] = _parse_value(key, val)
    return RunConfig(values)


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            return parse_config_text(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
