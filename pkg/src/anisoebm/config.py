"""Plain key=value run configuration with [section] headers.

Deliberately dependency-free and diffable: every merged setting is one
``section.key=value`` line, the manifest hashes exactly those lines, and
unknown keys are rejected before any computation starts.
"""
from __future__ import annotations

import hashlib
import platform
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .samplers import SamplerConfig, SamplerKind, StepsizeMode, StepsizeRefresh
from .trainer import InitPolicy, Optimizer, TrainConfig


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _parse_float_list(raw: str):
    return tuple(float(v) for v in raw.split(",") if v.strip())


def _parse_int_list(raw: str):
    return tuple(int(v) for v in raw.split(",") if v.strip())


def _parse_rows(raw: str):
    return tuple(tuple(float(v) for v in row.split(","))
                 for row in raw.split(";") if row.strip())


# (section, key) -> parser; identity for strings.
_SCHEMA = {
    ("run", "seed"): int,
    ("run", "out"): str,
    ("run", "quiet"): _parse_bool,
    ("data", "kind"): str,
    ("data", "n"): int,
    ("data", "path"): str,
    ("data", "radii"): _parse_float_list,
    ("data", "width"): float,
    ("data", "means"): _parse_rows,
    ("data", "sigma"): float,
    ("data", "weights"): _parse_float_list,
    ("train", "recipe"): str,
    ("train", "T"): int,
    ("train", "M"): int,
    ("train", "n"): int,
    ("train", "eta"): _parse_float_list,
    ("train", "optimizer"): str,
    ("train", "adam_beta1"): float,
    ("train", "adam_beta2"): float,
    ("train", "adam_eps"): float,
    ("train", "init_policy"): str,
    ("train", "sigma0"): float,
    ("train", "checkpoint_every"): int,
    ("train", "data"): str,
    ("train", "init_params"): str,
    ("train", "hidden"): _parse_int_list,
    ("train", "leak"): float,
    ("sampler", "kind"): str,
    ("sampler", "th"): float,
    ("sampler", "eps"): float,
    ("sampler", "K"): int,
    ("sampler", "gamma"): float,
    ("sampler", "refresh"): str,
    ("sampler", "mode"): str,
    ("sampler", "mala_anisotropic"): _parse_bool,
    ("sampler", "hmc_leapfrog"): int,
    ("sampler", "hmc_step"): float,
    ("sampler", "rwmh_sigma"): float,
    ("diagnose", "target"): str,
    ("diagnose", "beta"): float,
    ("diagnose", "grid_radius"): float,
    ("diagnose", "small_set_radius"): float,
    ("diagnose", "mc_samples"): int,
    ("diagnose", "k_max"): int,
    ("diagnose", "bins"): int,
    ("compare", "samplers"): str,
}


def _enum_by_value(enum_cls, raw: str, what: str):
    for member in enum_cls:
        if member.value == raw:
            return member
    choices = ", ".join(m.value for m in enum_cls)
    raise ConfigError(f"{what} must be one of {choices}, got {raw!r}")


@dataclass
class RunConfig:
    """Merged settings from a config file plus flag overrides."""

    raw: dict = field(default_factory=dict)
    values: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path=None, overrides: dict | None = None) -> "RunConfig":
        cfg = cls()
        if path is not None:
            cfg._merge(_read_config_file(path))
        if overrides:
            cfg._merge(dict(overrides))
        cfg._validate()
        return cfg

    def _merge(self, entries: dict):
        for dotted, raw_value in entries.items():
            if raw_value is None:
                continue
            self.raw[dotted] = str(raw_value)

    def _validate(self):
        self.values = {}
        for dotted, raw_value in self.raw.items():
            if "." not in dotted:
                raise ConfigError(f"key {dotted!r} missing a section prefix")
            section, key = dotted.split(".", 1)
            parser = _SCHEMA.get((section, key))
            if parser is None:
                raise ConfigError(f"unknown config key {dotted!r}")
            try:
                self.values[dotted] = parser(raw_value)
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"bad value for {dotted}: {exc}") from exc

    def get(self, dotted: str, default=None):
        return self.values.get(dotted, default)

    def require(self, dotted: str):
        if dotted not in self.values:
            raise ConfigError(f"missing required config key {dotted!r}")
        return self.values[dotted]

    def canonical_text(self) -> str:
        lines = [f"{k}={self.raw[k]}" for k in sorted(self.raw)]
        return "\n".join(lines) + ("\n" if lines else "")

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_text().encode("utf-8")).hexdigest()

    # -- typed views ------------------------------------------------------

    def sampler_config(self, defaults: SamplerConfig | None = None) -> SamplerConfig:
        base = defaults if defaults is not None else SamplerConfig()
        kind = self.get("sampler.kind")
        cfg = SamplerConfig(
            kind=_enum_by_value(SamplerKind, kind, "sampler.kind")
            if kind is not None else base.kind,
            th=self.get("sampler.th", base.th),
            eps=self.get("sampler.eps", base.eps),
            K=self.get("sampler.K", base.K),
            gamma=self.get("sampler.gamma", base.gamma),
            stepsize_refresh=_enum_by_value(
                StepsizeRefresh, self.get("sampler.refresh"), "sampler.refresh")
            if self.get("sampler.refresh") is not None else base.stepsize_refresh,
            stepsize_mode=_enum_by_value(
                StepsizeMode, self.get("sampler.mode"), "sampler.mode")
            if self.get("sampler.mode") is not None else base.stepsize_mode,
            mala_anisotropic=self.get("sampler.mala_anisotropic",
                                      base.mala_anisotropic),
            hmc_leapfrog=self.get("sampler.hmc_leapfrog", base.hmc_leapfrog),
            hmc_step=self.get("sampler.hmc_step", base.hmc_step),
            rwmh_sigma=self.get("sampler.rwmh_sigma", base.rwmh_sigma),
        )
        return cfg.validate()

    def train_config(self, defaults: TrainConfig | None = None) -> TrainConfig:
        base = defaults if defaults is not None else TrainConfig()
        eta = self.get("train.eta")
        if eta is not None and len(eta) == 1:
            eta = eta[0]
        cfg = TrainConfig(
            T=self.get("train.T", base.T),
            M=self.get("train.M", base.M),
            n=self.get("train.n", base.n),
            eta=eta if eta is not None else base.eta,
            optimizer=_enum_by_value(Optimizer, self.get("train.optimizer"),
                                     "train.optimizer")
            if self.get("train.optimizer") is not None else base.optimizer,
            adam_beta1=self.get("train.adam_beta1", base.adam_beta1),
            adam_beta2=self.get("train.adam_beta2", base.adam_beta2),
            adam_eps=self.get("train.adam_eps", base.adam_eps),
            init_policy=_enum_by_value(InitPolicy, self.get("train.init_policy"),
                                       "train.init_policy")
            if self.get("train.init_policy") is not None else base.init_policy,
            sigma0=self.get("train.sigma0", base.sigma0),
            checkpoint_every=self.get("train.checkpoint_every",
                                      base.checkpoint_every),
            seed=self.get("run.seed", base.seed),
        )
        return cfg.validate()


def _read_config_file(path) -> dict:
    entries = {}
    section = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if line.startswith("[") and line.endswith("]"):
                section = line[1:-1].strip()
                if not section:
                    raise ConfigError(f"line {lineno}: empty section name")
                continue
            if "=" not in line:
                raise ConfigError(
                    f"line {lineno}: expected key=value, got {line!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if section is None:
                raise ConfigError(
                    f"line {lineno}: key {key!r} appears before any [section]")
            entries[f"{section}.{key}"] = value
    return entries


def manifest_text(cfg: RunConfig, seed: int) -> str:
    from . import __version__
    lines = [
        f"config_hash={cfg.config_hash()}",
        f"seed={seed}",
        f"anisoebm_version={__version__}",
        f"numpy_version={np.__version__}",
        f"python_version={platform.python_version()}",
    ]
    return "\n".join(lines) + "\n"
