"""Strict INI configuration for experiment runs.

Every section has a fixed key set; an unknown key or section fails with its
location.  The config hash is the sha256 of the canonical (sorted, typed)
form, so formatting and comments do not change it.
"""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .kernel import KernelSpec


class ConfigError(ValueError):
    """Invalid configuration, with the offending location in the message."""


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.replace(",", " ").split()]


def _int(text: str) -> int:
    return int(float(text)) if "e" in text.lower() else int(text)


# key -> (parser, default); a default of None marks a required key
_SCHEMA = {
    "kernel": {
        "gamma": (float, None),
        "slow_var": (str, "constant"),
        "kappa": (float, 0.0),
        "x_max": (_int, 2**20),
        "tail_tol": (float, 1e-8),
    },
    "model": {
        "t_max": (float, 1e6),
        "step": (float, 0.05),
        "beta_grid": (_floats, []),
        "beta_rel": (_floats, []),
    },
    "disorder": {
        "rho": (_floats, [0.5]),
        "seed": (_int, 0),
        "samples": (_int, 100),
        "T": (_floats, [30.0]),
    },
    "experiment": {
        "name": (str, None),
        "regime": (str, "sub_two_thirds"),
        "workers": (_int, 1),
        "method": (str, "volterra"),
        "eta": (float, 0.5),
        "delta": (float, 0.0),
        "epsilon": (float, 0.2),
        "R": (float, 5.0),
        "theta": (float, 0.0),
        "n_blocks": (_int, 4),
        "mc_budget": (_int, 20),
        "max_seconds": (float, 0.0),
        "n_outer": (_int, 20),
        "n_inner": (_int, 2000),
        "mc_samples": (_int, 2000),
        "c1": (float, 0.5),
        "C0": (float, 10.0),
        "horizon_factor": (float, 3.0),
    },
}
_REQUIRED_SECTIONS = ("kernel", "experiment")


@dataclass(frozen=True)
class ExperimentConfig:
    kernel: dict
    model: dict
    disorder: dict
    experiment: dict
    source: str = field(default="<string>", compare=False)

    def kernel_spec(self) -> KernelSpec:
        k = self.kernel
        return KernelSpec(k["gamma"], k["slow_var"], k["kappa"], k["x_max"], k["tail_tol"])

    def canonical(self) -> str:
        data = {name: getattr(self, name) for name in _SCHEMA}
        return json.dumps(data, sort_keys=True, separators=(",", ":"))

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    def with_overrides(self, section: str, **values) -> "ExperimentConfig":
        """Copy with keys of one section replaced; keys are checked like file keys."""
        current = dict(getattr(self, section))
        for key, value in values.items():
            if key not in _SCHEMA[section]:
                raise ConfigError(f"{self.source}: [{section}] {key}: unknown key")
            current[key] = value
        parts = {name: getattr(self, name) for name in _SCHEMA}
        parts[section] = current
        return ExperimentConfig(**parts, source=self.source)


def parse_config(text: str, source: str = "<string>") -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, strict=True)
    parser.optionxform = str  # keys are case-sensitive (R, C0, T)
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"{source}: [{section}]: unknown section")
    for section in _REQUIRED_SECTIONS:
        if not parser.has_section(section):
            raise ConfigError(f"{source}: [{section}]: missing section")
    parsed = {}
    for section, schema in _SCHEMA.items():
        values = {}
        present = parser[section] if parser.has_section(section) else {}
        for key in present:
            if key not in schema:
                raise ConfigError(f"{source}: [{section}] {key}: unknown key")
        for key, (conv, default) in schema.items():
            if key in present:
                raw = present[key].strip()
                try:
                    values[key] = conv(raw)
                except ValueError as exc:
                    raise ConfigError(f"{source}: [{section}] {key}: cannot parse {raw!r} ({exc})") from exc
            elif default is None:
                raise ConfigError(f"{source}: [{section}] {key}: required key missing")
            else:
                values[key] = default
        parsed[section] = values
    cfg = ExperimentConfig(**parsed, source=source)
    try:
        cfg.kernel_spec()
    except ValueError as exc:
        raise ConfigError(f"{source}: [kernel]: {exc}") from exc
    if cfg.experiment["workers"] < 1:
        raise ConfigError(f"{source}: [experiment] workers: must be at least 1")
    for rho in cfg.disorder["rho"]:
        if not 0.0 <= rho < 1.0:
            raise ConfigError(f"{source}: [disorder] rho: {rho} outside [0, 1)")
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    return parse_config(path.read_text(encoding="utf-8"), str(path))


def default_config(name: str, gamma: float = 0.75, **experiment) -> ExperimentConfig:
    text = f"[kernel]\ngamma = {gamma!r}\n[experiment]\nname = {name}\n"
    cfg = parse_config(text, "<default>")
    return cfg.with_overrides("experiment", **experiment) if experiment else cfg
