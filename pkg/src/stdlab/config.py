"""INI-style run configuration.

Three sections are recognised:

    [distill]   any DistillConfig field
    [data]      weights, means, stdevs of the mixture (whitespace / ``;`` separated)
    [eval]      any EvalConfig field

Resolution is built-in defaults, then the file, then explicit overrides.
Unknown sections or keys are errors.
"""

from __future__ import annotations

import configparser
from dataclasses import fields, replace

import numpy as np

from .distill import DistillConfig
from .eval import EvalConfig
from .models import GmmSpec, default_gmm


class ConfigError(ValueError):
    pass


SECTIONS = ("distill", "data", "eval")
DATA_KEYS = ("weights", "means", "stdevs")


def _field_types(cls) -> dict:
    defaults = cls()
    out = {}
    for f in fields(cls):
        value = getattr(defaults, f.name)
        out[f.name] = type(value) if value is not None else float
    return out


def _coerce(cls, key: str, raw):
    """Turn a config string (or an already-typed override) into the field's type."""
    kinds = _field_types(cls)
    if key not in kinds:
        raise ConfigError(f"unknown key {key!r} for [{_section_of(cls)}]")
    kind = kinds[key]
    if not isinstance(raw, str):
        return tuple(raw) if kind is tuple else raw
    text = raw.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            if key == "omega" and text.lower() in ("", "none", "mid"):
                return None
            return float(text)
        if kind is tuple:
            return tuple(int(v) for v in text.replace(",", " ").split())
        return text
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def _section_of(cls) -> str:
    return "distill" if cls is DistillConfig else "eval"


def _parse_rows(text: str) -> np.ndarray:
    rows = [r for r in (part.strip() for part in text.split(";")) if r]
    return np.array([[float(v) for v in r.replace(",", " ").split()] for r in rows])


def _gmm_from_section(items: dict) -> GmmSpec:
    base = default_gmm()
    for key in items:
        if key not in DATA_KEYS:
            raise ConfigError(f"unknown key {key!r} for [data]")
    try:
        weights = _parse_rows(items["weights"]).reshape(-1) if "weights" in items else base.weights
        means = _parse_rows(items["means"]) if "means" in items else base.means
        stdevs = _parse_rows(items["stdevs"]).reshape(-1) if "stdevs" in items else base.stdevs
        return GmmSpec(weights=weights, means=means, stdevs=stdevs)
    except ValueError as exc:
        raise ConfigError(f"[data]: {exc}") from None


def _build(cls, items: dict):
    values = {k: _coerce(cls, k, v) for k, v in items.items()}
    try:
        return replace(cls(), **values)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None


def split_overrides(overrides: dict | None) -> dict:
    """Route flat ``key -> value`` overrides to their section.

    Keys may be qualified (``eval.seed``); bare keys go to ``distill`` first,
    then ``eval``.
    """
    routed = {name: {} for name in SECTIONS}
    distill_keys = {f.name for f in fields(DistillConfig)}
    eval_keys = {f.name for f in fields(EvalConfig)}
    for key, value in (overrides or {}).items():
        if "." in key:
            section, key = key.split(".", 1)
            if section not in routed:
                raise ConfigError(f"unknown section {section!r}")
        elif key in distill_keys:
            section = "distill"
        elif key in eval_keys:
            section = "eval"
        elif key in DATA_KEYS:
            section = "data"
        else:
            raise ConfigError(f"unknown key {key!r}")
        routed[section][key] = value
    return routed


def config_from_text(text: str, overrides: dict | None = None):
    """Parse INI text into ``(DistillConfig, GmmSpec, EvalConfig)``."""
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    for name in parser.sections():
        if name not in SECTIONS:
            raise ConfigError(f"unknown section [{name}]")
    layered = {name: dict(parser[name]) if parser.has_section(name) else {} for name in SECTIONS}
    for name, items in split_overrides(overrides).items():
        layered[name].update(items)
    return (_build(DistillConfig, layered["distill"]), _gmm_from_section(layered["data"]),
            _build(EvalConfig, layered["eval"]))


def parse_config(path=None, overrides: dict | None = None):
    """Read a config file (or nothing) and apply overrides."""
    text = ""
    if path is not None:
        with open(path) as fh:
            text = fh.read()
    return config_from_text(text, overrides)


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return " ".join(str(v) for v in value)
    if value is None:
        return "none"
    return str(value).lower() if isinstance(value, bool) else str(value)


def render_config(config: DistillConfig, spec: GmmSpec, ecfg: EvalConfig) -> str:
    """Fully explicit INI text; parsing it gives back the same three objects."""
    lines = ["[distill]"]
    lines += [f"{f.name} = {_fmt(getattr(config, f.name))}" for f in fields(DistillConfig)]
    lines += ["", "[data]",
              "weights = " + " ".join(repr(float(v)) for v in spec.weights),
              "means = " + "; ".join(" ".join(repr(float(v)) for v in row) for row in spec.means),
              "stdevs = " + " ".join(repr(float(v)) for v in spec.stdevs),
              "", "[eval]"]
    lines += [f"{f.name} = {_fmt(getattr(ecfg, f.name))}" for f in fields(EvalConfig)]
    return "\n".join(lines) + "\n"
