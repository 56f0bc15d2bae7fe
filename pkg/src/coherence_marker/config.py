"""TOML run configuration with one section per pipeline stage."""

from __future__ import annotations

import copy
import dataclasses
import sys
from pathlib import Path
from typing import Any, Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .models.training import MAX_GRID_TRIALS, POOL_DOMAINS, ScorerConfig


class ConfigError(ValueError):
    pass


def _model_defaults() -> dict:
    return {f.name: f.default for f in dataclasses.fields(ScorerConfig)}


DEFAULTS: dict[str, dict[str, Any]] = {
    "run": {"seed": 0},
    "ingest": {"dialect": "chat", "speakers": ["PAR"], "metadata": ""},
    "pairs": {"ratios": [0.8, 0.1, 0.1], "cohort": "healthy"},
    "model": _model_defaults(),
    "grid": {"enabled": False, "max_trials": MAX_GRID_TRIALS, "pool": {}},
    "marker": {"long_mode": "within", "min_visits": 2},
    "stats": {"std": "sample", "alternative": "two-sided"},
    "bins": {},
}

# sections whose keys are free-form tables
_OPEN_SECTIONS = {"bins"}


def default_config() -> dict[str, dict[str, Any]]:
    return copy.deepcopy(DEFAULTS)


def merge(base: Mapping[str, Any], update: Mapping[str, Any], where: str = "") -> dict:
    out = copy.deepcopy(dict(base))
    for section, values in update.items():
        if section not in out:
            raise ConfigError(f"unknown config section [{section}]")
        if not isinstance(values, Mapping):
            raise ConfigError(f"[{section}] must be a table{where}")
        if section in _OPEN_SECTIONS:
            out[section].update(copy.deepcopy(dict(values)))
            continue
        for key, value in values.items():
            if key not in out[section]:
                raise ConfigError(f"unknown key {section}.{key}{where}")
            out[section][key] = copy.deepcopy(value)
    return out


def load_config(path: str | Path | None = None) -> dict[str, dict[str, Any]]:
    """Defaults, overlaid with the TOML file at ``path`` if given."""
    cfg = default_config()
    if path is None:
        return validate(cfg)
    path = Path(path)
    try:
        with path.open("rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return validate(merge(cfg, data, f" in {path}"))


def set_value(cfg: dict, dotted: str, value: Any) -> None:
    """Override one ``section.key`` in place (used for command-line flags)."""
    section, _, key = dotted.partition(".")
    if section not in cfg or (section not in _OPEN_SECTIONS and key not in cfg[section]):
        raise ConfigError(f"unknown config key {dotted}")
    cfg[section][key] = value


def validate(cfg: dict) -> dict:
    if cfg["stats"]["std"] not in ("sample", "population"):
        raise ConfigError("stats.std must be 'sample' or 'population'")
    if cfg["stats"]["alternative"] not in ("two-sided", "greater", "less"):
        raise ConfigError("stats.alternative must be 'two-sided', 'greater' or 'less'")
    ratios = cfg["pairs"]["ratios"]
    if len(ratios) != 3 or any(r < 0 for r in ratios) or sum(ratios) <= 0:
        raise ConfigError("pairs.ratios must be three non-negative numbers")
    pool = cfg["grid"]["pool"]
    for key, values in pool.items():
        if key not in POOL_DOMAINS:
            raise ConfigError(f"grid.pool.{key} is not searchable; choose from {sorted(POOL_DOMAINS)}")
        if not isinstance(values, list):
            raise ConfigError(f"grid.pool.{key} must be a list")
    scorer_config(cfg)
    return cfg


def scorer_config(cfg: Mapping[str, Mapping[str, Any]]) -> ScorerConfig:
    model = dict(cfg["model"])
    if model.get("hidden") in (0, ""):
        model["hidden"] = None
    try:
        return ScorerConfig.from_dict(model)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[model]: {exc}") from exc


def ddof(cfg: Mapping[str, Mapping[str, Any]]) -> int:
    return 1 if cfg["stats"]["std"] == "sample" else 0


def grid_pool(cfg: Mapping[str, Mapping[str, Any]]) -> dict[str, list]:
    """The configured pool, or the full allowed sets when none is given."""
    pool = cfg["grid"]["pool"]
    if pool:
        return {k: list(v) for k, v in pool.items()}
    return {k: list(v) for k, v in POOL_DOMAINS.items()}


def dumps(cfg: Mapping[str, Mapping[str, Any]]) -> str:
    """Minimal TOML writer for the effective-config snapshot."""
    lines: list[str] = []

    def value(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, (int, float)):
            return repr(v)
        if isinstance(v, str):
            return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
        if isinstance(v, (list, tuple)):
            return "[" + ", ".join(value(x) for x in v) + "]"
        raise ConfigError(f"cannot serialise {v!r}")

    def table(name, data):
        scalars = {k: v for k, v in data.items() if not isinstance(v, Mapping) and v is not None}
        nested = {k: v for k, v in data.items() if isinstance(v, Mapping)}
        lines.append(f"[{name}]")
        lines.extend(f"{k} = {value(v)}" for k, v in sorted(scalars.items()))
        lines.append("")
        for k, v in sorted(nested.items()):
            table(f"{name}.{k}", v)

    for section in DEFAULTS:
        table(section, cfg[section])
    return "\n".join(lines)
