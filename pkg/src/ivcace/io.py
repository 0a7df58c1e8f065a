"""Dataset and configuration file handling for the command-line surface.

Datasets are delimited text with a header row: columns z, d, y plus one
integer-coded column per covariate, missing entries written as a
configurable token (default ``NA``).  Run configuration is a YAML
mapping validated against a fixed key schema; unknown keys are rejected
so typos fail loudly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np
import pandas as pd
import yaml

from .baselines import ImputationConfig
from .em import FitConfig
from .estimands import BootstrapConfig
from .model import CovariateSpec, Dataset, ModelError
from .sensitivity import SensitivityGrid


class ConfigError(ValueError):
    pass


def read_dataset(path, spec: CovariateSpec, na_token: str = "NA") -> Dataset:
    """Parse a delimited dataset file against the covariate spec."""
    df = pd.read_csv(path, na_values=[na_token], keep_default_na=False)
    required = ["z", "d", "y"] + list(spec.names)
    missing_cols = [c for c in required if c not in df.columns]
    if missing_cols:
        raise ModelError(f"dataset file lacks columns: {', '.join(missing_cols)}")
    for c in ("z", "d", "y"):
        if df[c].isna().any():
            raise ModelError(f"column {c} contains missing values")
    x = np.column_stack(
        [df[name].fillna(-1).to_numpy(dtype=float).astype(int) for name in spec.names]
    )
    ds = Dataset(
        x=x,
        z=df["z"].to_numpy(dtype=int),
        d=df["d"].to_numpy(dtype=int),
        y=df["y"].to_numpy(dtype=int),
    )
    ds.validate(spec)
    return ds


def write_dataset(path, dataset: Dataset, spec: CovariateSpec, na_token: str = "NA"):
    cols = {"z": dataset.z, "d": dataset.d, "y": dataset.y}
    for i, name in enumerate(spec.names):
        col = dataset.x[:, i].astype(object)
        col[dataset.x[:, i] < 0] = na_token
        cols[name] = col
    pd.DataFrame(cols).to_csv(path, index=False)


def write_table(path, rows: list[dict]):
    """Emit a report as CSV; the delimited form is the machine contract."""
    pd.DataFrame(rows).to_csv(path, index=False)


def render_table(rows: list[dict]) -> str:
    if not rows:
        return "(empty)"
    return pd.DataFrame(rows).to_string(index=False)


@dataclass
class RunConfig:
    spec: CovariateSpec | None = None
    fit: FitConfig = field(default_factory=FitConfig)
    bootstrap: BootstrapConfig = field(default_factory=BootstrapConfig)
    imputation: ImputationConfig = field(default_factory=ImputationConfig)
    grid: SensitivityGrid = field(default_factory=SensitivityGrid)
    na_token: str = "NA"
    seed: int = 0


_SECTION_TYPES = {
    "fit": FitConfig,
    "bootstrap": BootstrapConfig,
    "imputation": ImputationConfig,
    "sensitivity_grid": SensitivityGrid,
}


def _build_section(name, cls, mapping):
    if not isinstance(mapping, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    allowed = {f.name for f in fields(cls)}
    unknown = set(mapping) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
    kwargs = {
        k: tuple(tuple(c) for c in v) if k == "cells"
        else tuple(v) if isinstance(v, list) else v
        for k, v in mapping.items()
    }
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid section {name!r}: {exc}") from exc


def _build_spec(mapping) -> CovariateSpec:
    allowed = {"names", "levels", "observed"}
    unknown = set(mapping) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in 'covariates': {sorted(unknown)}")
    try:
        return CovariateSpec(
            names=tuple(mapping["names"]),
            levels=tuple(int(q) for q in mapping["levels"]),
            observed=tuple(bool(o) for o in mapping["observed"]),
        )
    except KeyError as exc:
        raise ConfigError(f"'covariates' requires key {exc}") from exc
    except ModelError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> RunConfig:
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("config file must contain a mapping")
    known = {"covariates", "na_token", "seed"} | set(_SECTION_TYPES)
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")

    cfg = RunConfig()
    if "covariates" in raw:
        cfg.spec = _build_spec(raw["covariates"])
    for key, cls in _SECTION_TYPES.items():
        if key in raw:
            attr = "grid" if key == "sensitivity_grid" else key
            setattr(cfg, attr, _build_section(key, cls, raw[key]))
    if "na_token" in raw:
        cfg.na_token = str(raw["na_token"])
    if "seed" in raw:
        cfg.seed = int(raw["seed"])
    return cfg
