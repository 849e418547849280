"""TOML experiment configs with dotted keys and Cartesian scenario grids.

Every leaf key is ``section.name`` (``dgp.p_x = 0.3`` or a ``[dgp]`` table).
A list value sweeps that key; for list-typed keys (``variance.bandwidths``)
a list of lists sweeps.  The grid is the Cartesian product of all sweeps in
sorted key order, which fixes the scenario order.
"""
from __future__ import annotations

import itertools
import sys
from dataclasses import fields

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .dgp import DgpConfig
from .estimation import ModelSpec
from .montecarlo import ExperimentConfig, PopulationConfig, VarianceConfig
from .sampling import SamplingDesign

__all__ = ["ConfigError", "SECTIONS", "load_config", "parse_config", "expand_grid",
           "build_experiment", "flatten", "scenario_label"]


class ConfigError(ValueError):
    pass


_EXPERIMENT_KEYS = ("replications", "seed", "level", "truth", "truth_reps", "min_units",
                    "max_redraws", "label")

SECTIONS = {
    "population": tuple(f.name for f in fields(PopulationConfig)),
    "dgp": DgpConfig.keys(),
    "sampling": tuple(f.name for f in fields(SamplingDesign)),
    "model": tuple(f.name for f in fields(ModelSpec)),
    "variance": tuple(f.name for f in fields(VarianceConfig)),
    "experiment": _EXPERIMENT_KEYS,
}
LIST_KEYS = {"variance.bandwidths"}


def flatten(tree: dict, prefix: str = "") -> dict:
    out = {}
    for key, val in tree.items():
        name = f"{prefix}{key}"
        if isinstance(val, dict):
            out.update(flatten(val, name + "."))
        else:
            out[name] = val
    return out


def _check_keys(flat: dict) -> None:
    for key in flat:
        section, _, name = key.partition(".")
        if section not in SECTIONS or name not in SECTIONS[section]:
            raise ConfigError(f"unknown config key {key!r}")


def parse_config(text: str) -> dict:
    try:
        tree = tomllib.loads(text)
    except tomllib.TOMLDecodeError as err:
        raise ConfigError(f"config is not valid TOML: {err}") from err
    flat = flatten(tree)
    _check_keys(flat)
    return flat


def load_config(path) -> dict:
    with open(path, "rb") as fh:
        return parse_config(fh.read().decode("utf-8"))


def _is_sweep(key, val) -> bool:
    if not isinstance(val, list):
        return False
    if key in LIST_KEYS:
        return bool(val) and all(isinstance(v, list) for v in val)
    return True


def expand_grid(flat: dict) -> list[dict]:
    """Cartesian product over swept keys, as a list of scalar configs."""
    _check_keys(flat)
    fixed = {k: v for k, v in flat.items() if not _is_sweep(k, v)}
    sweeps = sorted((k, v) for k, v in flat.items() if _is_sweep(k, v))
    for k, v in sweeps:
        if not v:
            raise ConfigError(f"config key {k!r} sweeps an empty list")
    keys = [k for k, _ in sweeps]
    out = []
    for combo in itertools.product(*[v for _, v in sweeps]):
        scen = dict(fixed)
        scen.update(zip(keys, combo))
        out.append(scen)
    return out


def scenario_label(scen: dict, swept_keys) -> str:
    if scen.get("experiment.label"):
        base = str(scen["experiment.label"])
    else:
        base = ""
    parts = [f"{k.split('.', 1)[1]}={scen[k]}" for k in swept_keys if k != "experiment.label"]
    return " ".join(p for p in [base] + parts if p) or "scenario"


def build_experiment(scen: dict) -> ExperimentConfig:
    """Turn one scalar scenario dict into a validated :class:`ExperimentConfig`."""
    _check_keys(scen)
    parts = {s: {} for s in SECTIONS}
    for key, val in scen.items():
        section, _, name = key.partition(".")
        parts[section][name] = val
    try:
        var = parts["variance"]
        if "bandwidths" in var:
            var["bandwidths"] = tuple(var["bandwidths"])
        cfg = ExperimentConfig(
            population=PopulationConfig(**parts["population"]),
            dgp=DgpConfig(**parts["dgp"]),
            sampling=SamplingDesign(**parts["sampling"]),
            model=ModelSpec(**parts["model"]),
            variance=VarianceConfig(**var),
            **parts["experiment"],
        )
    except (TypeError, ValueError) as err:
        raise ConfigError(f"invalid config: {err}") from err
    return cfg
