"""Experiment configuration: strict YAML schema with no silent defaults for
unknown keys."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .flow import FlowConfig


@dataclass
class GridSpec:
    N: int = 32
    L: float = 1.0
    backend: str = "spectral"  # flows default to the conservation-grade backend


@dataclass
class InitialSpec:
    kind: str = "random_smooth"  # random_smooth | winding_split |
    #                              split_plus_perturbation | from_snapshot
    spectral_cutoff: float = 2.0
    amplitude: float = 0.5
    degrees: tuple = (1, -1)
    phi_consts: tuple = (0.35, -0.15)
    extension_amplitude: float = 1e-2
    snapshot: str | None = None  # anchor / source snapshot path

    _KINDS = ("random_smooth", "winding_split", "split_plus_perturbation",
              "from_snapshot")

    def __post_init__(self):
        if self.kind not in self._KINDS:
            raise ValueError(f"initial_data.kind must be one of {self._KINDS}")


@dataclass
class OutputSpec:
    out_dir: str = "out"
    csv_name: str = "trajectory.csv"
    report_name: str = "report.json"
    snapshot_dir: str = "snapshots"


@dataclass
class ExperimentConfig:
    grid: GridSpec = field(default_factory=GridSpec)
    rank: int = 2
    fixed_det: bool = False
    seed: int = 1
    initial_data: InitialSpec = field(default_factory=InitialSpec)
    flow: FlowConfig = field(default_factory=FlowConfig)
    outputs: OutputSpec = field(default_factory=OutputSpec)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["initial_data"]["degrees"] = list(self.initial_data.degrees)
        d["initial_data"]["phi_consts"] = list(self.initial_data.phi_consts)
        return d


_SCHEMA = {
    "grid": {"N", "L", "backend"},
    "rank": None,
    "fixed_det": None,
    "seed": None,
    "initial_data": {"kind", "spectral_cutoff", "amplitude", "degrees",
                     "phi_consts", "extension_amplitude", "snapshot"},
    "flow": {"c_cfl", "T_max", "integrator", "tol_grad", "snapshot_every",
             "snapshot_growth", "lambda_mode", "max_steps"},
    "outputs": {"out_dir", "csv_name", "report_name", "snapshot_dir"},
}


def _check_keys(d: dict, allowed, path: str):
    unknown = set(d) - set(allowed)
    if unknown:
        raise ValueError(f"unknown config key(s) {sorted(unknown)} under '{path}'")


def config_from_dict(raw: dict) -> ExperimentConfig:
    _check_keys(raw, _SCHEMA, "<root>")
    kwargs = {}
    for section, keys in _SCHEMA.items():
        if section not in raw:
            continue
        val = raw[section]
        if keys is None:
            kwargs[section] = val
            continue
        if not isinstance(val, dict):
            raise ValueError(f"config section '{section}' must be a mapping")
        _check_keys(val, keys, section)
        if section == "grid":
            kwargs[section] = GridSpec(**val)
        elif section == "initial_data":
            v = dict(val)
            for tup_key in ("degrees", "phi_consts"):
                if tup_key in v:
                    v[tup_key] = tuple(v[tup_key])
            kwargs[section] = InitialSpec(**v)
        elif section == "flow":
            kwargs[section] = FlowConfig(**val)
        elif section == "outputs":
            kwargs[section] = OutputSpec(**val)
    return ExperimentConfig(**kwargs)


def load_config(path) -> ExperimentConfig:
    raw = yaml.safe_load(Path(path).read_text())
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ValueError("config file must contain a mapping")
    return config_from_dict(raw)
