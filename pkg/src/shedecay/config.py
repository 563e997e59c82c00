"""Run configuration: one YAML/JSON document, strict keys, dotted overrides, stable digest."""
from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

import yaml

from .experiments import ExperimentPlan, PlanError, ProbeSpec, build_solver_config
from .grid import initial_profile
from .kernel import KernelParams
from .solver import SolverConfig

SOLVER_DEFAULTS = {
    "n_space": 128,
    "dt": None,
    "dt_divisor": None,
    "horizon": 1.0,
    "lambda": 1.0,
    "sigma": {"kind": "linear", "c": 1.0},
    "seed": 0,
    "scheme": "explicit_em",
    "negativity_policy": "record_only",
    "nu": 1.0,
    "output_every": None,
    "test_mode": False,
}
DEFAULTS = {
    **SOLVER_DEFAULTS,
    "initial": {"kind": "constant", "value": 1.0},
    "n_trajectories": 10,
    "kernel": {"truncation_order": None, "abs_tolerance": 1e-12},
    "plan": {"name": "plan", "probes": [], "max_trajectory_csvs": 20, "record_wall_time": False},
    "output_dir": None,
    "workers": 1,
    "log_level": "WARNING",
}
# keys that change where or how fast a run happens but never what it computes
RUNTIME_KEYS = ("output_dir", "workers", "log_level")
_NESTED_STRICT = {
    "kernel": {"truncation_order", "abs_tolerance"},
    "plan": {"name", "probes", "max_trajectory_csvs", "record_wall_time"},
    "sigma": {"kind", "c", "L_sigma", "Lip_sigma", "expression"},
}


class ConfigError(ValueError):
    """Invalid, unreadable or inconsistent configuration (exit status 2)."""


def load_document(path: str | Path | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        data = yaml.safe_load(p.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{p}: cannot parse: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{p}: top level must be a mapping")
    return data


def parse_override(item: str) -> tuple[list[str], object]:
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like key=value")
    key, raw = item.split("=", 1)
    key = key.strip()
    if not key or any(not part for part in key.split(".")):
        raise ConfigError(f"bad override key {key!r}")
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError as exc:
        raise ConfigError(f"override {item!r}: cannot parse value: {exc}") from exc
    return key.split("."), value


def apply_overrides(doc: dict, overrides: list[str]) -> dict:
    """Apply ``key=value`` items in order (last writer wins); dotted keys address nested maps."""
    out = copy.deepcopy(doc)
    for item in overrides:
        path, value = parse_override(item)
        node = out
        for part in path[:-1]:
            child = node.get(part)
            if child is None:
                child = {}
                node[part] = child
            if not isinstance(child, dict):
                raise ConfigError(f"override {item!r}: {part!r} is not a mapping")
            node = child
        node[path[-1]] = value
    return out


def _check_keys(doc: dict) -> None:
    unknown = set(doc) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}; allowed: {sorted(DEFAULTS)}")
    for name, allowed in _NESTED_STRICT.items():
        sub = doc.get(name)
        if sub is None:
            continue
        if not isinstance(sub, dict):
            raise ConfigError(f"{name!r} must be a mapping")
        bad = set(sub) - allowed
        if bad:
            raise ConfigError(f"unknown keys under {name!r}: {sorted(bad)}; allowed: {sorted(allowed)}")


class RunConfig:
    """Effective configuration: defaults, then the document, then overrides."""

    def __init__(self, doc: dict | None = None):
        doc = doc or {}
        _check_keys(doc)
        merged = copy.deepcopy(DEFAULTS)
        for key, value in doc.items():
            if key in ("kernel", "plan") and isinstance(value, dict):
                merged[key] = {**merged[key], **value}
            else:
                merged[key] = value
        # dt and dt_divisor are alternatives; the document's explicit choice wins over defaults
        if doc.get("dt") is not None and doc.get("dt_divisor") is not None:
            raise ConfigError("give at most one of dt and dt_divisor")
        self.data = merged
        try:
            self.solver = build_solver_config(self.solver_template())
            self.kernel = KernelParams(**merged["kernel"])
            self.initial = initial_profile(merged["initial"], self.solver.n_space)
        except ConfigError:
            raise
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc
        if int(merged["n_trajectories"]) < 1:
            raise ConfigError("n_trajectories must be >= 1")
        if int(merged["workers"]) < 1:
            raise ConfigError("workers must be >= 1")

    @classmethod
    def load(cls, path: str | Path | None = None, overrides: list[str] | None = None) -> "RunConfig":
        return cls(apply_overrides(load_document(path), overrides or []))

    def solver_template(self) -> dict:
        return {k: self.data[k] for k in SOLVER_DEFAULTS if self.data[k] is not None}

    def canonical(self) -> dict:
        return {k: v for k, v in self.data.items() if k not in RUNTIME_KEYS}

    def digest(self) -> str:
        text = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()

    @property
    def workers(self) -> int:
        return int(self.data["workers"])

    @property
    def n_trajectories(self) -> int:
        return int(self.data["n_trajectories"])

    def plan(self) -> ExperimentPlan:
        p = self.data["plan"]
        probes = p.get("probes") or []
        if not isinstance(probes, list):
            raise ConfigError("plan.probes must be a list")
        specs = []
        for item in probes:
            if isinstance(item, str):
                specs.append(ProbeSpec(item))
            elif isinstance(item, dict) and set(item) <= {"name", "params"} and "name" in item:
                specs.append(ProbeSpec(item["name"], dict(item.get("params") or {})))
            else:
                raise ConfigError(f"bad probe entry {item!r}; use a name or {{name, params}}")
        try:
            return ExperimentPlan(
                name=str(p.get("name", "plan")),
                solver=self.solver_template(),
                n_trajectories=self.n_trajectories,
                probes=tuple(specs),
                initial=self.data["initial"],
                output_dir=self.data["output_dir"],
                workers=self.workers,
                max_trajectory_csvs=int(p.get("max_trajectory_csvs", 20)),
                record_wall_time=bool(p.get("record_wall_time", False)),
            )
        except PlanError as exc:
            raise ConfigError(str(exc)) from exc


def solver_config(cfg: RunConfig) -> SolverConfig:
    return cfg.solver
