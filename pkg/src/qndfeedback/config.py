"""Run configuration: JSON schema, dataclasses, and builders for the model objects.

Complex matrices are nested arrays whose leaves are either real numbers or
``[re, im]`` pairs.
"""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import jsonschema
import numpy as np

from .detection import DetectionModel, atom_detector_model
from .kraus import (
    DEFAULT_FD_STEP,
    ConfigurationError,
    ContractError,
    ControlledKrausFamily,
    UnitaryKickFamily,
    basis_state,
    constant_family,
    diagonal_state,
    maximally_mixed,
    pure_state,
    toy_rotation_family,
    validate_density,
)
from .photonbox import PhotonBoxParams, initial_state, photonbox_family

KINDS = ("open", "closed", "robustness", "photonbox")
_NUM = {"type": "number"}
_ENTRY = {"oneOf": [_NUM, {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2}]}
_MATRIX = {"type": "array", "minItems": 1, "items": {"type": "array", "minItems": 1, "items": _ENTRY}}
_PROB = {"type": "number", "minimum": 0, "maximum": 1}
_STATE = {
    "oneOf": [
        {"enum": ["maximally_mixed", "coherent"]},
        {
            "type": "object",
            "additionalProperties": False,
            "minProperties": 1,
            "maxProperties": 1,
            "properties": {
                "basis": {"type": "integer", "minimum": 0},
                "diagonal": {"type": "array", "items": _NUM, "minItems": 1},
                "pure": {"type": "array", "items": _ENTRY, "minItems": 1},
                "matrix": _MATRIX,
            },
        },
    ]
}

SCHEMA: dict[str, Any] = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "required": ["family"],
    "properties": {
        "experiment": {"enum": list(KINDS)},
        "family": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "builtin": {"enum": ["toy-rotation", "photon-box"]},
                "dim": {"type": "integer", "minimum": 2},
                "phases": {"type": "array", "items": _NUM},
                "operators": {"type": "array", "minItems": 1, "items": _MATRIX},
                "generator": _MATRIX,
                "side": {"enum": ["left", "right"]},
                "derivatives": {"enum": ["analytic", "finite-difference"]},
                "fd_step": {"type": "number", "exclusiveMinimum": 0},
                "labels": {"type": "array", "items": {"type": "string"}},
            },
        },
        "target": {"type": "integer", "minimum": 0},
        "initial_state": _STATE,
        "estimate_initial_state": _STATE,
        "lyapunov": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"lambda": {"type": "array", "items": _NUM}},
        },
        "controller": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "mode": {"enum": ["grid", "quadratic"]},
                "u_bar": {"type": "number", "exclusiveMinimum": 0},
                "grid_points": {"type": "integer", "minimum": 3},
                "epsilon": {"oneOf": [{"type": "number", "minimum": 0}, {"const": "ceiling"}]},
                "tau": {"type": "integer", "minimum": 0},
            },
        },
        "detection": {
            "oneOf": [
                {"type": "null"},
                {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["eta"],
                    "properties": {"eta": {"type": "array", "minItems": 1, "items": {"type": "array", "items": _NUM}}},
                },
                {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["builder"],
                    "properties": {
                        "builder": {"const": "photon-box"},
                        "efficiency": _PROB,
                        "flip_e": _PROB,
                        "flip_g": _PROB,
                    },
                },
            ]
        },
        "photonbox": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_ph_max": {"type": "integer", "minimum": 1},
                "phi0": _NUM,
                "phi_r": {"type": ["number", "null"]},
                "mean_atoms": {"type": "number", "exclusiveMinimum": 0},
                "det_efficiency": _PROB,
                "flip_e": _PROB,
                "flip_g": _PROB,
                "theta": {"type": "number", "minimum": 0},
                "n_th": {"type": "number", "minimum": 0},
                "tau": {"type": "integer", "minimum": 0},
                "u_bar": {"type": "number", "exclusiveMinimum": 0},
                "target": {"type": "integer", "minimum": 0},
            },
        },
        "ensemble": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "trajectories": {"type": "integer", "minimum": 0},
                "steps": {"type": "integer", "minimum": 0},
                "seed": {"type": "integer", "minimum": 0, "maximum": 2**64 - 1},
                "block_size": {"type": "integer", "minimum": 1},
                "workers": {"type": ["integer", "null"], "minimum": 1},
                "record_every": {"type": "integer", "minimum": 1},
            },
        },
        "convergence": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "threshold": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "window": {"type": "integer", "minimum": 1},
                "hit_threshold": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "average_from": {"type": "integer", "minimum": 0},
                "jump_threshold": _PROB,
            },
        },
        "output": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"dir": {"type": "string"}, "emit_trajectories": {"type": "boolean"}},
        },
    },
}


def json_pointer(path) -> str:
    return "/" + "/".join(str(p).replace("~", "~0").replace("/", "~1") for p in path)


def validate_config(raw) -> None:
    """Schema check; the most relevant error is reported with its JSON pointer."""
    errors = list(jsonschema.Draft202012Validator(SCHEMA).iter_errors(raw))
    if errors:
        err = jsonschema.exceptions.best_match(errors)
        raise ConfigurationError(f"{json_pointer(err.absolute_path)}: {err.message}")


# ---------------------------------------------------------------------------
# dataclasses


@dataclass
class EnsembleConfig:
    trajectories: int = 1000
    steps: int = 2000
    seed: int = 0
    block_size: int = 250
    workers: int | None = None
    record_every: int = 10


@dataclass
class ConvergenceConfig:
    threshold: float = 0.999
    window: int = 50
    hit_threshold: float = 0.99
    average_from: int = 0
    jump_threshold: float = 0.9


@dataclass
class ControllerSection:
    mode: str | None = None  # grid for generic families, quadratic for the photon box
    u_bar: float | None = None
    grid_points: int = 21
    epsilon: float | str | None = None
    tau: int | None = None


@dataclass
class OutputConfig:
    dir: str | None = None
    emit_trajectories: bool = False


@dataclass
class RunConfig:
    family: dict
    experiment: str = "open"
    target: int | None = None
    initial_state: Any = None
    estimate_initial_state: Any = None
    lyapunov: dict = field(default_factory=dict)
    controller: ControllerSection = field(default_factory=ControllerSection)
    detection: dict | None = None
    photonbox: dict = field(default_factory=dict)
    ensemble: EnsembleConfig = field(default_factory=EnsembleConfig)
    convergence: ConvergenceConfig = field(default_factory=ConvergenceConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        validate_config(raw)
        raw = copy.deepcopy(raw)
        kw: dict[str, Any] = {k: v for k, v in raw.items() if k not in _SECTIONS}
        for name, klass in _SECTIONS.items():
            if name in raw:
                kw[name] = klass(**raw[name])
        cfg = cls(**kw)
        cfg.check()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"/: invalid JSON ({exc})") from exc
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def is_photonbox(self) -> bool:
        return self.family.get("builtin") == "photon-box"

    def check(self) -> None:
        """Cross-field rules the schema cannot express."""
        fam = self.family
        if ("builtin" in fam) == ("operators" in fam):
            raise ConfigurationError("/family: give exactly one of 'builtin' or 'operators'")
        if self.controller.grid_points % 2 == 0:
            raise ConfigurationError("/controller/grid_points: must be odd so that 0 is a candidate")
        if self.experiment == "photonbox" and not self.is_photonbox:
            raise ConfigurationError("/family/builtin: photonbox experiments need the photon-box family")
        if self.experiment == "photonbox" and self.detection is not None:
            raise ConfigurationError("/detection: photonbox experiments build their detector from /photonbox")
        if self.photonbox and not self.is_photonbox:
            raise ConfigurationError("/photonbox: only valid with the photon-box family")
        for key in ("target", "tau", "u_bar"):
            outer = self.target if key == "target" else getattr(self.controller, key)
            if self.is_photonbox and outer is not None and key in self.photonbox and outer != self.photonbox[key]:
                raise ConfigurationError(f"/photonbox/{key}: disagrees with the value given elsewhere")

    def resolved_target(self) -> int:
        if self.is_photonbox:
            return photonbox_params(self).target
        return 0 if self.target is None else self.target

    def resolved_mode(self) -> str:
        if self.controller.mode is not None:
            return self.controller.mode
        return "quadratic" if self.is_photonbox else "grid"


_SECTIONS = {
    "controller": ControllerSection,
    "ensemble": EnsembleConfig,
    "convergence": ConvergenceConfig,
    "output": OutputConfig,
}


# ---------------------------------------------------------------------------
# builders


def _leaf(x, depth: int):
    if depth == 0:
        if isinstance(x, (list, tuple)):
            if len(x) != 2:
                raise ValueError("complex leaf must be [re, im]")
            return complex(float(x[0]), float(x[1]))
        return complex(float(x))
    if not isinstance(x, (list, tuple)):
        raise ValueError("too shallow")
    return [_leaf(v, depth - 1) for v in x]


def complex_array(value, ndim: int, where: str) -> np.ndarray:
    """Nested arrays whose leaves are numbers or ``[re, im]`` pairs, as a complex array."""
    try:
        arr = np.asarray(_leaf(value, ndim), dtype=complex)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"{where}: expected a {ndim}-d array of numbers or [re, im] pairs") from exc
    if arr.ndim != ndim:
        raise ConfigurationError(f"{where}: expected {ndim}-d numbers or [re, im] pairs, got shape {arr.shape}")
    return arr


def photonbox_params(cfg: RunConfig) -> PhotonBoxParams:
    params = dict(cfg.photonbox)
    if cfg.target is not None:
        params.setdefault("target", cfg.target)
    if cfg.controller.u_bar is not None:
        params.setdefault("u_bar", cfg.controller.u_bar)
    if cfg.controller.tau is not None:
        params.setdefault("tau", cfg.controller.tau)
    try:
        return PhotonBoxParams(**params)
    except ContractError as exc:
        raise ConfigurationError(f"/photonbox: {exc}") from exc


def build_family(cfg: RunConfig) -> ControlledKrausFamily:
    spec = cfg.family
    analytic = spec.get("derivatives", "analytic") == "analytic"
    fd_step = spec.get("fd_step", DEFAULT_FD_STEP)
    builtin = spec.get("builtin")
    try:
        if builtin == "toy-rotation":
            toy = toy_rotation_family(spec.get("dim", 2), spec.get("phases"))
            if analytic and "fd_step" not in spec:
                return toy
            return UnitaryKickFamily(
                toy.qnd_operators, toy.generators, analytic=analytic, fd_step=fd_step, labels=toy.labels,
                name="toy-rotation",
            )
        if builtin == "photon-box":
            fam = photonbox_family(photonbox_params(cfg), analytic=analytic)
            fam.fd_step = float(fd_step)
            return fam
        ops = complex_array(spec["operators"], 3, "/family/operators")
        labels = spec.get("labels")
        if "generator" not in spec:
            base = constant_family(ops)
            return ControlledKrausFamily(base._operators, base._derivatives, labels=labels, name="constant")
        gen = complex_array(spec["generator"], 2, "/family/generator")
        return UnitaryKickFamily(
            ops, gen, side=spec.get("side", "left"), analytic=analytic, fd_step=fd_step, labels=labels,
            name="explicit",
        )
    except ContractError as exc:
        raise ConfigurationError(f"/family: {exc}") from exc


def build_state(desc, d: int, cfg: RunConfig, where: str) -> np.ndarray:
    try:
        if desc == "maximally_mixed":
            return maximally_mixed(d)
        if desc == "coherent":
            if not cfg.is_photonbox:
                raise ConfigurationError(f"{where}: 'coherent' needs the photon-box family")
            return initial_state(photonbox_params(cfg))
        if "basis" in desc:
            if desc["basis"] >= d:
                raise ConfigurationError(f"{where}/basis: index {desc['basis']} out of range for dimension {d}")
            return basis_state(d, desc["basis"])
        if "diagonal" in desc:
            return validate_density(diagonal_state(desc["diagonal"]), d)
        if "pure" in desc:
            return validate_density(pure_state(complex_array(desc["pure"], 1, f"{where}/pure")), d)
        return validate_density(complex_array(desc["matrix"], 2, f"{where}/matrix"), d)
    except ContractError as exc:
        raise ConfigurationError(f"{where}: {exc}") from exc


def build_detection(cfg: RunConfig, family: ControlledKrausFamily) -> DetectionModel | None:
    det = cfg.detection
    if det is None:
        return None
    try:
        if "eta" in det:
            model = DetectionModel(np.asarray(det["eta"], dtype=float))
        else:
            defaults = PhotonBoxParams()
            model = atom_detector_model(
                family.labels,
                det.get("efficiency", defaults.det_efficiency),
                det.get("flip_e", defaults.flip_e),
                det.get("flip_g", defaults.flip_g),
            )
    except ContractError as exc:
        raise ConfigurationError(f"/detection: {exc}") from exc
    if model.true_outcomes != family.outcome_count:
        raise ConfigurationError(
            f"/detection/eta: {model.true_outcomes} columns but the family has {family.outcome_count} outcomes"
        )
    return model
