"""Scenario files: JSON schema, defaults and conversion to model objects."""
from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .abstraction import AbstractionParams, SymbolicModel
from .degradation import FreeParams
from .systems import LinearSystem, QuadraticStorage, StorageRegularity

# Every tolerance the commands use, overridable under "tolerances".
DEFAULT_TOLERANCES = {
    "psd": 1e-9,                   # semidefiniteness slack for matrix certificates
    "gain_safety": 1.01,           # multiplier on the located gain peak
    "delta_iss_safety": 1.05,      # multiplier on the input-to-state integral
    "residual": 1e-9,              # allowed dissipation residual per unit time
    "reference_rtol": 1e-3,        # relative gap before a printed value counts as deviating
    "detectability_N0": 3,         # horizon of the closed-loop detectability certificate
    "bisim_trials": 200,           # random trials of the trace-level bisimulation check
    "bisim_horizon": 100,          # steps per trial
    "delta_iss_trials": 50,        # random pairs for the incremental-stability spot check
}


class ScenarioError(ValueError):
    """Invalid scenario content; the message names the offending field."""


_matrix = {"type": "array", "minItems": 1,
           "items": {"type": "array", "minItems": 1, "items": {"type": "number"}}}
_vector = {"type": "array", "minItems": 1, "items": {"type": "number"}}
_pos = {"type": "number", "exclusiveMinimum": 0}
_box = {"type": "array", "minItems": 2, "maxItems": 2, "items": _vector}
_signal = {
    "type": "object",
    "required": ["kind"],
    "properties": {
        "kind": {"enum": ["zero", "constant", "csv"]},
        "value": _vector,
        "path": {"type": "string"},
    },
    "additionalProperties": False,
}
_lti = {
    "type": "object",
    "required": ["A", "B", "C", "D"],
    "properties": {"A": _matrix, "B": _matrix, "C": _matrix, "D": _matrix},
    "additionalProperties": False,
}

SCHEMA = {
    "type": "object",
    "required": ["plant", "controller", "storage", "indices", "abstraction", "free_params",
                 "regularity", "simulation"],
    "properties": {
        "name": {"type": "string"},
        "plant": {
            "oneOf": [
                _lti,
                {
                    "type": "object",
                    "required": ["builtin"],
                    "properties": {"builtin": {"const": "cruise_control"},
                                   "c0": {"type": "number", "minimum": 0}},
                    "additionalProperties": False,
                },
            ]
        },
        "controller": _lti,
        "storage": {
            "type": "object",
            "required": ["P1", "P2"],
            "properties": {"P1": _matrix, "P2": _matrix},
            "additionalProperties": False,
        },
        "indices": {
            "type": "object",
            "required": ["nu1", "rho1", "nu2", "rho2"],
            "properties": {
                "nu1": {"type": "number"}, "rho1": {"type": "number"},
                "nu2": {"type": "number"}, "rho2": {"type": "number"},
                "reference": {"type": "object", "additionalProperties": {"type": "number"}},
            },
            "additionalProperties": False,
        },
        "abstraction": {
            "type": "object",
            "required": ["tau", "mu", "eta", "eps"],
            "properties": {
                "tau": {"type": "number", "minimum": 0},
                "mu": _pos, "eta": _pos, "eps": _pos,
                "state_box": _box, "input_box": _box,
            },
            "additionalProperties": False,
        },
        "free_params": {
            "type": "object",
            "properties": {k: _pos for k in
                           ("lambda1", "lambda2", "lambda3", "lambda4", "lambda5", "l1", "l2")},
            "additionalProperties": False,
        },
        "regularity": {
            "oneOf": [
                {
                    "type": "object",
                    "required": ["mode", "state_radius"],
                    "properties": {"mode": {"const": "auto"}, "state_radius": _pos},
                    "additionalProperties": False,
                },
                {
                    "type": "object",
                    "required": ["L", "theta"],
                    "properties": {"mode": {"const": "given"}, "L": _pos, "theta": _pos},
                    "additionalProperties": False,
                },
            ]
        },
        "simulation": {
            "type": "object",
            "required": ["x1_0", "xc_0", "K"],
            "properties": {
                "x1_0": _vector, "xc_0": _vector,
                "K": {"type": "integer", "minimum": 0},
                "w1": _signal, "w2": _signal,
            },
            "additionalProperties": False,
        },
        "tolerances": {
            "type": "object",
            "properties": {k: {"type": "number"} for k in DEFAULT_TOLERANCES},
            "additionalProperties": False,
        },
    },
    "additionalProperties": False,
}


def _path(error) -> str:
    return "/".join(str(p) for p in error.absolute_path) or "<root>"


def validate(doc) -> None:
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        lines = [f"{_path(e)}: {e.message}" for e in errors]
        raise ScenarioError("scenario does not match the schema:\n  " + "\n  ".join(lines))


@dataclass
class Scenario:
    """Validated scenario with model objects built."""

    name: str
    plant: LinearSystem
    controller: LinearSystem
    V1: QuadraticStorage
    V2: QuadraticStorage
    nu1: float
    rho1: float
    nu2: float
    rho2: float
    tau: float
    mu: float
    eta: float
    eps: float
    free_params: FreeParams
    regularity: StorageRegularity
    x1_0: np.ndarray
    xc_0: np.ndarray
    K: int
    w1: np.ndarray
    w2: np.ndarray
    state_box: tuple
    input_box: tuple
    reference: dict = field(default_factory=dict)
    tolerances: dict = field(default_factory=lambda: dict(DEFAULT_TOLERANCES))
    doc: dict = field(default_factory=dict, repr=False)

    @property
    def m(self) -> int:
        return self.plant.m

    def params(self) -> AbstractionParams:
        """Abstraction parameters; needs a positive sampling period."""
        if not self.tau > 0:
            raise ScenarioError("abstraction/tau: this command needs a positive sampling period")
        return AbstractionParams(self.tau, self.mu, self.eta, self.eps)

    def symbolic_model(self) -> SymbolicModel:
        return SymbolicModel(self.controller, self.params())


def cruise_control_plant(c0: float) -> LinearSystem:
    """Vehicle speed with linear drag: ``dx/dt = u - c0 x``, ``y = x``."""
    return LinearSystem([[-c0]], [[1.0]], [[1.0]], [[0.0]])


def _lti(block, where):
    try:
        return LinearSystem(block["A"], block["B"], block["C"], block["D"])
    except ValueError as exc:
        raise ScenarioError(f"{where}: {exc}") from None


def _load_signal(spec, K, m, where, base_dir):
    spec = spec or {"kind": "zero"}
    kind = spec["kind"]
    if kind == "zero":
        return np.zeros((K + 1, m))
    if kind == "constant":
        if "value" not in spec or len(spec["value"]) != m:
            raise ScenarioError(f"{where}/value: constant signal needs {m} entries")
        return np.tile(np.asarray(spec["value"], dtype=float), (K + 1, 1))
    if "path" not in spec:
        raise ScenarioError(f"{where}/path: csv signal needs a path")
    path = Path(spec["path"])
    if not path.is_absolute():
        path = Path(base_dir) / path
    try:
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r]
        data = np.array([[float(v) for v in r] for r in rows])
    except (OSError, ValueError) as exc:
        raise ScenarioError(f"{where}/path: cannot read {path}: {exc}") from None
    if data.ndim != 2 or data.shape[1] != m or len(data) < K + 1:
        raise ScenarioError(f"{where}: csv must have at least {K + 1} rows of {m} values")
    return data[:K + 1]


def _box(value, default, where):
    if value is None:
        return default
    lo, hi = (np.asarray(v, dtype=float) for v in value)
    if lo.shape != hi.shape:
        raise ScenarioError(f"{where}: corners have different dimensions")
    return (lo, hi)


def from_dict(doc: dict, base_dir=".") -> Scenario:
    validate(doc)
    p = doc["plant"]
    plant = cruise_control_plant(p.get("c0", 0.01)) if "builtin" in p else _lti(p, "plant")
    ctrl = _lti(doc["controller"], "controller")
    if plant.m != ctrl.m:
        raise ScenarioError("controller: input dimension differs from the plant's")
    try:
        V1 = QuadraticStorage(doc["storage"]["P1"])
        V2 = QuadraticStorage(doc["storage"]["P2"])
    except ValueError as exc:
        raise ScenarioError(f"storage: {exc}") from None
    if V1.n != plant.n:
        raise ScenarioError(f"storage/P1: expected {plant.n}x{plant.n}")
    if V2.n != ctrl.n:
        raise ScenarioError(f"storage/P2: expected {ctrl.n}x{ctrl.n}")
    ab = doc["abstraction"]
    eps = ab["eps"]
    reg_doc = doc["regularity"]
    if reg_doc.get("mode", "given") == "auto":
        reg = StorageRegularity.for_quadratic(V2, reg_doc["state_radius"], eps)
    else:
        reg = StorageRegularity(L=reg_doc["L"], theta=reg_doc["theta"], valid_radius=eps)
    sim = doc["simulation"]
    if len(sim["x1_0"]) != plant.n:
        raise ScenarioError(f"simulation/x1_0: expected {plant.n} entries")
    if len(sim["xc_0"]) != ctrl.n:
        raise ScenarioError(f"simulation/xc_0: expected {ctrl.n} entries")
    K = sim["K"]
    tol = dict(DEFAULT_TOLERANCES)
    tol.update(doc.get("tolerances", {}))
    n2, m = ctrl.n, ctrl.m
    state_box = _box(ab.get("state_box"), (-5.0 * np.ones(n2), 5.0 * np.ones(n2)),
                     "abstraction/state_box")
    input_box = _box(ab.get("input_box"), (-5.0 * np.ones(m), 5.0 * np.ones(m)),
                     "abstraction/input_box")
    if state_box[0].size != n2:
        raise ScenarioError(f"abstraction/state_box: expected {n2}-dimensional corners")
    if input_box[0].size != m:
        raise ScenarioError(f"abstraction/input_box: expected {m}-dimensional corners")
    idx = doc["indices"]
    return Scenario(
        name=doc.get("name", "scenario"),
        plant=plant, controller=ctrl, V1=V1, V2=V2,
        nu1=idx["nu1"], rho1=idx["rho1"], nu2=idx["nu2"], rho2=idx["rho2"],
        tau=ab["tau"], mu=ab["mu"], eta=ab["eta"], eps=eps,
        free_params=FreeParams(**doc["free_params"]),
        regularity=reg,
        x1_0=np.asarray(sim["x1_0"], dtype=float),
        xc_0=np.asarray(sim["xc_0"], dtype=float),
        K=K,
        w1=_load_signal(sim.get("w1"), K, m, "simulation/w1", base_dir),
        w2=_load_signal(sim.get("w2"), K, m, "simulation/w2", base_dir),
        state_box=state_box, input_box=input_box,
        reference=dict(idx.get("reference", {})),
        tolerances=tol,
        doc=doc,
    )


def load(path) -> Scenario:
    """Read and validate a scenario file.

    ``path`` may also be the name of a shipped scenario (``cruise_control``).
    """
    path = str(path)
    if not os.path.exists(path) and path in shipped():
        text = resources.files("passlab").joinpath("data", f"{path}.json").read_text()
        base = "."
    else:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ScenarioError(f"cannot read scenario {path}: {exc.strerror}") from None
        base = os.path.dirname(os.path.abspath(path))
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"invalid JSON at line {exc.lineno}, column {exc.colno}: "
                            f"{exc.msg}") from None
    return from_dict(doc, base)


def shipped() -> list:
    folder = resources.files("passlab").joinpath("data")
    return sorted(p.name[:-5] for p in folder.iterdir() if p.name.endswith(".json"))
