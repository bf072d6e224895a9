"""Problem configuration: JSON schema, validation and construction of solver objects."""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass

import jsonschema
import numpy as np

from .errors import ConfigurationError
from .gelfand import GalerkinSpace, OperatorPair, check_coercivity, heat_space, make_heat_pair
from .noise import MarkSpace, TimeGrid
from .optimizer import OptimizerConfig
from .problem import (DEFAULT_RADIUS, ControlProcess, ControlSet, ProblemSpec,
                      make_bilinear_problem, make_lq_problem)

SCHEMA_VERSION = 1

_number = {"type": "number"}
_vector = {"type": "array", "items": _number}
_matrix = {"type": "array", "items": _vector}
_tensor = {"type": "array", "items": _matrix}
_weight = {"oneOf": [_number, _matrix]}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["schema", "space", "operators", "noise", "problem"],
    "additionalProperties": False,
    "properties": {
        "schema": {"const": SCHEMA_VERSION},
        "name": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0},
        "space": {
            "type": "object",
            "additionalProperties": False,
            "required": ["dim"],
            "properties": {
                "dim": {"type": "integer", "minimum": 1},
                "factory": {"enum": ["heat", "euclidean"]},
                "viscosity": {"type": "number", "exclusiveMinimum": 0},
                "v_weights": _vector,
            },
        },
        "operators": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "factory": {"enum": ["heat"]},
                "viscosity": {"type": "number", "exclusiveMinimum": 0},
                "A": {"oneOf": [_matrix, _tensor]},
                "B": {"oneOf": [_matrix, _tensor]},
                "coercivity": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "alpha": {"type": "number", "exclusiveMinimum": 0},
                        "lambda_shift": _number,
                        "n_samples": {"type": "integer", "minimum": 1},
                        "seed": {"type": "integer", "minimum": 0},
                    },
                },
            },
        },
        "noise": {
            "type": "object",
            "additionalProperties": False,
            "required": ["horizon", "n_steps", "n_paths"],
            "properties": {
                "horizon": {"type": "number", "exclusiveMinimum": 0},
                "n_steps": {"type": "integer", "minimum": 1},
                "n_paths": {"type": "integer", "minimum": 1},
                "marks": _vector,
                "intensities": _vector,
            },
        },
        "problem": {
            "type": "object",
            "additionalProperties": False,
            "required": ["family", "control_dim"],
            "properties": {
                "family": {"enum": ["lq", "bilinear"]},
                "control_dim": {"type": "integer", "minimum": 1},
                "initial_state": _vector,
                "drift0": _vector,
                "drift_x": _matrix,
                "control_loading": _matrix,
                "diffusion0": _vector,
                "diffusion_x": _matrix,
                "diffusion_u": _matrix,
                "jump0": _matrix,
                "jump_x": _tensor,
                "jump_u": _tensor,
                "state_weight": _weight,
                "control_weight": _weight,
                "terminal_weight": _weight,
                "constraint_vector": _vector,
                "target": _number,
                "drift_bilinear": _tensor,
                "diffusion_bilinear": _tensor,
            },
        },
        "control": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "lower": {"oneOf": [_number, _vector]},
                "upper": {"oneOf": [_number, _vector]},
                "radius": {"type": "number", "exclusiveMinimum": 0},
                "initial": {"oneOf": [_vector, _matrix]},
            },
        },
        "optimizer": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "eps0": {"type": "number", "exclusiveMinimum": 0},
                "kappa": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "max_outer": {"type": "integer", "minimum": 0},
                "tol_constraint": {"type": "number", "exclusiveMinimum": 0},
                "tol_mp": {"type": "number", "exclusiveMinimum": 0},
                "stationarity_const": {"type": "number", "exclusiveMinimum": 0},
                "armijo_c": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "max_backtracks": {"type": "integer", "minimum": 1},
                "max_inner": {"type": "integer", "minimum": 1},
                "step0": {"type": "number", "exclusiveMinimum": 0},
                "step_rule": {"enum": ["fixed", "bb1", "bb2", "abbmin"]},
                "penalize_constraint": {"type": "boolean"},
                "presolve": {"type": "boolean"},
                "resample_noise": {"type": "boolean"},
                "regression_degree": {"enum": [0, 1, 2]},
            },
        },
        "verify": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "tolerances": {"type": "object", "additionalProperties": _number},
                "only": {"type": "array", "items": {"type": "string"}},
                "mutation": {"type": ["string", "null"]},
                "study_paths": {"type": "integer", "minimum": 2},
                "n_instances": {"type": "integer", "minimum": 2},
            },
        },
    },
}

_VALIDATOR = jsonschema.Draft202012Validator(SCHEMA)


def _locate(text: str, path) -> str:
    """Best-effort line number of the JSON field at ``path``."""
    if not path:
        return ""
    key = next((p for p in reversed(list(path)) if isinstance(p, str)), None)
    if key is None:
        return ""
    needle = f'"{key}"'
    for i, line in enumerate(text.splitlines(), 1):
        if needle in line:
            return f" (line {i})"
    return ""


def validate(cfg: dict, text: str | None = None) -> dict:
    errors = sorted(_VALIDATOR.iter_errors(cfg), key=lambda e: list(e.absolute_path))
    if errors:
        msgs = []
        for e in errors:
            field = "/".join(str(p) for p in e.absolute_path) or "<root>"
            where = _locate(text, e.absolute_path) if text else ""
            msgs.append(f"{field}{where}: {e.message}")
        raise ConfigurationError("invalid config:\n  " + "\n  ".join(msgs))
    return cfg


def load_config(path) -> dict:
    with open(path) as fh:
        text = fh.read()
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(
            f"{path}: malformed JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    return validate(cfg, text)


@dataclass(frozen=True, eq=False)
class Setup:
    """Everything a run needs, built from one validated config."""

    config: dict
    space: GalerkinSpace
    pair: OperatorPair
    spec: ProblemSpec
    grid: TimeGrid
    markspace: MarkSpace
    n_paths: int
    seed: int
    initial_control: ControlProcess
    optimizer: OptimizerConfig
    coercivity: dict

    def certify(self):
        c = self.coercivity
        return check_coercivity(self.pair, self.space, c["alpha"], c["lambda_shift"],
                                c["n_samples"], c["seed"])


def _weight_matrix(value, n):
    if value is None:
        return None
    if isinstance(value, (int, float)):
        return float(value) * np.eye(n)
    return np.asarray(value, dtype=float)


def _bound(value, m, default):
    if value is None:
        return np.full(m, default)
    if isinstance(value, (int, float)):
        return np.full(m, float(value))
    return np.asarray(value, dtype=float)


def build(cfg: dict, *, seed: int | None = None, n_paths: int | None = None,
          n_steps: int | None = None) -> Setup:
    """Validate ``cfg`` and construct the solver objects; keyword overrides win."""
    cfg = copy.deepcopy(validate(cfg))
    if seed is not None:
        cfg["seed"] = int(seed)
    if n_paths is not None:
        cfg["noise"]["n_paths"] = int(n_paths)
    if n_steps is not None:
        cfg["noise"]["n_steps"] = int(n_steps)
    validate(cfg)

    sp = cfg["space"]
    n = sp["dim"]
    factory = sp.get("factory", "euclidean" if "v_weights" not in sp else None)
    if factory == "heat":
        if "viscosity" not in sp:
            raise ConfigurationError("space/viscosity is required for the heat factory")
        space = heat_space(n, sp["viscosity"])
    elif "v_weights" in sp:
        space = GalerkinSpace(n, np.asarray(sp["v_weights"], dtype=float))
    else:
        space = GalerkinSpace.euclidean(n)

    op = cfg["operators"]
    coer = dict(op.get("coercivity", {}))
    if op.get("factory") == "heat":
        visc = op.get("viscosity", sp.get("viscosity"))
        if visc is None:
            raise ConfigurationError("operators/viscosity is required for the heat factory")
        pair = make_heat_pair(space, visc)
        coer.setdefault("alpha", visc / 2)
    else:
        a = np.asarray(op.get("A", np.zeros((n, n))), dtype=float)
        b = np.asarray(op.get("B", np.zeros((n, n))), dtype=float)
        pair = OperatorPair(a, b)
        coer.setdefault("alpha", 1e-3)
    if pair.dim != n:
        raise ConfigurationError(f"operators have dimension {pair.dim}, space has {n}")
    coer.setdefault("lambda_shift", 1.0)
    coer.setdefault("n_samples", max(64, n))
    coer.setdefault("seed", 0)

    nz = cfg["noise"]
    grid = TimeGrid(float(nz["horizon"]), int(nz["n_steps"]))
    pair.check_steps(grid.n_steps)
    marks = nz.get("marks", [])
    intens = nz.get("intensities", [])
    if len(marks) != len(intens):
        raise ConfigurationError("noise/marks and noise/intensities differ in length")
    markspace = MarkSpace(np.asarray(marks, dtype=float), np.asarray(intens, dtype=float))

    pb = dict(cfg["problem"])
    family = pb.pop("family")
    m = pb.pop("control_dim")
    ctl = cfg.get("control", {})
    cset = ControlSet(_bound(ctl.get("lower"), m, -np.inf), _bound(ctl.get("upper"), m, np.inf))
    if cset.dim != m:
        raise ConfigurationError("control bounds do not match problem/control_dim")
    radius = float(ctl.get("radius", DEFAULT_RADIUS))
    for key in ("state_weight", "control_weight", "terminal_weight"):
        if key in pb:
            pb[key] = _weight_matrix(pb[key], m if key == "control_weight" else n)
    kwargs = {k: (np.asarray(v, dtype=float) if isinstance(v, list) else v) for k, v in pb.items()}
    common = dict(control_dim=m, n_marks=markspace.size, control_set=cset, radius=radius)
    if family == "lq":
        if "drift_bilinear" in kwargs or "diffusion_bilinear" in kwargs:
            raise ConfigurationError("bilinear terms need family 'bilinear'")
        spec = make_lq_problem(space, pair, **common, **kwargs)
    else:
        spec = make_bilinear_problem(space, pair, **common, **kwargs)

    init = ctl.get("initial")
    if init is None:
        values = np.zeros((grid.n_steps, m))
    else:
        arr = np.asarray(init, dtype=float)
        values = np.tile(arr, (grid.n_steps, 1)) if arr.ndim == 1 else arr
        if values.shape != (grid.n_steps, m):
            raise ConfigurationError(
                f"control/initial has shape {values.shape}, expected ({grid.n_steps}, {m})")
    control = ControlProcess(values, grid.dt, radius)
    opt = OptimizerConfig.from_dict(cfg.get("optimizer", {}))
    return Setup(cfg, space, pair, spec, grid, markspace, int(nz["n_paths"]),
                 int(cfg.get("seed", 0)), control, opt, coer)


def _is_numeric_list(v) -> bool:
    return isinstance(v, list) and all(isinstance(x, (int, float)) and not isinstance(x, bool)
                                       for x in v)


def _format(v, indent: int) -> str:
    pad = " " * indent
    if isinstance(v, dict):
        if not v:
            return "{}"
        items = [f'{pad}  {json.dumps(k)}: {_format(x, indent + 2)}' for k, x in v.items()]
        return "{\n" + ",\n".join(items) + "\n" + pad + "}"
    if _is_numeric_list(v):
        return json.dumps(v)
    if isinstance(v, list):
        if not v:
            return "[]"
        items = [pad + "  " + _format(x, indent + 2) for x in v]
        return "[\n" + ",\n".join(items) + "\n" + pad + "]"
    return json.dumps(v)


def dumps(cfg: dict) -> str:
    """JSON text with one line per numeric row, so matrices stay readable."""
    return _format(cfg, 0) + "\n"
