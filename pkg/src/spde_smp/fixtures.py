"""Built-in problem configs used by the verification battery, tests and demos.

Every fixture is a plain config dict (the same shape as a JSON config
file), so ``configs/*.json`` can be regenerated from here and compared.
"""
from __future__ import annotations

import copy

import numpy as np

# Rounded so the JSON files stay readable; drawn once from default_rng(0).
_COUPLING = np.round(0.5 * np.random.default_rng(0).uniform(-1.0, 1.0, (8, 8)), 2)


def _harmonic(n, scale=1.0, sign=1):
    k = np.arange(1, n + 1)
    return [round(float(v), 6) for v in scale * (sign ** k) / k]


def lq_constrained(n_paths: int = 10_000, n_steps: int = 100) -> dict:
    """Desk-scale constrained LQ fixture: 8 heat modes, 2 controls, 2 marks."""
    n, m = 8, 2
    return {
        "schema": 1,
        "name": "lq_constrained",
        "seed": 7,
        "space": {"dim": n, "factory": "heat", "viscosity": 0.02},
        "operators": {"factory": "heat", "viscosity": 0.02},
        "noise": {"horizon": 1.0, "n_steps": n_steps, "n_paths": n_paths,
                  "marks": [0.5, 1.0], "intensities": [1.0, 2.0]},
        "problem": {
            "family": "lq",
            "control_dim": m,
            "initial_state": _harmonic(n),
            "drift_x": _COUPLING.tolist(),
            "control_loading": np.stack([_harmonic(n), _harmonic(n, sign=-1)], 1).tolist(),
            "diffusion0": _harmonic(n, 0.1),
            "jump0": [_harmonic(n, 0.05), _harmonic(n, -0.05)],
            "state_weight": 0.5,
            "control_weight": 1.0,
            "terminal_weight": 1.0,
            "constraint_vector": _harmonic(n),
            "target": 0.0,
        },
        "control": {"lower": -5.0, "upper": 5.0},
        "optimizer": {},
        "verify": {"study_paths": 2000, "n_instances": 10},
    }


def lq_unconstrained(n_paths: int = 10_000, n_steps: int = 100) -> dict:
    """Same dynamics with the constraint dropped from the penalty."""
    cfg = lq_constrained(n_paths, n_steps)
    cfg["name"] = "lq_unconstrained"
    cfg["optimizer"] = {"penalize_constraint": False, "presolve": False}
    return cfg


def heat_decay(n_steps: int = 100) -> dict:
    """Pure heat equation started in the first mode, no noise and no cost."""
    n = 4
    return {
        "schema": 1,
        "name": "heat_decay",
        "seed": 0,
        "space": {"dim": n, "factory": "heat", "viscosity": 1.0},
        "operators": {"factory": "heat", "viscosity": 1.0},
        "noise": {"horizon": 0.1, "n_steps": n_steps, "n_paths": 4},
        "problem": {"family": "lq", "control_dim": 1,
                    "initial_state": [1.0] + [0.0] * (n - 1)},
    }


def zero_problem(n_paths: int = 16, n_steps: int = 10) -> dict:
    """Nothing moves: zero operators, zero coefficients, zero costs."""
    n = 3
    return {
        "schema": 1,
        "name": "zero",
        "seed": 0,
        "space": {"dim": n},
        "operators": {"A": np.zeros((n, n)).tolist(), "B": np.zeros((n, n)).tolist()},
        "noise": {"horizon": 1.0, "n_steps": n_steps, "n_paths": n_paths},
        "problem": {"family": "lq", "control_dim": 1, "initial_state": [0.5, -1.0, 2.0],
                    "control_weight": 1.0},
        "optimizer": {"max_outer": 0},
    }


def bilinear_demo(n_paths: int = 4000, n_steps: int = 50) -> dict:
    """Multiplicative noise and a control-dependent drift loading."""
    cfg = lq_constrained(n_paths, n_steps)
    n = cfg["space"]["dim"]
    cfg["name"] = "bilinear_demo"
    cfg["problem"]["family"] = "bilinear"
    cfg["problem"]["diffusion_x"] = (0.1 * np.eye(n)).tolist()
    bil = np.zeros((2, n, n))
    bil[0] = 0.1 * np.eye(n)
    cfg["problem"]["drift_bilinear"] = bil.tolist()
    return cfg


FIXTURES = {
    "lq_constrained": lq_constrained,
    "lq_unconstrained": lq_unconstrained,
    "heat_decay": heat_decay,
    "zero": zero_problem,
    "bilinear_demo": bilinear_demo,
}


def fixture(name: str, **kw) -> dict:
    return copy.deepcopy(FIXTURES[name](**kw))
