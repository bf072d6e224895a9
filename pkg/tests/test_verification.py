import numpy as np
import pytest

from spde_smp.errors import ConfigurationError
from spde_smp.fixtures import fixture
from spde_smp.verification import (CHECK_NAMES, DEFAULT_TOLERANCES, MUTATIONS, GROUPS,
                                   convergence_study, run_battery)

ZERO_GROUPS = ["coercivity", "partials", "forward", "adjoint", "duality", "gateaux", "metric",
               "multipliers"]


def test_every_check_has_a_tolerance():
    names = {n for v in CHECK_NAMES.values() for n in v}
    # the duality tolerance is computed per run from the standard error and bias allowance
    assert names - {"duality"} == set(DEFAULT_TOLERANCES)
    assert set(CHECK_NAMES) == set(GROUPS)


@pytest.fixture(scope="module")
def zero_report():
    return run_battery(fixture("zero"), only=ZERO_GROUPS)


def test_zero_problem_passes_with_vanishing_measurements(zero_report):
    assert zero_report.passed, zero_report.summary()
    for r in zero_report.results:
        residual = r.group in ("duality", "multipliers") or r.name in (
            "forward_conservation", "forward_jump_mean", "gateaux_fd") or r.name.startswith("adjoint")
        if residual:
            assert abs(r.measured) <= 1e-12, r


def test_zero_report_serialises(zero_report):
    d = zero_report.to_dict()
    assert d["passed"] and len(d["checks"]) == len(zero_report.results)
    assert zero_report.summary().splitlines()[-1].endswith("checks passed")


def test_cheap_groups_are_deterministic():
    cfg = fixture("lq_constrained", n_paths=1000, n_steps=20)
    only = ["partials", "noise", "forward", "metric", "multipliers"]
    a = run_battery(cfg, only=only).to_dict()
    b = run_battery(cfg, only=only).to_dict()
    assert a == b


@pytest.mark.parametrize("mutation", [m for m in MUTATIONS if m != "penalty_off"])
def test_partials_check_catches_each_mutation(mutation):
    rep = run_battery(fixture("lq_constrained", n_paths=100, n_steps=10), only=["partials"],
                      mutation=mutation)
    assert not rep.passed
    assert rep.mutation == mutation


def test_single_check_selection_and_unknown_names():
    rep = run_battery(fixture("zero"), only=["adjoint_terminal"])
    assert [r.name for r in rep.results] == ["adjoint_terminal"]
    with pytest.raises(ConfigurationError):
        run_battery(fixture("zero"), only=["no_such_check"])
    with pytest.raises(ConfigurationError):
        run_battery(fixture("zero"), only=["metric"], tolerances={"bogus": 1.0})


def test_tolerance_override_can_fail_a_check():
    rep = run_battery(fixture("lq_constrained", n_paths=500, n_steps=10), only=["noise"],
                      tolerances={"noise_dw_mean": 1e-30})
    failed = {r.name for r in rep.results if not r.passed}
    assert "noise_dw_mean" in failed


def test_heat_scheme_is_first_order_against_exact_solution():
    exact = [np.exp(-np.pi ** 2 * 0.1), 0.0, 0.0, 0.0]
    r = convergence_study(fixture("heat_decay"), [0.01, 0.005, 0.0025, 0.00125],
                          exact_terminal=exact, n_paths=4, duality=False)
    assert r["reference"] == "exact"
    assert r["observed_order"] >= 0.9


def test_noisy_scheme_has_strong_order_at_least_one_half():
    r = convergence_study(fixture("bilinear_demo"), [1 / 4, 1 / 8, 1 / 16, 1 / 32, 1 / 128],
                          n_paths=2000, duality=False)
    assert r["observed_order"] >= 0.4
    errs = [row["strong_error"] for row in r["strong"]]
    assert all(b < a for a, b in zip(errs, errs[1:]))


def test_zero_problem_study_is_exact():
    r = convergence_study(fixture("zero"), [0.1, 0.05, 0.025], path_list=[16, 64], n_paths=16)
    assert all(row["strong_error"] == 0.0 for row in r["strong"])
    assert all(row["gap"] == 0.0 for row in r["duality"])
    assert len(r["duality"]) == 6


@pytest.mark.parametrize("dts", [[0.05, 0.1], [0.1, 0.03]])
def test_study_rejects_bad_grids(dts):
    with pytest.raises(ConfigurationError):
        convergence_study(fixture("zero"), dts, duality=False)
