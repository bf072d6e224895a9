import numpy as np
import pytest
import sympy

from spde_smp.gelfand import GalerkinSpace, OperatorPair, heat_space, make_heat_pair
from spde_smp.hamiltonian import hamiltonian, hamiltonian_partials
from spde_smp.noise import MarkSpace
from spde_smp.problem import make_bilinear_problem, make_lq_problem, random_lq_problem, zero_problem

MS = MarkSpace(np.array([0.5, 1.0]), np.array([1.0, 2.0]))


def _inputs(rng, n, m, k=None, marks=2):
    lead = () if k is None else (k,)
    return (rng.standard_normal(lead + (n,)), rng.standard_normal(lead + (m,)),
            rng.standard_normal(lead + (n,)), rng.standard_normal(lead + (n,)),
            rng.standard_normal(lead + (marks, n)))


def test_zero_coefficients():
    spec = zero_problem(3, 2, 2).with_overrides(
        running_cost=lambda t, x, u: np.zeros(np.shape(x)[:-1]))
    x, u, p, q, r = _inputs(np.random.default_rng(0), 3, 2)
    assert hamiltonian(spec, MS, 0.3, x, u, p, q, r, 1.0) == 0.0
    hx, hu = hamiltonian_partials(zero_problem(3, 2, 2), MS, 0.3, x, u, p, q, r, 0.0)
    assert np.all(hx == 0) and np.all(hu == 0)


def test_single_inner_product():
    space = GalerkinSpace.euclidean(3)
    pair = OperatorPair(np.zeros((3, 3)), np.zeros((3, 3)))
    spec = make_lq_problem(space, pair, control_dim=1, drift0=[1.0, 0.0, 0.0])
    e1 = np.eye(3)[0]
    h = hamiltonian(spec, MarkSpace.empty(), 0.0, np.zeros(3), np.zeros(1), e1, np.zeros(3),
                    np.zeros((0, 3)), 0.0)
    assert h == 1.0


def test_matches_reversed_summation_oracle():
    space = heat_space(5, 0.1)
    pair = make_heat_pair(space, 0.1)
    spec = random_lq_problem(space, pair, 2, 2, 3)
    rng = np.random.default_rng(1)
    par = spec.params
    for _ in range(20):
        x, u, p, q, r = _inputs(rng, 5, 2)
        lam = rng.uniform()
        b = par["drift0"] + par["drift_x"] @ x + par["control_loading"] @ u
        g = par["diffusion0"] + par["diffusion_x"] @ x
        s = [par["jump0"][i] + par["jump_x"][i] @ x for i in range(2)]
        terms = [b[j] * p[j] for j in range(5)] + [g[j] * q[j] for j in range(5)]
        terms += [MS.intensities[i] * s[i][j] * r[i, j] for i in range(2) for j in range(5)]
        terms.append(lam * 0.5 * (x @ par["state_weight"] @ x + u @ par["control_weight"] @ u))
        ref = 0.0
        for v in reversed(terms):
            ref += v
        assert hamiltonian(spec, MS, 0.0, x, u, p, q, r, lam) == pytest.approx(ref, rel=1e-12,
                                                                                abs=1e-12)


def test_lq_control_gradient_symbolic():
    """H_u of the LQ family is D^T p + lam R u (checked by symbolic differentiation)."""
    n, m = 3, 2
    rng = np.random.default_rng(2)
    d = np.round(rng.uniform(-1, 1, (n, m)), 3)
    rmat = np.array([[2.0, 0.5], [0.5, 1.0]])
    space = GalerkinSpace.euclidean(n)
    pair = OperatorPair(np.zeros((n, n)), np.zeros((n, n)))
    spec = make_lq_problem(space, pair, control_dim=m, control_loading=d, control_weight=rmat)
    us = sympy.symbols("u0:2")
    ps = sympy.symbols("p0:3")
    lam = sympy.Symbol("lam")
    u_vec, p_vec = sympy.Matrix(us), sympy.Matrix(ps)
    h = (p_vec.T * sympy.Matrix(d) * u_vec)[0] + lam * sympy.Rational(1, 2) * \
        (u_vec.T * sympy.Matrix(rmat) * u_vec)[0]
    grad = [sympy.diff(h, ui) for ui in us]
    x, u, p, q, _ = _inputs(rng, n, m)
    subs = {**dict(zip(us, u)), **dict(zip(ps, p)), lam: 0.7}
    expected = np.array([float(gi.subs(subs)) for gi in grad])
    _, hu = hamiltonian_partials(spec, MarkSpace.empty(), 0.0, x, u, p, q, np.zeros((0, n)), 0.7)
    assert np.allclose(hu, expected, rtol=1e-12, atol=1e-12)
    assert np.allclose(hu, d.T @ p + 0.7 * rmat @ u, rtol=1e-13, atol=1e-14)


@pytest.mark.parametrize("family", ["lq", "bilinear"])
def test_partials_against_central_differences(family):
    n, m = 4, 2
    space = heat_space(n, 0.1)
    pair = make_heat_pair(space, 0.1)
    rng = np.random.default_rng(3)
    if family == "lq":
        spec, ms = random_lq_problem(space, pair, m, 2, 7), MS
    else:
        spec = make_bilinear_problem(space, pair, control_dim=m,
                                     drift_bilinear=0.2 * rng.standard_normal((m, n, n)),
                                     diffusion_bilinear=0.1 * rng.standard_normal((m, n, n)),
                                     control_loading=rng.standard_normal((n, m)),
                                     state_weight=np.eye(n))
        ms = MarkSpace.empty()
    h = 1e-5
    worst = 0.0
    for _ in range(50):
        x, u, p, q, r = _inputs(rng, n, m, marks=ms.size)
        lam = rng.uniform()
        hx, hu = hamiltonian_partials(spec, ms, 0.2, x, u, p, q, r, lam)

        def fd(f, z):
            return np.array([(f(z + h * e) - f(z - h * e)) / (2 * h) for e in np.eye(z.size)])

        fx = fd(lambda z: hamiltonian(spec, ms, 0.2, z, u, p, q, r, lam), x)
        fu = fd(lambda z: hamiltonian(spec, ms, 0.2, x, z, p, q, r, lam), u)
        for a, b in ((hx, fx), (hu, fu)):
            worst = max(worst, np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-8))
    assert worst <= 1e-4


def test_rowwise_matches_single_evaluations():
    space = heat_space(3, 0.1)
    pair = make_heat_pair(space, 0.1)
    spec = random_lq_problem(space, pair, 2, 2, 1)
    rng = np.random.default_rng(4)
    x, u, p, q, r = _inputs(rng, 3, 2, k=7)
    rows = hamiltonian(spec, MS, 0.0, x, u, p, q, r, 0.5)
    hx, hu = hamiltonian_partials(spec, MS, 0.0, x, u, p, q, r, 0.5)
    for i in range(7):
        assert rows[i] == pytest.approx(hamiltonian(spec, MS, 0.0, x[i], u[i], p[i], q[i], r[i], 0.5),
                                        rel=1e-14)
        one = hamiltonian_partials(spec, MS, 0.0, x[i], u[i], p[i], q[i], r[i], 0.5)
        assert np.allclose(hx[i], one[0], rtol=1e-14) and np.allclose(hu[i], one[1], rtol=1e-14)
