import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pbpk_sciml import autodiff as ad
from pbpk_sciml.autodiff import Tape, Tensor
from pbpk_sciml.pkode import (
    DivergenceError,
    GridError,
    ParameterError,
    SolverConfig,
    TwoCompartmentParams,
    default_grid,
    integrate,
    march,
    one_compartment_profile,
    simulate_profile,
    simulate_profiles,
    two_compartment_rhs,
)

NOMINAL = TwoCompartmentParams(CL=5.0, V1=30.0, V2=50.0, Q=8.0)


def decay_error(method, h):
    y = integrate(lambda t, y: -y, np.array([1.0]), [0.0, 1.0], SolverConfig(method, step=h))
    return abs(y[-1, 0] - math.exp(-1.0))


def biexponential(params, dose, t):
    """Closed-form central concentration from the eigen-decomposition of the rate matrix."""
    k10, k12, k21 = params.CL / params.V1, params.Q / params.V1, params.Q / params.V2
    m = np.array([[-(k10 + k12), k21], [k12, -k21]])
    lam, vec = np.linalg.eig(m)
    coef = np.linalg.solve(vec, [dose, 0.0])
    a1 = (vec[0] * coef) @ np.exp(np.outer(lam, t))
    return np.real(a1) / params.V1


def test_rk4_convergence_order():
    errs = [decay_error("rk4", h) for h in (0.1, 0.05, 0.025, 0.0125)]
    orders = [math.log2(a / b) for a, b in zip(errs[:-1], errs[1:])]
    assert all(3.5 <= p <= 4.5 for p in orders), orders


def test_rk4_accuracy_at_step_001():
    assert decay_error("rk4", 0.01) <= 1e-8


def test_euler_first_order():
    errs = [decay_error("euler", h) for h in (0.01, 0.005)]
    assert 0.9 <= math.log2(errs[0] / errs[1]) <= 1.1


def test_step_exactly_one_exponential():
    # a single RK4 step of dy/dt=-y is the degree-4 Taylor polynomial of exp(-h)
    h = 0.3
    y = integrate(lambda t, y: -y, np.array([1.0]), [0.0, h], SolverConfig("rk4", step=h))
    assert y[-1, 0] == pytest.approx(1 - h + h**2 / 2 - h**3 / 6 + h**4 / 24, rel=1e-15)


def test_mass_conserved_without_elimination():
    p = TwoCompartmentParams(CL=0.0, V1=30.0, V2=50.0, Q=8.0)
    y = integrate(lambda t, s: two_compartment_rhs(s, p), [100.0, 0.0], default_grid())
    np.testing.assert_allclose(y.sum(axis=1), 100.0, rtol=1e-9)


def test_profile_matches_closed_form():
    prof = simulate_profile(NOMINAL)
    np.testing.assert_allclose(prof.concentrations, biexponential(NOMINAL, 100.0, prof.times), rtol=1e-6)
    assert prof.concentrations[0] == pytest.approx(100.0 / 30.0)


@settings(max_examples=25, deadline=None)
@given(st.floats(0.5, 20), st.floats(5, 80), st.floats(5, 120), st.floats(0.5, 20))
def test_profile_positive_and_decreasing(cl, v1, v2, q):
    prof = simulate_profile(TwoCompartmentParams(cl, v1, v2, q))
    c = prof.concentrations
    assert np.all(c > 0)
    # a bolus into the central compartment can only fall
    assert np.all(np.diff(c) < 0)


def test_vectorised_matches_scalar_bitwise():
    rng = np.random.default_rng(3)
    params = [TwoCompartmentParams(*rng.uniform([2, 20, 30, 4], [8, 40, 70, 12])) for _ in range(7)]
    mat = simulate_profiles(params)
    for row, p in zip(mat, params):
        np.testing.assert_array_equal(row, simulate_profile(p).concentrations)


def test_one_compartment_closed_form():
    grid = default_grid()
    prof = one_compartment_profile(5.0, 50.0, 100.0, grid)
    np.testing.assert_allclose(prof.concentrations, 2.0 * np.exp(-0.1 * grid), rtol=1e-8)


@pytest.mark.parametrize("bad", [dict(V1=0.0), dict(V2=-1.0), dict(CL=-1.0), dict(Q=float("nan"))])
def test_invalid_parameters_rejected(bad):
    kw = dict(CL=5.0, V1=30.0, V2=50.0, Q=8.0) | bad
    with pytest.raises(ParameterError):
        TwoCompartmentParams(**kw)


def test_non_monotone_grid():
    with pytest.raises(GridError, match="increasing"):
        integrate(lambda t, y: -y, [1.0], [0.0, 2.0, 1.0])


def test_step_larger_than_span():
    with pytest.raises(GridError, match="exceeds"):
        integrate(lambda t, y: -y, [1.0], [0.0, 1.0], SolverConfig(step=2.0))


def test_divergence_reports_time():
    with pytest.raises(DivergenceError) as info, np.errstate(over="ignore"):
        integrate(lambda t, y: y * y, [1.0], np.linspace(0, 2, 21))
    assert 0.9 < info.value.time <= 1.2


def test_march_differentiates_through_tensors():
    k = Tensor([[0.7]], requires_grad=True)
    grid = np.linspace(0, 1, 6)

    def loss():
        states = march(lambda t, y: ad.neg(y * k), Tensor([[1.0]]), grid, SolverConfig(substeps=2))
        return ad.sum(states[-1])

    with Tape() as tape:
        out = loss()
    ad.backward(out, tape)
    # d/dk exp(-k) = -exp(-k)
    assert k.grad[0, 0] == pytest.approx(-math.exp(-0.7), rel=1e-5)
    assert ad.check_gradients(loss, [k]) <= 1e-5
