import json

import numpy as np
import pytest
from numpy.testing import assert_allclose

from cinetraj import model
from cinetraj.model import (
    ACC, CH_Z, IDX_T, JERK, NU, NX, POS, VEL,
    BoundViolation, DiscreteSystem, ModelParams, check_bounds, discretize,
    hover_state, propagate, validate_state,
)


def _continuous_rhs(x, u, params):
    """Hand-written chain ODE, kept independent of the discretization code."""
    dx = np.zeros(NX)
    inertia = params.channel_inertia
    for c in range(6):
        dx[POS + c] = x[VEL + c]
        dx[VEL + c] = x[ACC + c]
        dx[ACC + c] = x[JERK + c]
        dx[JERK + c] = u[c] / inertia[c]
    dx[VEL + CH_Z] -= params.gravity
    return dx


def _integrate_fine(x0, u, dt, params, substeps=2000):
    """RK4 reference integration with constant input over [0, dt]."""
    h = dt / substeps
    x = np.array(x0, float)
    for _ in range(substeps):
        k1 = _continuous_rhs(x, u, params)
        k2 = _continuous_rhs(x + 0.5 * h * k1, u, params)
        k3 = _continuous_rhs(x + 0.5 * h * k2, u, params)
        k4 = _continuous_rhs(x + h * k3, u, params)
        x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return x


def test_zoh_matches_fine_integration():
    rng = np.random.default_rng(7)
    params = ModelParams(mass=0.85, inertia=(0.9, 1.3, 0.6), gravity=9.81)
    for dt in (0.05, 0.2, 0.7):
        sys = discretize(params, dt)
        for _ in range(5):
            x0 = rng.normal(scale=2.0, size=NX)
            u = rng.normal(scale=5.0, size=NU)
            got = propagate(sys, x0, u)
            want = _integrate_fine(x0, u, dt, params)
            scale = np.maximum(np.abs(want), 1.0)
            assert np.max(np.abs(got - want) / scale) < 1e-6


def test_hover_is_equilibrium():
    params = ModelParams()
    x0 = hover_state([1.0, -2.0, 3.0], 0.4, -0.1, 0.25, end_time=5.0, params=params)
    sys = discretize(params, 0.2)
    x1 = propagate(sys, x0, np.zeros(NU))
    assert_allclose(x1, x0, atol=1e-12)


def test_freefall_from_zero_thrust():
    params = ModelParams()
    sys = discretize(params, 0.3)
    x1 = propagate(sys, np.zeros(NX), np.zeros(NU))
    assert_allclose(x1[POS + CH_Z], -0.5 * 9.81 * 0.3**2)
    assert_allclose(x1[VEL + CH_Z], -9.81 * 0.3)
    mask = np.ones(NX, bool)
    mask[[POS + CH_Z, VEL + CH_Z]] = False
    assert_allclose(x1[mask], 0.0)


def test_two_half_steps_equal_one_full_step():
    params = ModelParams(mass=1.7)
    half = discretize(params, 0.11)
    full = discretize(params, 0.22)
    rng = np.random.default_rng(3)
    x0 = rng.normal(size=NX)
    u = rng.normal(size=NU)
    via_half = propagate(half, propagate(half, x0, u), u)
    assert_allclose(via_half, propagate(full, x0, u), rtol=1e-12, atol=1e-12)


def test_input_scaling_with_mass_and_inertia():
    a = discretize(ModelParams(mass=1.0, inertia=(2.0, 1.0, 1.0)), 0.2)
    b = discretize(ModelParams(mass=2.0, inertia=(2.0, 1.0, 1.0)), 0.2)
    assert_allclose(b.B[:, :3], 0.5 * a.B[:, :3])
    assert_allclose(b.B[:, 3:], a.B[:, 3:])
    assert_allclose(a.B[JERK + 0, 0], 0.2)        # dt / mass
    assert_allclose(a.B[JERK + 3, 3], 0.1)        # dt / inertia_psi_q


def test_end_time_state_is_carried_unchanged():
    params = ModelParams()
    sys = discretize(params, 0.2)
    x0 = hover_state([0, 0, 1], 0, 0, 0, end_time=12.0, params=params)
    x1 = propagate(sys, x0, np.zeros(NU))
    assert x1.shape == (25,)
    assert x1[IDX_T] == 12.0


def test_stage_count_gives_exact_step():
    # T = 12 s over 60 stages
    assert 12.0 / 60 == 0.2


def test_zoh_derivatives_match_finite_differences():
    params = ModelParams(mass=0.9, inertia=(1.1, 0.8, 1.4))
    dt = 0.23
    eps = 1e-6
    _, _, _, dA, dB, dg = model._zoh_with_derivatives(params, dt)
    Ap, Bp, gp, _, _, _ = model._zoh_with_derivatives(params, dt + eps)
    Am, Bm, gm, _, _, _ = model._zoh_with_derivatives(params, dt - eps)
    assert_allclose(dA, (Ap - Am) / (2 * eps), atol=1e-7)
    assert_allclose(dB, (Bp - Bm) / (2 * eps), atol=1e-7)
    assert_allclose(dg, (gp - gm) / (2 * eps), atol=1e-7)


def test_discretize_rejects_bad_step():
    params = ModelParams()
    for dt in (0.0, -0.1, np.nan, np.inf):
        with pytest.raises(ValueError):
            discretize(params, dt)


def test_system_matrices_are_read_only():
    sys = discretize(ModelParams(), 0.2)
    with pytest.raises(ValueError):
        sys.A[0, 0] = 99.0


def test_check_bounds_reports_named_violations():
    params = ModelParams()
    x = hover_state([0, 0, 1], 0, 0, 0, end_time=5.0, params=params)
    x[VEL + 0] = 11.5
    u = np.zeros(NU)
    u[3] = -6.0
    out = check_bounds(x, u, params)
    kinds = {(v.kind, v.name) for v in out}
    assert ("state", "x_dot") in kinds
    assert ("input", "M_psi_q") in kinds
    vel_violation = next(v for v in out if v.name == "x_dot")
    assert_allclose(vel_violation.excess, 1.5)
    assert "x_dot" in str(vel_violation)


def test_check_bounds_tolerance():
    params = ModelParams()
    x = hover_state([0, 0, 1], 0, 0, 0, end_time=5.0, params=params)
    x[VEL + 1] = params.vel_bound + 5e-5
    assert check_bounds(x, None, params, tol=1e-4) == []
    assert len(check_bounds(x, None, params, tol=0.0)) == 1


def test_check_bounds_covers_end_time():
    params = ModelParams()
    x = hover_state([0, 0, 1], 0, 0, 0, end_time=0.2, params=params)
    out = check_bounds(x, None, params)
    assert [v.name for v in out] == ["T"]


def test_validate_state():
    params = ModelParams()
    x = hover_state([0, 0, 1], 0, 0, 0, end_time=5.0, params=params)
    validate_state(x)
    bad = x.copy()
    bad[IDX_T] = -1.0
    with pytest.raises(ValueError):
        validate_state(bad)
    with pytest.raises(ValueError):
        validate_state(np.full(25, np.nan))
    with pytest.raises(ValueError):
        validate_state(np.zeros(24))


def test_params_roundtrip_through_json(tmp_path):
    params = ModelParams(mass=1.3, inertia=(0.7, 0.9, 1.1), vel_bound=8.0)
    path = tmp_path / "model.json"
    path.write_text(json.dumps(params.to_dict()))
    loaded = ModelParams.from_file(path)
    assert loaded == params


def test_params_validation():
    with pytest.raises(ValueError):
        ModelParams(mass=0.0)
    with pytest.raises(ValueError):
        ModelParams(inertia=(1.0, -1.0, 1.0))
    with pytest.raises(ValueError):
        ModelParams(t_min=2.0, t_max=1.0)


def test_hover_state_layout():
    params = ModelParams(gravity=9.81)
    x = hover_state([1, 2, 3], 0.1, 0.2, 0.3, end_time=7.0, params=params)
    assert_allclose(x[:6], [1, 2, 3, 0.1, 0.2, 0.3])
    assert_allclose(x[ACC + CH_Z], 9.81)
    assert_allclose(np.delete(x[6:24], ACC + CH_Z - 6), 0.0)
    assert x[IDX_T] == 7.0
