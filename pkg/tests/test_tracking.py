import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.linalg import solve_discrete_are

from cinetraj.model import (
    CH_PHI_G, CH_PSI_G, CH_PSI_Q, CH_X, JERK, NU, NX, ModelParams, discretize,
    hover_state,
)
from cinetraj.solver import Diagnostics, Trajectory
from cinetraj.tracking import (
    TrackerGains, default_weights, design_lqr, jerk_series, metrics, simulate,
)


def _gains(dt=0.1) -> tuple:
    sys = discretize(ModelParams(), dt)
    return sys, design_lqr(sys)


def _rollout_trajectory(n=120, dt=0.05, seed=3) -> Trajectory:
    """Dynamically consistent trajectory: roll the model under small inputs."""
    params = ModelParams()
    sys = discretize(params, dt)
    rng = np.random.default_rng(seed)
    # smooth input sequence, small enough to stay well inside the bounds
    base = rng.normal(scale=0.4, size=(8, NU))
    idx = np.linspace(0, 7, n)
    u = np.array([base[int(k)] for k in idx])
    x = np.empty((n + 1, NX + 1))
    x[0] = hover_state((0.0, 0.0, 2.0), 0.0, 0.0, 0.0, n * dt, params)
    for i in range(n):
        x[i + 1, :NX] = sys.A @ x[i, :NX] + sys.B @ u[i] + sys.g_vec
        x[i + 1, NX] = n * dt
    theta = np.linspace(0.0, 1.0, n + 1)
    diag = Diagnostics(status="converged", outer_iterations=1,
                       inner_iterations=1, outer_log=[], objective=0.0,
                       defect_residual=0.0, kkt_residual=0.0, terminal_gap=0.0,
                       per_stage_terms=[{} for _ in range(n + 1)],
                       monotone_violations=[], log_lines=[])
    return Trajectory(x=x, u=u, theta=theta, theta_dot=np.ones(n + 1),
                      v=np.zeros(n), dt=dt, T=n * dt, L=1.0,
                      knots=np.array([0.0, 1.0]), converged=True,
                      diagnostics=diag)


# --- gain design ---------------------------------------------------------------

def test_riccati_matches_scipy_dare():
    sys, gains = _gains()
    P_ref = solve_discrete_are(sys.A, sys.B, gains.Q, gains.R)
    assert_allclose(gains.P, P_ref, rtol=1e-9)
    K_ref = np.linalg.solve(gains.R + sys.B.T @ P_ref @ sys.B,
                            sys.B.T @ P_ref @ sys.A)
    assert_allclose(gains.K, K_ref, rtol=1e-7, atol=1e-9)


def test_riccati_fixed_point_residual():
    sys, gains = _gains()
    A, B, P, Q, R = sys.A, sys.B, gains.P, gains.Q, gains.R
    closed = A - B @ gains.K
    residual = Q + A.T @ P @ closed - P
    assert np.max(np.abs(residual)) <= 1e-8


def test_closed_loop_stable():
    sys, gains = _gains()
    radius = np.max(np.abs(np.linalg.eigvals(sys.A - sys.B @ gains.K)))
    assert radius < 1.0


def test_expensive_input_weakens_gain():
    sys = discretize(ModelParams(), 0.1)
    Q, R = default_weights()
    norms = [np.linalg.norm(design_lqr(sys, Q, R * scale).K)
             for scale in (1.0, 1e2, 1e4, 1e6)]
    assert all(a > b for a, b in zip(norms, norms[1:]))
    assert norms[-1] < 0.25 * norms[0]


def test_weight_validation():
    sys = discretize(ModelParams(), 0.1)
    Q, R = default_weights()
    with pytest.raises(ValueError):
        design_lqr(sys, Q, 0.0 * R)
    bad_q = Q.copy()
    bad_q[0, 0] = -1.0
    with pytest.raises(ValueError):
        design_lqr(sys, bad_q, R)


# --- closed-loop simulation ------------------------------------------------------

def test_zero_disturbance_tracks_exactly():
    traj = _rollout_trajectory()
    sys = discretize(ModelParams(), traj.dt)
    gains = design_lqr(sys)
    out = simulate(traj, gains, sigma=0.0)
    assert out.report.tracking_rms <= 1e-9
    assert_allclose(out.states, traj.x[:, :NX], atol=1e-9)


def test_feedback_beats_open_loop_under_disturbance():
    traj = _rollout_trajectory()
    sys = discretize(ModelParams(), traj.dt)
    gains = design_lqr(sys)
    for seed in range(10):
        on = simulate(traj, gains, sigma=0.1, seed=seed)
        off = simulate(traj, gains, sigma=0.1, seed=seed, feedback=False)
        assert on.report.tracking_rms < off.report.tracking_rms
        assert on.report.tracking_rms < 0.1


def test_simulation_deterministic():
    traj = _rollout_trajectory()
    gains = design_lqr(discretize(ModelParams(), traj.dt))
    a = simulate(traj, gains, sigma=0.2, seed=7)
    b = simulate(traj, gains, sigma=0.2, seed=7)
    assert np.array_equal(a.states, b.states)
    assert a.report.tracking_rms == b.report.tracking_rms


# --- metrics ----------------------------------------------------------------------

def test_metric_units_and_values():
    traj = _rollout_trajectory(n=10)
    # overwrite the jerk states with known values
    traj.x[:, JERK:JERK + 6] = 0.0
    traj.x[:, JERK + CH_X] = 2.0                   # constant 2 m/s^3 on x
    traj.x[:, JERK + CH_PSI_Q] = np.radians(3.0)   # 3 deg/s^3 split between
    traj.x[:, JERK + CH_PSI_G] = 0.0               # vehicle and gimbal yaw
    traj.x[:, JERK + CH_PHI_G] = np.radians(4.0)
    report = metrics(traj)
    assert report.mean_sq_jerk == pytest.approx(4.0)
    assert report.max_jerk == pytest.approx(2.0)
    assert report.mean_sq_ang_jerk == pytest.approx(25.0)  # 3-4-5 in degrees
    assert report.max_ang_jerk == pytest.approx(5.0)
    assert report.bound_violations == 0


def test_angular_metric_sums_vehicle_and_gimbal_yaw():
    traj = _rollout_trajectory(n=10)
    traj.x[:, JERK:JERK + 6] = 0.0
    traj.x[:, JERK + CH_PSI_Q] = np.radians(1.5)
    traj.x[:, JERK + CH_PSI_G] = np.radians(1.5)
    report = metrics(traj)
    assert report.mean_sq_ang_jerk == pytest.approx(9.0)


def test_jerk_series_matches_metrics():
    traj = _rollout_trajectory(n=30)
    series = jerk_series(traj)
    report = metrics(traj)
    assert len(series["t"]) == 31
    assert np.mean(series["sq_jerk"]) == pytest.approx(report.mean_sq_jerk)
    assert np.mean(series["sq_ang_jerk"]) == pytest.approx(
        report.mean_sq_ang_jerk)
