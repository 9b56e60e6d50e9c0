"""Feed-forward LQR tracking and the smoothness numbers used to judge runs.

The optimizer hands back open-loop inputs and the full derivative chain, so
a tracker only has to correct deviations: u = u_ff + K (x_ref - x).  The
gain comes from the standard discrete-time infinite-horizon Riccati
recursion on the same ZOH model the planner used.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import (ACC, CH_PHI_G, CH_PSI_G, CH_PSI_Q, CH_X, JERK, NU, NX,
                    POS, VEL, DiscreteSystem, ModelParams, discretize)
from .solver import SolverSettings, Trajectory

# per-tier state weights: track position hard, damp the derivatives
DEFAULT_STATE_WEIGHTS = (100.0, 10.0, 1.0, 0.1)
DEFAULT_INPUT_WEIGHT = 0.01

RICCATI_TOL = 1e-10
RICCATI_MAX_ITER = 100_000


@dataclass(frozen=True)
class TrackerGains:
    Q: np.ndarray   # (24, 24) state-error weight
    R: np.ndarray   # (6, 6) input weight
    K: np.ndarray   # (6, 24) feedback gain
    P: np.ndarray   # (24, 24) Riccati solution


@dataclass
class MetricsReport:
    mean_sq_jerk: float            # m^2/s^6, averaged per stage
    mean_sq_ang_jerk: float        # deg^2/s^6, averaged per stage
    max_jerk: float                # m/s^3
    max_ang_jerk: float            # deg/s^3
    bound_violations: int
    tracking_rms: float | None = None   # m, closed-loop position error

    def to_dict(self) -> dict:
        d = {
            "mean_sq_jerk": self.mean_sq_jerk,
            "mean_sq_ang_jerk": self.mean_sq_ang_jerk,
            "max_jerk": self.max_jerk,
            "max_ang_jerk": self.max_ang_jerk,
            "bound_violations": self.bound_violations,
        }
        if self.tracking_rms is not None:
            d["tracking_rms"] = self.tracking_rms
        return d


def default_weights() -> tuple[np.ndarray, np.ndarray]:
    q = np.empty(NX)
    for tier, w in zip((POS, VEL, ACC, JERK), DEFAULT_STATE_WEIGHTS):
        q[tier:tier + 6] = w
    return np.diag(q), DEFAULT_INPUT_WEIGHT * np.eye(NU)


def design_lqr(sys: DiscreteSystem, Q: np.ndarray | None = None,
               R: np.ndarray | None = None) -> TrackerGains:
    """Infinite-horizon gain by Riccati fixed-point iteration.

    Iterates P <- Q + A'PA - A'PB (R + B'PB)^-1 B'PA until the update is
    below RICCATI_TOL in the max norm.
    """
    if Q is None or R is None:
        dq, dr = default_weights()
        Q = dq if Q is None else Q
        R = dr if R is None else R
    Q = np.asarray(Q, float)
    R = np.asarray(R, float)
    if np.any(np.linalg.eigvalsh(Q) < -1e-12):
        raise ValueError("state weight must be positive semi-definite")
    if np.any(np.linalg.eigvalsh(R) <= 0):
        raise ValueError("input weight must be positive definite")
    A, B = sys.A, sys.B
    P = Q.copy()
    for _ in range(RICCATI_MAX_ITER):
        BtP = B.T @ P
        K = np.linalg.solve(R + BtP @ B, BtP @ A)
        P_new = Q + A.T @ P @ (A - B @ K)
        P_new = 0.5 * (P_new + P_new.T)
        delta = float(np.max(np.abs(P_new - P)))
        P = P_new
        if delta <= RICCATI_TOL:
            break
    else:
        raise ValueError("Riccati iteration did not converge; "
                         "system/weights not stabilizable")
    BtP = B.T @ P
    K = np.linalg.solve(R + BtP @ B, BtP @ A)
    radius = float(np.max(np.abs(np.linalg.eigvals(A - B @ K))))
    if radius >= 1.0:
        raise ValueError(f"closed loop unstable (spectral radius {radius:.6f})")
    return TrackerGains(Q=Q, R=R, K=K, P=P)


@dataclass
class SimResult:
    states: np.ndarray      # (N+1, 24) closed-loop states
    inputs: np.ndarray      # (N, 6) applied inputs
    errors: np.ndarray      # (N+1,) position error norms, m
    report: MetricsReport


def simulate(traj: Trajectory, gains: TrackerGains,
             params: ModelParams | None = None, sigma: float = 0.0,
             seed: int = 0, feedback: bool = True) -> SimResult:
    """Roll the plant under feed-forward plus feedback.

    Disturbance is a zero-mean Gaussian acceleration on the translational
    channels, constant over each step (so it moves velocity by sigma*dt and
    position by sigma*dt^2/2 per unit draw).
    """
    if params is None:
        params = ModelParams()
    N = traj.n_stages
    sys = discretize(params, traj.dt)
    rng = np.random.default_rng(seed)
    x = traj.x[0, :NX].copy()
    states = np.empty((N + 1, NX))
    inputs = np.empty((N, NU))
    errors = np.empty(N + 1)
    states[0] = x
    errors[0] = float(np.linalg.norm(x[POS:POS + 3] - traj.x[0, POS:POS + 3]))
    dt = traj.dt
    for i in range(N):
        u = traj.u[i].copy()
        if feedback:
            u += gains.K @ (traj.x[i, :NX] - x)
        x = sys.A @ x + sys.B @ u + sys.g_vec
        if sigma > 0:
            a = rng.normal(scale=sigma, size=3)
            x[VEL + CH_X:VEL + CH_X + 3] += a * dt
            x[POS + CH_X:POS + CH_X + 3] += 0.5 * a * dt * dt
        states[i + 1] = x
        inputs[i] = u
        errors[i + 1] = float(np.linalg.norm(
            x[POS:POS + 3] - traj.x[i + 1, POS:POS + 3]))
    report = metrics(traj, params=params)
    report.tracking_rms = float(np.sqrt(np.mean(errors ** 2)))
    return SimResult(states=states, inputs=inputs, errors=errors,
                     report=report)


def jerk_series(traj: Trajectory) -> dict:
    """Per-stage squared jerk magnitudes, plot-ready."""
    r3 = traj.x[:, JERK + CH_X:JERK + CH_X + 3]
    psi = np.degrees(traj.x[:, JERK + CH_PSI_Q] + traj.x[:, JERK + CH_PSI_G])
    phi = np.degrees(traj.x[:, JERK + CH_PHI_G])
    return {
        "t": traj.times.tolist(),
        "sq_jerk": np.sum(r3 ** 2, axis=1).tolist(),
        "sq_ang_jerk": (psi ** 2 + phi ** 2).tolist(),
    }


def metrics(traj: Trajectory, params: ModelParams | None = None,
            settings: SolverSettings | None = None) -> MetricsReport:
    """Smoothness and feasibility numbers for one trajectory.

    Angular jerk combines the total camera yaw (vehicle plus gimbal) with
    the gimbal pitch and is reported in degrees to match the translational
    convention of metres.
    """
    if params is None:
        params = ModelParams()
    if settings is None:
        settings = SolverSettings()
    r3 = traj.x[:, JERK + CH_X:JERK + CH_X + 3]
    sq_jerk = np.sum(r3 ** 2, axis=1)
    psi = np.degrees(traj.x[:, JERK + CH_PSI_Q] + traj.x[:, JERK + CH_PSI_G])
    phi = np.degrees(traj.x[:, JERK + CH_PHI_G])
    sq_ang = psi ** 2 + phi ** 2
    return MetricsReport(
        mean_sq_jerk=float(np.mean(sq_jerk)),
        mean_sq_ang_jerk=float(np.mean(sq_ang)),
        max_jerk=float(np.sqrt(np.max(sq_jerk))),
        max_ang_jerk=float(np.sqrt(np.max(sq_ang))),
        bound_violations=len(traj.bound_violations(params, settings)),
    )
