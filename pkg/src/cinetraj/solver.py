"""Variable-horizon trajectory optimizer.

The decision vector couples the vehicle chain states with a progress state
(theta, theta_dot) advancing along the reference path and with the total
trajectory time T, which is carried as a constant-by-dynamics state so the
step length dt = T/N stays a smooth function of the variables.  A fixed
stage count N spans the whole shot.

Two nested loops:

  outer  - freeze per-stage quadratic approximations of the reference
           spline (and of the timing/speed references) around the current
           progress values, then re-solve; repeat until the progress values
           stop moving.  Windows are re-centered between runs, which is
           what lets a local quadratic stand in for the full spline.
  inner  - sequential quadratic programming on the frozen approximation:
           Gauss-Newton Hessians of the least-squares terms, exact
           linearization of the (T-dependent) dynamics, box constraints
           and the terminal progress equality handed to the structured QP
           solver, an l1 exact-penalty merit with Armijo backtracking, and
           Levenberg regularization for step control.

After convergence the state trajectory is re-rolled from the initial state
through the exact discrete dynamics at the final T, so the returned
trajectory satisfies the model to machine precision.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import model
from .costs import (CostWeights, PRESETS, QUASI_HARD_W_T, StageContext,
                    stage_cost)
from .model import IDX_T, JERK, NU, NX, POS, VEL, ModelParams, hover_state
from .ocpqp import QPError, StageQP, TerminalQP, solve_ocp_qp
from .path import (QuadraticLocalFit, ReferencePath, TimingOverlay,
                   VelocityOverlay, build_timing_overlay,
                   build_velocity_overlay, fit_quadratic_window,
                   fit_scalar_window, unwrap_angles)

# stage variable layout: z = [x(24), T, theta, theta_dot], w = [u(6), v]
NZ = 27
NW = 7
IDX_TH = 25
IDX_THD = 26

MODES = ("auto", "fixed-length", "soft-timed", "velocity")


class SolveInputError(ValueError):
    """Invalid request (bad mode, missing tags, malformed keyframes)."""


@dataclass(frozen=True)
class ProgressState:
    theta: float
    theta_dot: float

    def __post_init__(self):
        if self.theta_dot < 0:
            raise ValueError("theta_dot must be >= 0")


@dataclass(frozen=True)
class SolverSettings:
    n_stages: int = 60
    max_outer: int = 25
    max_inner: int = 200
    outer_tol_scale: float = 1e-3      # delta = scale * L
    progress_rate_max: float = 8.0     # theta_dot upper bound
    progress_accel_max: float = 10.0   # |v| bound
    nominal_speed: float = 3.0         # m/s, sizes the initial T
    kkt_tol: float = 1e-6
    defect_tol: float = 1e-9
    step_tol: float = 1e-8
    lm_init: float = 1e-3
    lm_min: float = 1e-9
    lm_max: float = 1e8
    armijo_c: float = 1e-4


@dataclass
class SolveRequest:
    keyframes: list
    params: ModelParams = field(default_factory=ModelParams)
    weights: CostWeights = field(default_factory=lambda: PRESETS["survey"])
    mode: str = "auto"
    x0: np.ndarray | None = None       # (24,) initial dynamic state
    settings: SolverSettings = field(default_factory=SolverSettings)
    on_outer: object = None            # callable(iteration, info) -> bool
    # explicit references win over the ones derived from keyframe tags
    timing: TimingOverlay | None = None
    velocity: VelocityOverlay | None = None


def apply_mode(weights: CostWeights, mode: str) -> CostWeights:
    """Resolve the mode flag into an effective weight set."""
    if mode not in MODES:
        raise SolveInputError(f"unknown mode {mode!r}; have {MODES}")
    # heavy smoothing is an editing default; timing/speed references drop it
    w_j = weights.w_j
    if mode in ("soft-timed", "velocity") and w_j == PRESETS["interactive"].w_j:
        w_j = 10.0
    if mode == "auto":
        return weights.with_overrides(w_len=0.0, w_t=0.0, w_vel=0.0, w_j=w_j)
    if mode == "fixed-length":
        if weights.t_len is None or weights.t_len <= 0:
            raise SolveInputError("fixed-length mode needs a positive t_len")
        w_len = weights.w_len if weights.w_len > 0 else 1000.0
        return weights.with_overrides(w_end=0.0, w_len=w_len, w_t=0.0,
                                      w_vel=0.0, w_j=w_j)
    if mode == "soft-timed":
        w_t = weights.w_t if weights.w_t > 0 else 100.0
        return weights.with_overrides(w_end=0.0, w_len=0.0, w_vel=0.0,
                                      w_t=w_t, w_j=w_j)
    # velocity
    w_vel = weights.w_vel if weights.w_vel > 0 else 100.0
    return weights.with_overrides(w_end=0.0, w_len=0.0, w_t=0.0,
                                  w_vel=w_vel, w_j=w_j)


def progress_discretize(dt: float):
    """Exact one-step map of the progress double integrator."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    C = np.array([[1.0, dt], [0.0, 1.0]])
    D = np.array([0.5 * dt * dt, dt])
    return C, D


@dataclass
class DecisionVariables:
    """Full iterate of the inner solver."""

    x: np.ndarray          # (N+1, 24)
    T: np.ndarray          # (N+1,) carried end time per stage
    theta: np.ndarray      # (N+1,)
    theta_dot: np.ndarray  # (N+1,)
    u: np.ndarray          # (N, 6)
    v: np.ndarray          # (N,)

    def copy(self) -> "DecisionVariables":
        return DecisionVariables(self.x.copy(), self.T.copy(), self.theta.copy(),
                                 self.theta_dot.copy(), self.u.copy(), self.v.copy())

    @property
    def n_stages(self) -> int:
        return self.u.shape[0]


@dataclass
class InnerResult:
    vars: DecisionVariables
    converged: bool
    iterations: int
    objective: float
    defect_residual: float
    kkt_residual: float
    message: str = ""
    trace: list = field(default_factory=list)


@dataclass
class OuterLogEntry:
    iteration: int
    objective: float
    theta_shift: float
    inner_iterations: int
    defect_residual: float
    kkt_residual: float


@dataclass
class Diagnostics:
    status: str
    outer_iterations: int
    inner_iterations: int
    outer_log: list
    objective: float
    defect_residual: float
    kkt_residual: float
    terminal_gap: float
    per_stage_terms: list
    monotone_violations: list
    log_lines: list


@dataclass
class Trajectory:
    """Optimized shot: states, inputs, progress, step length and diagnostics."""

    x: np.ndarray          # (N+1, 25) with T in the trailing column
    u: np.ndarray          # (N, 6)
    theta: np.ndarray      # (N+1,)
    theta_dot: np.ndarray  # (N+1,)
    v: np.ndarray          # (N,)
    dt: float
    T: float
    L: float
    knots: np.ndarray      # keyframe parameter values
    converged: bool
    diagnostics: Diagnostics

    @property
    def n_stages(self) -> int:
        return self.u.shape[0]

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.n_stages + 1)

    def dynamics_residual(self, params: ModelParams) -> float:
        """Worst per-stage defect of the returned trajectory."""
        sys = model.discretize(params, self.dt)
        C, D = progress_discretize(self.dt)
        worst = 0.0
        for i in range(self.n_stages):
            xn = sys.A @ self.x[i, :NX] + sys.B @ self.u[i] + sys.g_vec
            worst = max(worst, float(np.max(np.abs(xn - self.x[i + 1, :NX]))))
            th = C @ [self.theta[i], self.theta_dot[i]] + D * self.v[i]
            worst = max(worst, abs(th[0] - self.theta[i + 1]),
                        abs(th[1] - self.theta_dot[i + 1]))
        return worst

    def bound_violations(self, params: ModelParams, settings: SolverSettings,
                         tol: float = 1e-4) -> list:
        out = []
        for i in range(self.n_stages + 1):
            u = self.u[i] if i < self.n_stages else None
            out.extend(model.check_bounds(self.x[i], u, params, tol=tol))
            if self.theta[i] < -tol or self.theta[i] > self.L + tol:
                out.append(("theta", i, self.theta[i]))
            if (self.theta_dot[i] < -tol
                    or self.theta_dot[i] > settings.progress_rate_max + tol):
                out.append(("theta_dot", i, self.theta_dot[i]))
            if i < self.n_stages and abs(self.v[i]) > settings.progress_accel_max + tol:
                out.append(("v", i, self.v[i]))
        return out


def keyframe_passage_times(traj: Trajectory) -> np.ndarray:
    """Time at which progress crosses each keyframe parameter value.

    Linear interpolation between the bracketing stages; first knot maps to
    t=0, a knot never reached maps to the end time.
    """
    times = np.empty(len(traj.knots))
    for k, knot in enumerate(traj.knots):
        if knot <= traj.theta[0]:
            times[k] = 0.0
            continue
        idx = np.searchsorted(traj.theta, knot, side="left")
        if idx >= len(traj.theta):
            times[k] = traj.T
            continue
        lo, hi = traj.theta[idx - 1], traj.theta[idx]
        frac = 0.0 if hi <= lo else (knot - lo) / (hi - lo)
        times[k] = (idx - 1 + frac) * traj.dt
    return times


def schedule_timing_overlay(traj: Trajectory, times=None) -> TimingOverlay:
    """Timing reference through the trajectory's own (theta_i, t_i) schedule.

    With `times` left at the trajectory's stage times this reproduces the
    solved schedule; pass a warped copy to emulate edited timings.  Stages
    where theta stalls are dropped so the interpolant stays strictly
    increasing.
    """
    if times is None:
        times = traj.times
    theta = traj.theta
    eps = 1e-9 * max(traj.L, 1.0)
    keep = [0]
    for i in range(1, len(theta)):
        if theta[i] > theta[keep[-1]] + eps:
            keep.append(i)
    if keep[-1] != len(theta) - 1:
        # terminal stage carries theta_N = L; prefer it over a stalled twin
        if len(keep) > 1:
            keep[-1] = len(theta) - 1
        else:
            raise ValueError("trajectory has no progress to build a schedule")
    idx = np.asarray(keep)
    return TimingOverlay(theta[idx], np.asarray(times, float)[idx])


@dataclass
class InnerProblem:
    """Frozen approximation handed to one run of the inner solver."""

    params: ModelParams
    weights: CostWeights
    fits: list                      # N+1 reference fits
    timing_fits: list | None        # N+1 scalar fits, or None
    velocity_fits: list | None
    L: float
    settings: SolverSettings

    @property
    def n_stages(self) -> int:
        return len(self.fits) - 1


def _zoh_cached(params, cache, dt):
    key = dt
    hit = cache.get(key)
    if hit is None:
        hit = model._zoh_with_derivatives(params, dt)
        cache[key] = hit
    return hit


def _rescale_fit(fit: QuadraticLocalFit, scale: float):
    """Reparametrize a window fit from theta to theta/scale.

    The returned fit satisfies out.value(th/scale) == fit.value(th); window
    and center shrink by the scale, polynomial coefficients grow by its
    powers.
    """
    coeffs = fit.coeffs * np.array([1.0, scale, scale * scale])
    return QuadraticLocalFit(center=fit.center / scale,
                             theta_lo=fit.theta_lo / scale,
                             theta_hi=fit.theta_hi / scale,
                             coeffs=coeffs)


def _progress_unit(prob: InnerProblem) -> float:
    """Length of one internal progress unit in path units.

    Chord-length parametrization keeps position slopes near 1, but on a
    degenerate (coincident-keyframe) path the angle references swing over a
    KNOT_EPSILON-long interval, giving fit slopes of order 1/L whose squared
    Gauss-Newton curvature drowns the Riccati sweep in rounding noise.
    Dividing theta by the worst slope makes all reference slopes O(1); for
    ordinary paths the unit stays 1 and nothing changes.
    """
    worst = 1.0
    for fit in prob.fits:
        d = fit.derivative(fit.center)
        worst = max(worst, float(np.linalg.norm(d[:3])),
                    abs(float(d[3])), abs(float(d[4])))
    for fits in (prob.timing_fits, prob.velocity_fits):
        if fits:
            for fit in fits:
                worst = max(worst, abs(float(fit.derivative(fit.center)[0])))
    return 1.0 / worst


def _scaled_problem(prob: InnerProblem, unit: float):
    """Express the progress block in units of `unit` path-lengths.

    theta, theta_dot and v are divided by the unit (the progress double
    integrator is invariant under uniform scaling); the progress
    regularizer weight absorbs unit^2 so the objective value is unchanged.
    """
    if unit == 1.0:
        return prob
    fits = [_rescale_fit(f, unit) for f in prob.fits]
    timing = ([_rescale_fit(f, unit) for f in prob.timing_fits]
              if prob.timing_fits else None)
    velocity = ([_rescale_fit(f, unit) for f in prob.velocity_fits]
                if prob.velocity_fits else None)
    settings = replace(prob.settings,
                       progress_rate_max=prob.settings.progress_rate_max / unit,
                       progress_accel_max=prob.settings.progress_accel_max / unit)
    weights = prob.weights.with_overrides(
        w_prog=prob.weights.w_prog * unit * unit)
    return InnerProblem(params=prob.params, weights=weights, fits=fits,
                        timing_fits=timing, velocity_fits=velocity,
                        L=prob.L / unit, settings=settings)


def _stage_residuals(prob: InnerProblem, i: int, x, T, th, thd, u, v,
                     fallback_n, want_jacobian: bool):
    """Weighted residual stack (and Jacobians) of stage i.

    Returns (cost, linear_T_coeff, rho, Jz, Jw, n_used).  The end-time term
    is linear and reported separately as its T coefficient.
    """
    w = prob.weights
    N = prob.n_stages
    fit = prob.fits[i]
    rows = []
    Jz_rows = []
    Jw_rows = []
    terminal_stage = i == N

    # tangent and its theta-derivative (zero when the fallback is in use)
    tau = fit.derivative(th)[:3]
    tau_norm = np.linalg.norm(tau)
    if tau_norm > 1e-6:
        n = tau / tau_norm
        kappa = fit.second_derivative()[:3]
        dn = (kappa - n * (n @ kappa)) / tau_norm
    else:
        n = fallback_n
        dn = np.zeros(3)

    def _add(rho_vec, jz=None, jw=None):
        rho_vec = np.atleast_1d(rho_vec)
        m = rho_vec.shape[0]
        rows.append(rho_vec)
        if want_jacobian:
            Jz_rows.append(np.zeros((m, NZ)) if jz is None else jz)
            Jw_rows.append(np.zeros((m, NW)) if jw is None else jw)

    if w.w_p > 0:
        e = fit.value(th)[:3] - x[POS:POS + 3]
        s_l = np.sqrt(w.w_p * w.q_lag)
        s_c = np.sqrt(w.w_p * w.q_contour)
        eps_lag = e @ n
        jz = None
        if want_jacobian:
            jz = np.zeros((1, NZ))
            jz[0, POS:POS + 3] = -s_l * n
            jz[0, IDX_TH] = s_l * (tau @ n + e @ dn)
        _add(s_l * eps_lag, jz)
        rho_c = s_c * (e - eps_lag * n)
        jz = None
        if want_jacobian:
            jz = np.zeros((3, NZ))
            jz[:, POS:POS + 3] = s_c * (-np.eye(3) + np.outer(n, n))
            jz[:, IDX_TH] = s_c * (tau - (tau @ n + e @ dn) * n - eps_lag * dn)
        _add(rho_c, jz)

    if w.w_psi > 0:
        s = np.sqrt(w.w_psi)
        rho = s * (float(fit.value(th)[3]) - x[POS + 3] - x[POS + 4])
        jz = None
        if want_jacobian:
            jz = np.zeros((1, NZ))
            jz[0, POS + 3] = -s
            jz[0, POS + 4] = -s
            jz[0, IDX_TH] = s * float(fit.derivative(th)[3])
        _add(rho, jz)

    if w.w_phi > 0:
        s = np.sqrt(w.w_phi)
        rho = s * (float(fit.value(th)[4]) - x[POS + 5])
        jz = None
        if want_jacobian:
            jz = np.zeros((1, NZ))
            jz[0, POS + 5] = -s
            jz[0, IDX_TH] = s * float(fit.derivative(th)[4])
        _add(rho, jz)

    if w.w_j > 0:
        s = np.sqrt(w.w_j)
        jz = None
        if want_jacobian:
            jz = np.zeros((6, NZ))
            jz[:, JERK:JERK + 6] = s * np.eye(6)
        _add(s * x[JERK:JERK + 6], jz)

    if w.w_len > 0:
        s = np.sqrt(w.w_len)
        jz = None
        if want_jacobian:
            jz = np.zeros((1, NZ))
            jz[0, IDX_T] = -s
        _add(s * (w.t_len - T), jz)

    if w.w_t > 0:
        tfit = prob.timing_fits[i]
        s = np.sqrt(w.w_t)
        t_ref = float(tfit.value(th)[0])
        rho = s * (t_ref - i * T / N)
        jz = None
        if want_jacobian:
            jz = np.zeros((1, NZ))
            jz[0, IDX_TH] = s * float(tfit.derivative(th)[0])
            jz[0, IDX_T] = -s * i / N
        _add(rho, jz)

    if w.w_vel > 0:
        vfit = prob.velocity_fits[i]
        s = np.sqrt(w.w_vel)
        rdot = x[VEL:VEL + 3]
        rho = s * (float(vfit.value(th)[0]) - rdot @ n)
        jz = None
        if want_jacobian:
            jz = np.zeros((1, NZ))
            jz[0, VEL:VEL + 3] = -s * n
            jz[0, IDX_TH] = s * (float(vfit.derivative(th)[0]) - rdot @ dn)
        _add(rho, jz)

    if w.w_prog > 0 and not terminal_stage:
        s = np.sqrt(w.w_prog)
        jw = None
        if want_jacobian:
            jw = np.zeros((1, NW))
            jw[0, 6] = s
        _add(s * v, None, jw)

    rho = np.concatenate(rows) if rows else np.zeros(0)
    cost = float(rho @ rho) + w.w_end * T
    if not want_jacobian:
        return cost, w.w_end, rho, None, None, n
    Jz = np.vstack(Jz_rows) if Jz_rows else np.zeros((0, NZ))
    Jw = np.vstack(Jw_rows) if Jw_rows else np.zeros((0, NW))
    return cost, w.w_end, rho, Jz, Jw, n


def _objective(prob: InnerProblem, dv: DecisionVariables) -> float:
    total = 0.0
    fallback = np.array([1.0, 0.0, 0.0])
    for i in range(prob.n_stages + 1):
        u = dv.u[i] if i < prob.n_stages else np.zeros(NU)
        v = dv.v[i] if i < prob.n_stages else 0.0
        cost, _, _, _, _, fallback = _stage_residuals(
            prob, i, dv.x[i], dv.T[i], dv.theta[i], dv.theta_dot[i], u, v,
            fallback, want_jacobian=False)
        total += cost
    return total


def _dynamics_step(params, cache, N, x, T, th, thd, u, v):
    dt = T / N
    A, B, g, dA, dB, dg = _zoh_cached(params, cache, dt)
    C, D = progress_discretize(dt)
    x_next = A @ x + B @ u + g
    th_next = th + dt * thd + 0.5 * dt * dt * v
    thd_next = thd + dt * v
    return x_next, th_next, thd_next, (A, B, g, dA, dB, dg, C, D, dt)


def _defects(prob: InnerProblem, dv: DecisionVariables, cache) -> np.ndarray:
    N = prob.n_stages
    out = np.zeros((N, NZ))
    for i in range(N):
        x_next, th_next, thd_next, _ = _dynamics_step(
            prob.params, cache, N, dv.x[i], dv.T[i], dv.theta[i],
            dv.theta_dot[i], dv.u[i], dv.v[i])
        out[i, :NX] = x_next - dv.x[i + 1]
        out[i, IDX_T] = dv.T[i] - dv.T[i + 1]
        out[i, IDX_TH] = th_next - dv.theta[i + 1]
        out[i, IDX_THD] = thd_next - dv.theta_dot[i + 1]
    return out


def _merit(prob, dv, sigma, cache):
    f = _objective(prob, dv)
    defects = _defects(prob, dv, cache)
    h = float(np.sum(np.abs(defects))) + abs(dv.theta[-1] - prob.L)
    return f + sigma * h, f, h


def _restore_feasible(prob: InnerProblem, dv: DecisionVariables,
                      cache) -> DecisionVariables:
    """Re-roll the chains from the inputs of an extrapolated iterate.

    A long jump along the extrapolation direction satisfies only the
    linearized dynamics; rolling states and progress forward from the
    clipped inputs removes the O(step^2) defects, and a uniform shift of
    the progress inputs puts the terminal progress back on L exactly, so
    the merit gate compares objectives instead of penalties.
    """
    params = prob.params
    settings = prob.settings
    N = prob.n_stages
    np.clip(dv.T, params.t_min, params.t_max, out=dv.T)
    np.clip(dv.u, params.u_min, params.u_max, out=dv.u)
    np.clip(dv.v, -settings.progress_accel_max, settings.progress_accel_max,
            out=dv.v)
    dv.T[:] = dv.T[0]
    dt = float(dv.T[0]) / N

    def roll():
        for i in range(N):
            x_next, th_next, thd_next, _ = _dynamics_step(
                params, cache, N, dv.x[i], dv.T[i], dv.theta[i],
                dv.theta_dot[i], dv.u[i], dv.v[i])
            dv.x[i + 1] = x_next
            dv.theta[i + 1] = th_next
            dv.theta_dot[i + 1] = thd_next

    roll()
    # terminal progress responds linearly to a uniform shift of v
    gap = prob.L - float(dv.theta[-1])
    dv.v += gap / (0.5 * dt * dt * N * N)
    roll()
    return dv


def solve_inner(prob: InnerProblem, dv: DecisionVariables,
                max_iter: int | None = None) -> InnerResult:
    """SQP on the frozen approximation; returns an improved iterate."""
    unit = _progress_unit(prob)
    sdv = dv.copy()
    sdv.theta = sdv.theta / unit
    sdv.theta_dot = sdv.theta_dot / unit
    sdv.v = sdv.v / unit
    res = _solve_inner_scaled(_scaled_problem(prob, unit), sdv, max_iter)
    out = res.vars
    out.theta = out.theta * unit
    out.theta_dot = out.theta_dot * unit
    out.v = out.v * unit
    return res


def _solve_inner_scaled(prob: InnerProblem, dv: DecisionVariables,
                        max_iter: int | None) -> InnerResult:
    settings = prob.settings
    N = prob.n_stages
    params = prob.params
    max_iter = settings.max_inner if max_iter is None else max_iter
    dv = dv.copy()
    cache: dict = {}
    # the merit penalty is re-estimated from the first QP's duals; a value
    # tuned for one set of fit windows misleads the line search after a refit
    lm = settings.lm_init
    sigma = 1.0
    x_lo, x_hi = params.x_min, params.x_max
    u_lo, u_hi = params.u_min, params.u_max
    last_kkt = np.inf
    message = "max iterations"
    converged = False
    it = 0
    qp_mu0 = 1.0
    prev_step, prev_it = None, -1
    trace: list = []

    for it in range(1, max_iter + 1):
        # assemble residuals, Jacobians and the linearized dynamics
        cost_total = 0.0
        grads_z = [None] * (N + 1)
        grads_w = [None] * N
        H_zz = [None] * (N + 1)
        H_zw = [None] * N
        H_ww = [None] * N
        A_list = [None] * N
        B_list = [None] * N
        c_list = [None] * N
        fallback = np.array([1.0, 0.0, 0.0])
        for i in range(N + 1):
            u = dv.u[i] if i < N else np.zeros(NU)
            v = dv.v[i] if i < N else 0.0
            cost, wT, rho, Jz, Jw, fallback = _stage_residuals(
                prob, i, dv.x[i], dv.T[i], dv.theta[i], dv.theta_dot[i], u, v,
                fallback, want_jacobian=True)
            cost_total += cost
            gz = 2.0 * Jz.T @ rho
            gz[IDX_T] += wT
            grads_z[i] = gz
            H_zz[i] = 2.0 * Jz.T @ Jz
            if i < N:
                grads_w[i] = 2.0 * Jw.T @ rho
                H_zw[i] = 2.0 * Jz.T @ Jw
                H_ww[i] = 2.0 * Jw.T @ Jw
        for i in range(N):
            x_next, th_next, thd_next, mats = _dynamics_step(
                params, cache, N, dv.x[i], dv.T[i], dv.theta[i],
                dv.theta_dot[i], dv.u[i], dv.v[i])
            A, B, g, dA, dB, dg, C, D, dt = mats
            Az = np.zeros((NZ, NZ))
            Az[:NX, :NX] = A
            Az[:NX, IDX_T] = (dA @ dv.x[i] + dB @ dv.u[i] + dg) / N
            Az[IDX_T, IDX_T] = 1.0
            Az[IDX_TH:IDX_THD + 1, IDX_TH:IDX_THD + 1] = C
            Az[IDX_TH, IDX_T] = (dv.theta_dot[i] + dt * dv.v[i]) / N
            Az[IDX_THD, IDX_T] = dv.v[i] / N
            Bw = np.zeros((NZ, NW))
            Bw[:NX, :NU] = B
            Bw[IDX_TH, 6] = D[0]
            Bw[IDX_THD, 6] = D[1]
            A_list[i] = Az
            B_list[i] = Bw
            c = np.empty(NZ)
            c[:NX] = x_next - dv.x[i + 1]
            c[IDX_T] = dv.T[i] - dv.T[i + 1]
            c[IDX_TH] = th_next - dv.theta[i + 1]
            c[IDX_THD] = thd_next - dv.theta_dot[i + 1]
            c_list[i] = c

        defect_inf = max((float(np.max(np.abs(c))) for c in c_list), default=0.0)
        eq_gap = abs(dv.theta[-1] - prob.L)

        # box bounds in step coordinates
        def _z_bounds(i):
            lo = np.empty(NZ)
            hi = np.empty(NZ)
            lo[:NX] = x_lo - dv.x[i]
            hi[:NX] = x_hi - dv.x[i]
            lo[IDX_T] = params.t_min - dv.T[i]
            hi[IDX_T] = params.t_max - dv.T[i]
            lo[IDX_TH] = 0.0 - dv.theta[i]
            hi[IDX_TH] = prob.L - dv.theta[i]
            lo[IDX_THD] = 0.0 - dv.theta_dot[i]
            hi[IDX_THD] = settings.progress_rate_max - dv.theta_dot[i]
            return lo, hi

        stages_qp = []
        for i in range(N):
            if i == 0:
                # x, theta, theta_dot pinned at stage 0; only T is free
                Q = H_zz[0][IDX_T:IDX_T + 1, IDX_T:IDX_T + 1] + lm * np.eye(1)
                q = grads_z[0][IDX_T:IDX_T + 1]
                S = H_zw[0][IDX_T:IDX_T + 1, :]
                A_i = A_list[0][:, IDX_T:IDX_T + 1]
                lo, hi = _z_bounds(0)
                z_lo = lo[IDX_T:IDX_T + 1]
                z_hi = hi[IDX_T:IDX_T + 1]
            else:
                Q = H_zz[i] + lm * np.eye(NZ)
                q = grads_z[i]
                S = H_zw[i]
                A_i = A_list[i]
                z_lo, z_hi = _z_bounds(i)
            w_lo = np.concatenate([u_lo - dv.u[i], [-settings.progress_accel_max - dv.v[i]]])
            w_hi = np.concatenate([u_hi - dv.u[i], [settings.progress_accel_max - dv.v[i]]])
            stages_qp.append(StageQP(
                Q=Q, q=q, R=H_ww[i] + lm * np.eye(NW), r=grads_w[i], S=S,
                A=A_i, B=B_list[i], c=c_list[i],
                z_lo=z_lo, z_hi=z_hi, w_lo=w_lo, w_hi=w_hi))
        lo, hi = _z_bounds(N)
        # the equality pins theta_N; a coincident upper bound would leave the
        # interior-point QP with a zero slack it cannot complement
        hi[IDX_TH] = np.inf
        eq_vec = np.zeros(NZ)
        eq_vec[IDX_TH] = 1.0
        terminal_qp = TerminalQP(Q=H_zz[N] + lm * np.eye(NZ), q=grads_z[N],
                                 z_lo=lo, z_hi=hi, eq_vec=eq_vec,
                                 eq_rhs=prob.L - dv.theta[-1])

        try:
            qp = solve_ocp_qp(stages_qp, terminal_qp, mu0=qp_mu0,
                              tol_comp=1e-12, tol_eq=1e-10, max_iter=50)
        except QPError as exc:
            trace.append(f"it {it}: qp failed ({exc}), lm -> {lm * 10:.1e}")
            qp_mu0 = 1.0
            lm = min(lm * 10.0, settings.lm_max)
            if lm >= settings.lm_max:
                message = f"QP failure: {exc}"
                break
            continue
        qp_mu0 = 1e-2

        # stationarity of the Lagrangian from the QP multipliers, projected
        # onto inactive bounds, scaled by the gradient magnitude
        g_scale = 1.0 + max(float(np.max(np.abs(grads_z[i]))) for i in range(N + 1))
        kkt = 0.0
        for i in range(N + 1):
            if i == 0:
                g_l = grads_z[0][IDX_T:IDX_T + 1].copy()
                g_l += A_list[0][:, IDX_T:IDX_T + 1].T @ qp.lam[0]
                lo_i = stages_qp[0].z_lo
                hi_i = stages_qp[0].z_hi
            else:
                g_l = grads_z[i].copy()
                if i < N:
                    g_l += A_list[i].T @ qp.lam[i]
                else:
                    g_l += qp.nu * eq_vec
                g_l -= qp.lam[i - 1]
                if i < N:
                    lo_i, hi_i = stages_qp[i].z_lo, stages_qp[i].z_hi
                else:
                    lo_i, hi_i = terminal_qp.z_lo, terminal_qp.z_hi
            # the interior point parks active variables ~1e-8 inside the box,
            # so use a wide window but drop only the sign a bound multiplier
            # could absorb
            g_l[(lo_i > -1e-5) & (g_l > 0)] = 0.0
            g_l[(hi_i < 1e-5) & (g_l < 0)] = 0.0
            kkt = max(kkt, float(np.max(np.abs(g_l))) if g_l.size else 0.0)
        for i in range(N):
            g_l = grads_w[i] + B_list[i].T @ qp.lam[i]
            g_l[(stages_qp[i].w_lo > -1e-5) & (g_l > 0)] = 0.0
            g_l[(stages_qp[i].w_hi < 1e-5) & (g_l < 0)] = 0.0
            kkt = max(kkt, float(np.max(np.abs(g_l))))
        kkt /= g_scale
        last_kkt = kkt

        step_inf = max(float(np.max(np.abs(dz))) for dz in qp.z)
        step_inf = max(step_inf, max(float(np.max(np.abs(dw))) for dw in qp.w))
        scale = 1.0 + max(float(np.max(np.abs(dv.x))), float(dv.T[0]),
                          float(np.max(dv.theta)))

        if (kkt <= settings.kkt_tol and defect_inf <= settings.defect_tol
                and eq_gap <= settings.defect_tol):
            converged = True
            message = "KKT satisfied"
            break
        if (step_inf <= settings.step_tol * scale
                and defect_inf <= settings.defect_tol
                and eq_gap <= settings.defect_tol):
            if kkt <= settings.kkt_tol * 10:
                converged = True
                message = "step size below tolerance"
                break
            if lm > 10.0 * settings.lm_min:
                # the step is small because of damping, not optimality;
                # release the damping and ask the QP again
                lm = max(lm * 0.01, settings.lm_min)
                trace.append(f"it {it}: damped stall, lm -> {lm:.1e}")
                continue
            message = "step stalled"
            break

        # penalty parameter must dominate the multipliers; duals of an
        # unconverged QP are not trusted, and a stale oversized penalty is
        # walked back so it cannot freeze the line search for good
        if qp.converged:
            dual_inf = max((float(np.max(np.abs(l))) for l in qp.lam), default=0.0)
            dual_inf = max(dual_inf, abs(qp.nu))
            sigma_want = 1.5 * dual_inf + 1e-3
            if sigma_want > sigma:
                sigma = sigma_want
            elif sigma > 5.0 * sigma_want:
                # 2x the dual bound keeps the l1 merit exact with hysteresis
                sigma = max(2.0 * sigma_want, 0.1 * sigma)

        def _candidate(alpha):
            cand = dv.copy()
            cand.T[0] = dv.T[0] + alpha * qp.z[0][0]
            for i in range(1, N + 1):
                dz = qp.z[i]
                cand.x[i] = dv.x[i] + alpha * dz[:NX]
                cand.T[i] = dv.T[i] + alpha * dz[IDX_T]
                cand.theta[i] = dv.theta[i] + alpha * dz[IDX_TH]
                cand.theta_dot[i] = dv.theta_dot[i] + alpha * dz[IDX_THD]
            for i in range(N):
                cand.u[i] = dv.u[i] + alpha * qp.w[i][:NU]
                cand.v[i] = dv.v[i] + alpha * qp.w[i][6]
            return cand

        grad_dot_step = float(grads_z[0][IDX_T] * qp.z[0][0])
        for i in range(1, N + 1):
            grad_dot_step += float(grads_z[i] @ qp.z[i])
        for i in range(N):
            grad_dot_step += float(grads_w[i] @ qp.w[i])
        phi0, f0, h0 = _merit(prob, dv, sigma, cache)
        dphi = grad_dot_step - sigma * h0
        if dphi >= 0 and h0 > 1e-12:
            # constraint correction raises the objective; grow the penalty
            # until the step is a descent direction for the merit
            sigma = max(2.0 * sigma, 1.2 * grad_dot_step / h0)
            phi0 = f0 + sigma * h0
            dphi = grad_dot_step - sigma * h0
        if dphi >= 0:
            # feasible but not a descent step: curvature model is off
            trace.append(f"it {it}: no descent (dphi {dphi:.2e}), lm -> {lm * 10:.1e}")
            lm = min(lm * 10.0, settings.lm_max)
            if lm >= settings.lm_max:
                message = "no descent direction"
                break
            continue

        alpha = 1.0
        accepted = False
        soc = ""
        while alpha >= 1e-6:
            cand = _candidate(alpha)
            phi_a, f_a, h_a = _merit(prob, cand, sigma, cache)
            if phi_a <= phi0 + settings.armijo_c * alpha * dphi:
                accepted = True
                break
            if alpha >= 0.999 and h_a > settings.defect_tol:
                # the penalty on quadratic constraint curvature can reject a
                # full step whose objective is fine (Maratos); re-rolling the
                # chains removes that term before the step is shrunk
                corr = _restore_feasible(prob, cand, cache)
                phi_c, f_c, h_c = _merit(prob, corr, sigma, cache)
                if phi_c <= phi0 + settings.armijo_c * alpha * dphi:
                    cand, phi_a, f_a, h_a = corr, phi_c, f_c, h_c
                    accepted = True
                    soc = " soc"
                    break
            alpha *= 0.5
        if not accepted:
            trace.append(f"it {it}: line search failed, lm -> {lm * 10:.1e}")
            lm = min(lm * 10.0, settings.lm_max)
            if lm >= settings.lm_max:
                message = "line search failed"
                break
            continue

        predicted = -alpha * dphi
        actual = phi0 - phi_a
        ratio = actual / predicted if predicted > 0 else 0.0
        if alpha >= 0.99 and ratio > 0.5:
            lm = max(lm * 0.33, settings.lm_min)
        elif ratio < 0.25 or alpha < 0.25:
            # a heavily backtracked step means the quadratic model cannot be
            # trusted at this radius even when the merit ratio looks fine
            lm = min(lm * 4.0, settings.lm_max)
        trace.append(
            f"it {it}: f {f_a:.8g} kkt {kkt:.2e} defect {defect_inf:.2e} "
            f"step {step_inf:.2e} alpha {alpha:.3g} lm {lm:.1e} "
            f"sigma {sigma:.1e} qp {qp.iterations}{soc}")

        # slow contraction along a fixed direction is a geometric series
        # whose remaining sum invites a single jump; the bilinear (end time,
        # progress) coupling produces exactly this pattern, and re-rolled
        # candidates are feasible so the gate compares plain objectives
        step_flat = alpha * np.concatenate([qp.z[0]] + qp.z[1:] + qp.w)
        if alpha >= 0.2 and prev_step is not None and prev_it == it - 1:
            nrm = float(np.linalg.norm(step_flat))
            pnrm = float(np.linalg.norm(prev_step))
            if nrm > 0 and pnrm > 0:
                r = nrm / pnrm
                cosine = float(step_flat @ prev_step) / (nrm * pnrm)
                if cosine >= 0.9 and 0.5 <= r <= 0.99:
                    remaining = alpha * min(r / (1.0 - r), 200.0)
                    for boost in (remaining, remaining / 2, remaining / 4):
                        if boost < alpha:
                            break
                        ext = _restore_feasible(
                            prob, _candidate(alpha + boost), cache)
                        phi_e, f_e, _ = _merit(prob, ext, sigma, cache)
                        if phi_e < phi_a and f_e < f_a:
                            cand, phi_a, f_a = ext, phi_e, f_e
                            trace.append(
                                f"it {it}: extrapolated +x{boost:.1f} "
                                f"(r {r:.3f}, f {f_e:.8g})")
                            step_flat = None
                            break
        prev_step, prev_it = (step_flat, it) if step_flat is not None \
            else (None, -1)
        dv = cand

    defects = _defects(prob, dv, cache)
    defect_inf = float(np.max(np.abs(defects))) if defects.size else 0.0
    return InnerResult(vars=dv, converged=converged, iterations=it,
                       objective=_objective(prob, dv),
                       defect_residual=defect_inf,
                       kkt_residual=last_kkt, message=message, trace=trace)


def initialize(req: SolveRequest, path: ReferencePath,
               timing=None, velocity=None) -> DecisionVariables:
    """Ramp initial guess: uniform progress, path-sampled states, zero inputs."""
    settings = req.settings
    N = settings.n_stages
    params = req.params
    L = path.L
    if req.mode == "fixed-length":
        T0 = float(req.weights.t_len)
    elif req.mode == "soft-timed" and timing is not None:
        T0 = max(float(timing.value(L)), 1.0)
    elif req.mode == "velocity" and velocity is not None:
        speeds = [max(velocity.value(th), 0.2) for th in np.linspace(0, L, 16)]
        T0 = L / float(np.mean(speeds))
    else:
        T0 = L / settings.nominal_speed
    T0 = float(np.clip(T0, params.t_min, params.t_max))
    dt = T0 / N

    theta = np.linspace(0.0, L, N + 1)
    theta_dot = np.full(N + 1, L / T0)
    theta_dot = np.clip(theta_dot, 0.0, settings.progress_rate_max)

    x = np.zeros((N + 1, NX))
    samples = np.array([path.eval(th)[0] for th in theta])
    x[:, POS:POS + 3] = samples[:, :3]
    x[:, POS + 3] = samples[:, 3]      # quad yaw carries the camera yaw
    x[:, POS + 5] = samples[:, 4]
    vel = np.zeros_like(samples)
    vel[:-1] = np.diff(samples, axis=0) / dt
    vel[-1] = vel[-2]
    x[:, VEL:VEL + 3] = vel[:, :3]
    x[:, VEL + 3] = vel[:, 3]
    x[:, VEL + 5] = vel[:, 4]
    x[:, model.ACC + 2] = params.gravity     # hover thrust offset
    x = np.clip(x, params.x_min, params.x_max)

    if req.x0 is not None:
        x[0] = np.asarray(req.x0, float)[:NX]

    return DecisionVariables(x=x, T=np.full(N + 1, T0), theta=theta,
                             theta_dot=theta_dot, u=np.zeros((N, NU)),
                             v=np.zeros(N))


def _build_problem(req: SolveRequest, weights: CostWeights,
                   path: ReferencePath, theta_centers, timing, velocity):
    settings = req.settings
    N = settings.n_stages
    halfwidth = max(path.L / N, 0.5)
    fits = [fit_quadratic_window(path, float(np.clip(th, 0.0, path.L)), halfwidth)
            for th in theta_centers]
    timing_fits = None
    velocity_fits = None
    if weights.w_t > 0:
        timing_fits = [fit_scalar_window(timing.value, (0.0, path.L),
                                         float(np.clip(th, 0.0, path.L)), halfwidth)
                       for th in theta_centers]
    if weights.w_vel > 0:
        velocity_fits = [fit_scalar_window(velocity.value, (0.0, path.L),
                                           float(np.clip(th, 0.0, path.L)), halfwidth)
                         for th in theta_centers]
    return InnerProblem(params=req.params, weights=weights, fits=fits,
                        timing_fits=timing_fits, velocity_fits=velocity_fits,
                        L=path.L, settings=settings)


def _final_rollout(prob: InnerProblem, dv: DecisionVariables) -> DecisionVariables:
    """Replay inputs through the exact dynamics at the final T."""
    N = prob.n_stages
    out = dv.copy()
    T = float(dv.T[-1])
    out.T[:] = T
    dt = T / N
    sys = model.discretize(prob.params, dt)
    C, D = progress_discretize(dt)
    for i in range(N):
        out.x[i + 1] = sys.A @ out.x[i] + sys.B @ out.u[i] + sys.g_vec
        th = C @ [out.theta[i], out.theta_dot[i]] + D * out.v[i]
        out.theta[i + 1] = th[0]
        out.theta_dot[i + 1] = th[1]
    return out


def _package(req, weights, path, prob, dv, status, outer_log, inner_total,
             inner_res, monotone_violations, log_lines) -> Trajectory:
    N = prob.n_stages
    T = float(dv.T[-1])
    dt = T / N
    x_full = np.hstack([dv.x, dv.T[:, None]])
    per_stage_terms = []
    fallback = np.array([1.0, 0.0, 0.0])
    for i in range(N + 1):
        ctx = StageContext(
            i=i, n_stages=N, x=dv.x[i],
            u=dv.u[i] if i < N else np.zeros(NU),
            theta=float(dv.theta[i]), theta_dot=float(dv.theta_dot[i]),
            v=float(dv.v[i]) if i < N else 0.0, T=T, fit=prob.fits[i],
            timing=prob.timing_fits[i] if prob.timing_fits else None,
            velocity=prob.velocity_fits[i] if prob.velocity_fits else None,
            fallback_tangent=fallback)
        out = stage_cost(ctx, weights)
        per_stage_terms.append(out.terms)
        tangent = path.unit_tangent(float(dv.theta[i]))
        if tangent is not None:
            fallback = tangent
    objective = _objective(prob, dv)
    diag = Diagnostics(
        status=status,
        outer_iterations=len(outer_log),
        inner_iterations=inner_total,
        outer_log=outer_log,
        objective=objective,
        defect_residual=inner_res.defect_residual if inner_res else np.inf,
        kkt_residual=inner_res.kkt_residual if inner_res else np.inf,
        terminal_gap=abs(float(dv.theta[-1]) - path.L),
        per_stage_terms=per_stage_terms,
        monotone_violations=monotone_violations,
        log_lines=log_lines)
    return Trajectory(x=x_full, u=dv.u.copy(), theta=dv.theta.copy(),
                      theta_dot=dv.theta_dot.copy(), v=dv.v.copy(), dt=dt, T=T,
                      L=path.L, knots=path.knots.copy(),
                      converged=(status == "converged"), diagnostics=diag)


def solve(req: SolveRequest) -> Trajectory:
    """Outer loop: refit local approximations until the progress stabilizes."""
    if len(req.keyframes) < 2:
        raise SolveInputError("need at least 2 keyframes")
    settings = req.settings
    keyframes = unwrap_angles(req.keyframes)
    try:
        path = ReferencePath(keyframes)
    except ValueError as exc:
        raise SolveInputError(str(exc)) from exc
    weights = apply_mode(req.weights, req.mode)

    timing = req.timing if weights.w_t > 0 else None
    velocity = req.velocity if weights.w_vel > 0 else None
    if weights.w_t > 0 and timing is None:
        try:
            timing = build_timing_overlay(keyframes, path)
        except ValueError as exc:
            raise SolveInputError(str(exc)) from exc
    if weights.w_vel > 0 and velocity is None:
        try:
            velocity = build_velocity_overlay(keyframes, path)
        except ValueError as exc:
            raise SolveInputError(str(exc)) from exc

    if req.x0 is None:
        kf0 = keyframes[0]
        x0_full = hover_state(kf0.position, kf0.yaw, 0.0, kf0.pitch,
                              end_time=1.0, params=req.params)
        req = replace(req, x0=x0_full[:NX])

    dv = initialize(req, path, timing, velocity)
    delta = settings.outer_tol_scale * path.L
    outer_log: list[OuterLogEntry] = []
    log_lines: list[str] = []
    monotone_violations: list[tuple] = []
    inner_total = 0
    status = "max-iterations"
    prev_objective = None
    inner_res = None
    prob = None

    for k in range(1, settings.max_outer + 1):
        theta_prev = dv.theta.copy()
        prob = _build_problem(req, weights, path, dv.theta, timing, velocity)
        inner_res = solve_inner(prob, dv)
        dv = inner_res.vars
        inner_total += inner_res.iterations
        shift = float(np.max(np.abs(dv.theta - theta_prev)))
        entry = OuterLogEntry(iteration=k, objective=inner_res.objective,
                              theta_shift=shift,
                              inner_iterations=inner_res.iterations,
                              defect_residual=inner_res.defect_residual,
                              kkt_residual=inner_res.kkt_residual)
        outer_log.append(entry)
        log_lines.append(
            f"outer {k}: objective {inner_res.objective:.6g}, "
            f"theta shift {shift:.3g}, inner iters {inner_res.iterations}, "
            f"defect {inner_res.defect_residual:.2e}, "
            f"kkt {inner_res.kkt_residual:.2e} ({inner_res.message})")
        if prev_objective is not None and inner_res.objective > prev_objective + 1e-9:
            monotone_violations.append((k, prev_objective, inner_res.objective))
            log_lines.append(
                f"outer {k}: objective rose {prev_objective:.6g} -> "
                f"{inner_res.objective:.6g} after refit")
        prev_objective = inner_res.objective

        if req.on_outer is not None and not req.on_outer(k, entry):
            status = "cancelled"
            break
        if shift < delta and inner_res.converged:
            status = "converged"
            break
        if shift < delta and k > 1:
            # fits stabilized but the inner solver is stuck short of tolerance
            status = "stagnated" if not inner_res.converged else "converged"
            break
    dv = _final_rollout(prob, dv)
    return _package(req, weights, path, prob, dv, status, outer_log,
                    inner_total, inner_res, monotone_violations, log_lines)


def solve_timed_baseline(req: SolveRequest) -> Trajectory:
    """Quasi-hard timing reference: soft-timed with a dominating weight."""
    weights = req.weights.with_overrides(w_t=QUASI_HARD_W_T, w_end=0.0)
    return solve(replace(req, weights=weights, mode="soft-timed"))
