"""Objective terms and the assembled per-stage cost.

All terms are least-squares penalties except the bare end-time term, which
is linear in T.  The position penalty splits the reference error into a lag
component along the local path tangent and a contour component orthogonal
to it, so schedule errors and corridor errors can be weighted separately.

Every term carries an analytic gradient with respect to the full stage
context (x, u, Theta, v, T); the solver consumes these through residual
Jacobians, the tests check them against finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .model import CH_PHI_G, CH_PSI_G, CH_PSI_Q, JERK, NU, NX, POS, VEL
from .path import QuadraticLocalFit, TANGENT_EPSILON

DEFAULT_TANGENT = np.array([1.0, 0.0, 0.0])


class DegenerateTangentError(ValueError):
    """Path tangent too short to define a lag direction and no fallback given."""


@dataclass(frozen=True)
class CostWeights:
    """Weights of the stage objective; zero disables a term."""

    w_p: float = 1.0         # position (lag/contour) penalty
    q_lag: float = 2.0       # lag entry of the 2x2 diagonal position metric
    q_contour: float = 1.0   # contour entry
    w_psi: float = 1.0       # camera yaw penalty
    w_phi: float = 1.0       # gimbal pitch penalty
    w_j: float = 10.0        # squared-jerk smoothness penalty
    w_end: float = 1.0       # linear end-time penalty
    w_len: float = 0.0       # squared (t_len - T) penalty
    w_t: float = 0.0         # timing-reference penalty
    w_vel: float = 0.0       # speed-reference penalty
    w_prog: float = 0.1      # progress-input regularizer
    t_len: float | None = None  # s, target duration for the length penalty

    def __post_init__(self):
        weights = (self.w_p, self.w_psi, self.w_phi, self.w_j, self.w_end,
                   self.w_len, self.w_t, self.w_vel, self.w_prog)
        if any(w < 0 or not np.isfinite(w) for w in weights):
            raise ValueError("weights must be finite and >= 0")
        if self.q_lag <= 0 or self.q_contour <= 0:
            raise ValueError("position metric entries must be > 0")
        if self.w_len > 0:
            if self.w_end != 0:
                raise ValueError("length penalty and end-time penalty are exclusive")
            if self.t_len is None or self.t_len <= 0:
                raise ValueError("length penalty needs a positive t_len")

    def with_overrides(self, **kwargs) -> "CostWeights":
        return replace(self, **kwargs)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in (
            "w_p", "q_lag", "q_contour", "w_psi", "w_phi", "w_j", "w_end",
            "w_len", "w_t", "w_vel", "w_prog")}
        if self.t_len is not None:
            d["t_len"] = self.t_len
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "CostWeights":
        return cls(**data)


PRESETS = {
    # measured-shot defaults: light smoothing, free end time
    "survey": CostWeights(w_p=1.0, q_lag=2.0, q_contour=1.0, w_psi=1.0,
                          w_phi=1.0, w_j=10.0, w_end=1.0, w_prog=0.1),
    # editing defaults: heavy smoothing until a timing/speed reference is active
    "interactive": CostWeights(w_p=1.0, q_lag=2.0, q_contour=1.0, w_psi=1.0,
                               w_phi=1.0, w_j=100.0, w_end=1.0, w_prog=0.1),
}

QUASI_HARD_W_T = 1e4  # dominates the other terms by >= 2 orders of magnitude


def preset_weights(name: str) -> CostWeights:
    try:
        return PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; have {sorted(PRESETS)}") from None


def _eval1(ref, theta: float) -> tuple[float, float]:
    """Scalar value/derivative from an overlay or a 1-dim quadratic fit."""
    v = ref.value(theta)
    d = ref.derivative(theta)
    return float(np.ravel(v)[0]), float(np.ravel(d)[0])


def lag_contour_error(theta: float, r: np.ndarray, fit: QuadraticLocalFit,
                      fallback_tangent: np.ndarray | None = None):
    """Split e = r_d(theta) - r into components along/orthogonal to the tangent.

    Returns (eps_lag, eps_contour, e, n).  Where the positional tangent of
    the fit degenerates, ``fallback_tangent`` is used; without one the
    condition is raised as :class:`DegenerateTangentError`.
    """
    e = fit.value(theta)[:3] - np.asarray(r, float)
    tau = fit.derivative(theta)[:3]
    norm = np.linalg.norm(tau)
    if norm <= TANGENT_EPSILON:
        if fallback_tangent is None:
            raise DegenerateTangentError(
                f"tangent norm {norm:.3g} at theta={theta:.6g}")
        n = np.asarray(fallback_tangent, float)
        n = n / np.linalg.norm(n)
    else:
        n = tau / norm
    eps_lag = float(e @ n)
    eps_contour = float(np.linalg.norm(e - eps_lag * n))
    return eps_lag, eps_contour, e, n


def position_cost(theta, r, fit, q_lag: float, q_contour: float,
                  fallback_tangent=None) -> float:
    eps_lag, eps_contour, _, _ = lag_contour_error(theta, r, fit, fallback_tangent)
    return q_lag * eps_lag**2 + q_contour * eps_contour**2


def yaw_cost(theta, psi_q, psi_g, fit) -> float:
    d = float(fit.value(theta)[3]) - (psi_q + psi_g)
    return d * d


def pitch_cost(theta, phi_g, fit) -> float:
    d = float(fit.value(theta)[4]) - phi_g
    return d * d


def end_time_cost(T: float) -> float:
    return T


def length_cost(T: float, t_len: float) -> float:
    return (t_len - T) ** 2


def jerk_cost(jerk_states) -> float:
    j = np.asarray(jerk_states, float)
    return float(j @ j)


def progress_reg(v: float) -> float:
    return v * v


def timing_cost(theta, i: int, dt: float, overlay) -> float:
    t_ref, _ = _eval1(overlay, theta)
    return (t_ref - i * dt) ** 2


def velocity_cost(theta, rdot, fit, overlay, fallback_tangent=None) -> float:
    _, _, _, n = lag_contour_error(theta, np.zeros(3), fit, fallback_tangent)
    v_ref, _ = _eval1(overlay, theta)
    return (v_ref - float(np.asarray(rdot) @ n)) ** 2


@dataclass
class StageContext:
    """Everything the stage cost sees at one horizon stage."""

    i: int                     # stage index
    n_stages: int              # N; dt = T / N
    x: np.ndarray              # (24,) dynamic states
    u: np.ndarray              # (6,) inputs
    theta: float
    theta_dot: float
    v: float                   # progress input
    T: float                   # s, current end time
    fit: QuadraticLocalFit     # 5-dim reference fit for this stage
    timing: object | None = None    # overlay or 1-dim fit
    velocity: object | None = None  # overlay or 1-dim fit
    fallback_tangent: np.ndarray = field(
        default_factory=lambda: DEFAULT_TANGENT.copy())

    @property
    def dt(self) -> float:
        return self.T / self.n_stages


@dataclass
class StageCost:
    total: float
    terms: dict[str, float]          # weighted contribution per active term
    grad_x: np.ndarray               # (24,)
    grad_u: np.ndarray               # (6,)
    grad_theta: np.ndarray           # (2,) wrt (theta, theta_dot)
    grad_v: float
    grad_T: float


def _tangent_with_derivative(fit: QuadraticLocalFit, theta: float, fallback):
    """Unit tangent n and dn/dtheta; zero derivative on the fallback branch."""
    tau = fit.derivative(theta)[:3]
    norm = np.linalg.norm(tau)
    if norm <= TANGENT_EPSILON:
        n = np.asarray(fallback, float)
        return n / np.linalg.norm(n), np.zeros(3), None
    n = tau / norm
    kappa = fit.second_derivative()[:3]
    dn = (kappa - n * (n @ kappa)) / norm
    return n, dn, norm


def stage_cost(ctx: StageContext, w: CostWeights) -> StageCost:
    """Weighted sum of all active terms with its analytic gradient."""
    x = np.asarray(ctx.x, float)
    grad_x = np.zeros(NX)
    grad_u = np.zeros(NU)
    grad_theta = np.zeros(2)
    grad_v = 0.0
    grad_T = 0.0
    terms: dict[str, float] = {}
    th = ctx.theta

    needs_tangent = w.w_p > 0 or w.w_vel > 0
    if needs_tangent:
        n, dn, _ = _tangent_with_derivative(ctx.fit, th, ctx.fallback_tangent)

    if w.w_p > 0:
        r = x[POS:POS + 3]
        e = ctx.fit.value(th)[:3] - r
        tau = ctx.fit.derivative(th)[:3]
        eps_lag = e @ n
        sq_norm_e = e @ e
        c = w.w_p * (w.q_lag * eps_lag**2 + w.q_contour * (sq_norm_e - eps_lag**2))
        terms["position"] = c
        d_lag_dth = tau @ n + e @ dn
        common = 2.0 * w.w_p * (w.q_lag - w.q_contour) * eps_lag
        grad_x[POS:POS + 3] += -common * n - 2.0 * w.w_p * w.q_contour * e
        grad_theta[0] += common * d_lag_dth + 2.0 * w.w_p * w.q_contour * (e @ tau)

    if w.w_psi > 0:
        d = float(ctx.fit.value(th)[3]) - (x[POS + CH_PSI_Q] + x[POS + CH_PSI_G])
        terms["yaw"] = w.w_psi * d * d
        grad_x[POS + CH_PSI_Q] += -2.0 * w.w_psi * d
        grad_x[POS + CH_PSI_G] += -2.0 * w.w_psi * d
        grad_theta[0] += 2.0 * w.w_psi * d * float(ctx.fit.derivative(th)[3])

    if w.w_phi > 0:
        d = float(ctx.fit.value(th)[4]) - x[POS + CH_PHI_G]
        terms["pitch"] = w.w_phi * d * d
        grad_x[POS + CH_PHI_G] += -2.0 * w.w_phi * d
        grad_theta[0] += 2.0 * w.w_phi * d * float(ctx.fit.derivative(th)[4])

    if w.w_j > 0:
        j = x[JERK:JERK + 6]
        terms["jerk"] = w.w_j * float(j @ j)
        grad_x[JERK:JERK + 6] += 2.0 * w.w_j * j

    if w.w_end > 0:
        terms["end_time"] = w.w_end * ctx.T
        grad_T += w.w_end

    if w.w_len > 0:
        d = w.t_len - ctx.T
        terms["length"] = w.w_len * d * d
        grad_T += -2.0 * w.w_len * d

    if w.w_t > 0:
        if ctx.timing is None:
            raise ValueError("timing weight active but no timing reference")
        t_ref, dt_ref = _eval1(ctx.timing, th)
        elapsed = ctx.i * ctx.T / ctx.n_stages
        d = t_ref - elapsed
        terms["timing"] = w.w_t * d * d
        grad_theta[0] += 2.0 * w.w_t * d * dt_ref
        grad_T += -2.0 * w.w_t * d * (ctx.i / ctx.n_stages)

    if w.w_vel > 0:
        if ctx.velocity is None:
            raise ValueError("velocity weight active but no speed reference")
        rdot = x[VEL:VEL + 3]
        v_ref, dv_ref = _eval1(ctx.velocity, th)
        d = v_ref - float(rdot @ n)
        terms["velocity"] = w.w_vel * d * d
        grad_x[VEL:VEL + 3] += -2.0 * w.w_vel * d * n
        grad_theta[0] += 2.0 * w.w_vel * d * (dv_ref - rdot @ dn)

    if w.w_prog > 0:
        terms["progress_reg"] = w.w_prog * ctx.v * ctx.v
        grad_v += 2.0 * w.w_prog * ctx.v

    return StageCost(total=float(sum(terms.values())), terms=terms,
                     grad_x=grad_x, grad_u=grad_u, grad_theta=grad_theta,
                     grad_v=grad_v, grad_T=grad_T)
