"""Discrete quadrotor-camera dynamics.

The vehicle plus gimbal is modeled as six independent integrator chains,
one per output channel, each carrying four derivative tiers:

  channels (tier-major layout):
    x[ 0: 3] = r                 position            (m)
    x[ 3: 6] = psi_q, psi_g, phi_g   quad yaw, gimbal yaw, gimbal pitch (rad)
    x[ 6:12] = first derivatives     (m/s, rad/s)
    x[12:18] = second derivatives    (m/s^2, rad/s^2)
    x[18:24] = third derivatives     (m/s^3, rad/s^3)
    x[24]    = T                 trajectory end time (s), dT/dt = 0

Inputs u = [F_x, F_y, F_z, M_psi_q, M_psi_g, M_phi_g] drive the top of each
chain, scaled by 1/mass (translation) or 1/inertia (angles).  Gravity enters
as a constant acceleration offset on the vertical axis, so the acceleration
states hold thrust acceleration: a hovering vehicle has x[14] = +gravity.
The chain is discretized exactly (zero-order hold), which keeps the one-step
map linear for any fixed step length.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

NX = 24  # dynamic states, excluding T
NU = 6
NX_FULL = 25  # with trailing T

# tier offsets into the 24 dynamic states
POS, VEL, ACC, JERK = 0, 6, 12, 18
# channel indices within a tier
CH_X, CH_Y, CH_Z, CH_PSI_Q, CH_PSI_G, CH_PHI_G = range(6)
IDX_T = 24

_CHANNELS = ("x", "y", "z", "psi_q", "psi_g", "phi_g")
_TIERS = ("", "_dot", "_ddot", "_dddot")
STATE_NAMES = tuple(f"{ch}{tier}" for tier in _TIERS for ch in _CHANNELS)
INPUT_NAMES = ("F_x", "F_y", "F_z", "M_psi_q", "M_psi_g", "M_phi_g")


def _bounds_array(translational: float, angular: float) -> np.ndarray:
    return np.array([translational] * 3 + [angular] * 3, float)


@dataclass(frozen=True)
class ModelParams:
    """Physical parameters and box bounds.

    Defaults are tool defaults, not published values; every field can be
    overridden from a config file (see :func:`ModelParams.from_file`).
    """

    mass: float = 1.0                 # kg
    inertia: tuple[float, float, float] = (1.0, 1.0, 1.0)  # yaw_q, yaw_g, pitch_g
    gravity: float = 9.81             # m/s^2, acts along -z

    pos_bound: float = 500.0          # |r| per axis (m)
    vel_bound: float = 10.0           # m/s
    acc_bound: float = 15.0           # m/s^2 (thrust acceleration)
    jerk_bound: float = 50.0          # m/s^3
    ang_bound: float = 12.56          # rad, ~4 full turns of unwrapped angle
    ang_vel_bound: float = np.pi      # rad/s, 180 deg/s
    ang_acc_bound: float = 10.0       # rad/s^2
    ang_jerk_bound: float = 60.0      # rad/s^3
    force_bound: float = 20.0         # N per axis, snap-level input
    torque_bound: float = 5.0         # per angular channel

    t_min: float = 0.5                # s, keeps dt = T/N well conditioned
    t_max: float = 600.0

    def __post_init__(self):
        if self.mass <= 0:
            raise ValueError("mass must be positive")
        if any(i <= 0 for i in self.inertia):
            raise ValueError("inertia terms must be positive")
        vals = [self.mass, self.gravity, *self.inertia, self.pos_bound,
                self.vel_bound, self.acc_bound, self.jerk_bound,
                self.ang_bound, self.ang_vel_bound, self.ang_acc_bound,
                self.ang_jerk_bound, self.force_bound, self.torque_bound,
                self.t_min, self.t_max]
        if not all(np.isfinite(vals)):
            raise ValueError("non-finite model parameter")
        if not 0 < self.t_min < self.t_max:
            raise ValueError("need 0 < t_min < t_max")

    @property
    def x_min(self) -> np.ndarray:
        return -self.x_max

    @property
    def x_max(self) -> np.ndarray:
        return np.concatenate([
            _bounds_array(self.pos_bound, self.ang_bound),
            _bounds_array(self.vel_bound, self.ang_vel_bound),
            _bounds_array(self.acc_bound, self.ang_acc_bound),
            _bounds_array(self.jerk_bound, self.ang_jerk_bound),
        ])

    @property
    def u_min(self) -> np.ndarray:
        return -self.u_max

    @property
    def u_max(self) -> np.ndarray:
        return _bounds_array(self.force_bound, self.torque_bound)

    @property
    def channel_inertia(self) -> np.ndarray:
        """Effective inertia per channel: mass three times, then gimbal terms."""
        return np.array([self.mass] * 3 + list(self.inertia), float)

    def to_dict(self) -> dict:
        return {
            "mass": self.mass,
            "inertia": list(self.inertia),
            "gravity": self.gravity,
            "pos_bound": self.pos_bound,
            "vel_bound": self.vel_bound,
            "acc_bound": self.acc_bound,
            "jerk_bound": self.jerk_bound,
            "ang_bound": self.ang_bound,
            "ang_vel_bound": self.ang_vel_bound,
            "ang_acc_bound": self.ang_acc_bound,
            "ang_jerk_bound": self.ang_jerk_bound,
            "force_bound": self.force_bound,
            "torque_bound": self.torque_bound,
            "t_min": self.t_min,
            "t_max": self.t_max,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ModelParams":
        known = dict(data)
        inertia = known.pop("inertia", None)
        params = cls(**known) if inertia is None else cls(inertia=tuple(inertia), **known)
        return params

    @classmethod
    def from_file(cls, path) -> "ModelParams":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def with_overrides(self, **kwargs) -> "ModelParams":
        return replace(self, **kwargs)


@dataclass(frozen=True)
class DiscreteSystem:
    """Exact zero-order-hold one-step map: x' = A x + B u + g_vec."""

    A: np.ndarray        # (24, 24)
    B: np.ndarray        # (24, 6)
    g_vec: np.ndarray    # (24,)
    dt: float

    def __post_init__(self):
        for arr in (self.A, self.B, self.g_vec):
            arr.setflags(write=False)


def discretize(params: ModelParams, dt: float) -> DiscreteSystem:
    """Exact discretization of the integrator chains for step length dt."""
    if not (np.isfinite(dt) and dt > 0):
        raise ValueError(f"dt must be positive and finite, got {dt}")
    A, B, g_vec, _, _, _ = _zoh_with_derivatives(params, dt)
    return DiscreteSystem(A=A, B=B, g_vec=g_vec, dt=float(dt))


def _zoh_with_derivatives(params: ModelParams, dt: float):
    """(A, B, g) plus their derivatives in dt; closed-form polynomials."""
    A = np.eye(NX)
    dA = np.zeros((NX, NX))
    B = np.zeros((NX, NU))
    dB = np.zeros((NX, NU))
    g_vec = np.zeros(NX)
    dg = np.zeros(NX)
    inertia = params.channel_inertia
    for c in range(6):
        A[POS + c, VEL + c] = dt
        A[POS + c, ACC + c] = dt * dt / 2.0
        A[POS + c, JERK + c] = dt ** 3 / 6.0
        A[VEL + c, ACC + c] = dt
        A[VEL + c, JERK + c] = dt * dt / 2.0
        A[ACC + c, JERK + c] = dt
        dA[POS + c, VEL + c] = 1.0
        dA[POS + c, ACC + c] = dt
        dA[POS + c, JERK + c] = dt * dt / 2.0
        dA[VEL + c, ACC + c] = 1.0
        dA[VEL + c, JERK + c] = dt
        dA[ACC + c, JERK + c] = 1.0
        m = inertia[c]
        B[POS + c, c] = dt ** 4 / 24.0 / m
        B[VEL + c, c] = dt ** 3 / 6.0 / m
        B[ACC + c, c] = dt * dt / 2.0 / m
        B[JERK + c, c] = dt / m
        dB[POS + c, c] = dt ** 3 / 6.0 / m
        dB[VEL + c, c] = dt * dt / 2.0 / m
        dB[ACC + c, c] = dt / m
        dB[JERK + c, c] = 1.0 / m
    gz = -params.gravity
    g_vec[POS + CH_Z] = gz * dt * dt / 2.0
    g_vec[VEL + CH_Z] = gz * dt
    dg[POS + CH_Z] = gz * dt
    dg[VEL + CH_Z] = gz
    return A, B, g_vec, dA, dB, dg


def propagate(sys: DiscreteSystem, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    """One step of the chain; the trailing T component is carried unchanged."""
    x = np.asarray(x, float)
    u = np.asarray(u, float)
    if x.shape not in ((NX,), (NX_FULL,)):
        raise ValueError(f"state must have {NX} or {NX_FULL} entries, got {x.shape}")
    if u.shape != (NU,):
        raise ValueError(f"input must have {NU} entries, got {u.shape}")
    core = sys.A @ x[:NX] + sys.B @ u + sys.g_vec
    if x.shape == (NX,):
        return core
    return np.concatenate([core, x[NX:]])


def validate_state(x: np.ndarray) -> None:
    x = np.asarray(x)
    if x.shape != (NX_FULL,):
        raise ValueError(f"state must have {NX_FULL} entries, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("state contains non-finite entries")
    if x[IDX_T] <= 0:
        raise ValueError("trajectory end time must be positive")


def hover_state(position, yaw_q: float, yaw_g: float, pitch_g: float,
                end_time: float, params: ModelParams) -> np.ndarray:
    """At-rest 25-dim state; thrust acceleration balances gravity."""
    x = np.zeros(NX_FULL)
    x[POS:POS + 3] = np.asarray(position, float)
    x[POS + CH_PSI_Q] = yaw_q
    x[POS + CH_PSI_G] = yaw_g
    x[POS + CH_PHI_G] = pitch_g
    x[ACC + CH_Z] = params.gravity
    x[IDX_T] = end_time
    return x


def recover_forces(x: np.ndarray, params: ModelParams) -> np.ndarray:
    """Thrust force (N) and channel torques implied by the acceleration states."""
    x = np.asarray(x, float)
    acc = x[ACC:ACC + 6].copy()
    acc[CH_Z] += 0.0  # thrust acceleration already includes the gravity share
    return acc * params.channel_inertia


@dataclass(frozen=True)
class BoundViolation:
    kind: str       # "state" or "input"
    index: int
    name: str
    value: float
    lower: float
    upper: float

    @property
    def excess(self) -> float:
        return max(self.lower - self.value, self.value - self.upper)

    def __str__(self):
        return (f"{self.kind} {self.name}: {self.value:.6g} outside "
                f"[{self.lower:.6g}, {self.upper:.6g}] by {self.excess:.3g}")


def check_bounds(x: np.ndarray, u: np.ndarray | None, params: ModelParams,
                 tol: float = 0.0) -> list[BoundViolation]:
    """Every state/input component outside its box by more than tol."""
    if tol < 0:
        raise ValueError("tol must be non-negative")
    x = np.asarray(x, float)
    out: list[BoundViolation] = []
    lo, hi = params.x_min, params.x_max
    for i in range(NX):
        if x[i] < lo[i] - tol or x[i] > hi[i] + tol:
            out.append(BoundViolation("state", i, STATE_NAMES[i], float(x[i]),
                                      float(lo[i]), float(hi[i])))
    if x.shape == (NX_FULL,):
        t = x[IDX_T]
        if t < params.t_min - tol or t > params.t_max + tol:
            out.append(BoundViolation("state", IDX_T, "T", float(t),
                                      params.t_min, params.t_max))
    if u is not None:
        u = np.asarray(u, float)
        ulo, uhi = params.u_min, params.u_max
        for i in range(NU):
            if u[i] < ulo[i] - tol or u[i] > uhi[i] + tol:
                out.append(BoundViolation("input", i, INPUT_NAMES[i], float(u[i]),
                                          float(ulo[i]), float(uhi[i])))
    return out
