"""Time-free geometric reference through the keyframes.

A shot is specified as a sparse sequence of 5-DOF keyframes (position,
camera yaw, camera pitch).  The reference is a monotone piecewise cubic
Hermite spline (Fritsch-Carlson slopes, no overshoot) in all five output
dimensions over the chord-length parameter theta: knot spacing equals the
3D distance between consecutive keyframe positions, so theta approximates
arc length and the terminal value L is the total chord length.

Timing and speed annotations attach to the same parameter: t_d(theta) and
v_d(theta) are monotone splines through the tagged knots.  The solver never
sees the splines directly; it works on per-stage quadratic fits
(:func:`fit_quadratic_window`), which this module also provides.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.interpolate import PchipInterpolator

TWO_PI = 2.0 * np.pi

# below this chord spacing two keyframe positions count as coincident
KNOT_EPSILON = 1e-3  # m
# below this tangent norm the positional direction is considered degenerate
TANGENT_EPSILON = 1e-6


@dataclass(frozen=True)
class Keyframe:
    """5-DOF camera pose sample, optionally tagged with a time or a speed."""

    position: tuple[float, float, float]  # m
    yaw: float                            # rad, world camera yaw
    pitch: float                          # rad, gimbal pitch
    time_tag: float | None = None         # s
    velocity_tag: float | None = None     # m/s

    def __post_init__(self):
        pos = np.asarray(self.position, float)
        if pos.shape != (3,) or not np.all(np.isfinite(pos)):
            raise ValueError(f"position must be 3 finite numbers, got {self.position}")
        object.__setattr__(self, "position", tuple(float(p) for p in pos))
        if not (np.isfinite(self.yaw) and np.isfinite(self.pitch)):
            raise ValueError("yaw/pitch must be finite")
        if self.velocity_tag is not None and self.velocity_tag < 0:
            raise ValueError(f"velocity_tag must be >= 0, got {self.velocity_tag}")

    @property
    def outputs(self) -> np.ndarray:
        """(x, y, z, yaw, pitch) row used by the reference spline."""
        return np.array([*self.position, self.yaw, self.pitch])


def validate_keyframes(keyframes) -> None:
    """Sequence-level checks; raises ValueError naming the offending index."""
    if len(keyframes) == 0:
        raise ValueError("need at least one keyframe")
    last_tag = None
    for i, kf in enumerate(keyframes):
        if kf.time_tag is None:
            continue
        if last_tag is not None and kf.time_tag <= last_tag:
            raise ValueError(
                f"time tags must be strictly increasing; keyframe {i} has "
                f"time {kf.time_tag} after {last_tag}")
        last_tag = kf.time_tag


def unwrap_angles(keyframes) -> list[Keyframe]:
    """Shift yaw/pitch by multiples of 2*pi so successive values stay close.

    The first keyframe is kept verbatim; each later angle is replaced by
    the representative nearest the previous processed value, so a hop from
    170 deg to -170 deg becomes 170 -> 190 instead of a 340 deg swing.
    """
    if len(keyframes) == 0:
        raise ValueError("need at least one keyframe")
    out = [keyframes[0]]
    for kf in keyframes[1:]:
        prev = out[-1]
        yaw = kf.yaw + TWO_PI * np.round((prev.yaw - kf.yaw) / TWO_PI)
        pitch = kf.pitch + TWO_PI * np.round((prev.pitch - kf.pitch) / TWO_PI)
        out.append(replace(kf, yaw=float(yaw), pitch=float(pitch)))
    return out


class ReferencePath:
    """Chord-length-parameterized 5D reference f_d(theta) on [0, L]."""

    def __init__(self, keyframes):
        keyframes = list(keyframes)
        if len(keyframes) < 2:
            raise ValueError("need at least 2 keyframes to build a path")
        validate_keyframes(keyframes)
        samples = np.array([kf.outputs for kf in keyframes])
        if not np.all(np.isfinite(samples)):
            raise ValueError("non-finite keyframe data")
        gaps = np.linalg.norm(np.diff(samples[:, :3], axis=0), axis=1)
        gaps = np.maximum(gaps, KNOT_EPSILON)
        knots = np.concatenate([[0.0], np.cumsum(gaps)])
        self.keyframes = keyframes
        self.knots = knots
        self.L = float(knots[-1])
        self._pchip = PchipInterpolator(knots, samples, axis=0, extrapolate=False)
        self._dpchip = self._pchip.derivative()

    def eval(self, theta: float):
        """Value and first derivative of all five dims; theta clamped to [0, L]."""
        th = np.clip(theta, 0.0, self.L)
        return np.asarray(self._pchip(th)), np.asarray(self._dpchip(th))

    def unit_tangent(self, theta: float) -> np.ndarray | None:
        """Normalized positional tangent, or None where it degenerates."""
        _, df = self.eval(theta)
        norm = np.linalg.norm(df[:3])
        if norm <= TANGENT_EPSILON:
            return None
        return df[:3] / norm

    def knot_of(self, keyframe_index: int) -> float:
        return float(self.knots[keyframe_index])


@dataclass(frozen=True)
class QuadraticLocalFit:
    """Per-dimension quadratic c0 + c1*(theta-center) + c2*(theta-center)^2.

    Valid near ``center`` only; the owning outer loop refreshes fits when
    progress values drift outside the recorded window.
    """

    center: float
    theta_lo: float
    theta_hi: float
    coeffs: np.ndarray  # (ndim, 3), constant/linear/quadratic per row

    def __post_init__(self):
        self.coeffs.setflags(write=False)

    @property
    def ndim(self) -> int:
        return self.coeffs.shape[0]

    def contains(self, theta: float) -> bool:
        return self.theta_lo <= theta <= self.theta_hi

    def value(self, theta: float) -> np.ndarray:
        d = theta - self.center
        return self.coeffs @ np.array([1.0, d, d * d])

    def derivative(self, theta: float) -> np.ndarray:
        d = theta - self.center
        return self.coeffs @ np.array([0.0, 1.0, 2.0 * d])

    def second_derivative(self) -> np.ndarray:
        return 2.0 * self.coeffs[:, 2]


def _fit_window(evaluate, domain_lo, domain_hi, center, halfwidth, samples):
    lo = max(domain_lo, center - halfwidth)
    hi = min(domain_hi, center + halfwidth)
    if hi <= lo:  # window collapsed at a domain end
        lo, hi = max(domain_lo, hi - 2 * halfwidth), min(domain_hi, lo + 2 * halfwidth)
    ths = np.linspace(lo, hi, samples)
    d = ths - center
    basis = np.stack([np.ones_like(d), d, d * d], axis=1)
    values = np.array([evaluate(t) for t in ths])
    coeffs, *_ = np.linalg.lstsq(basis, values, rcond=None)
    return lo, hi, coeffs.T


def fit_quadratic_window(path: ReferencePath, theta_center: float,
                         halfwidth: float, samples: int = 21) -> QuadraticLocalFit:
    """Least-squares quadratic of all 5 dims over a window around theta_center."""
    if halfwidth <= 0:
        raise ValueError("halfwidth must be positive")
    center = float(np.clip(theta_center, 0.0, path.L))
    lo, hi, coeffs = _fit_window(lambda t: path.eval(t)[0], 0.0, path.L,
                                 center, halfwidth, samples)
    return QuadraticLocalFit(center=center, theta_lo=lo, theta_hi=hi, coeffs=coeffs)


def fit_scalar_window(fn, domain: tuple[float, float], theta_center: float,
                      halfwidth: float, samples: int = 21) -> QuadraticLocalFit:
    """Same as fit_quadratic_window but for a scalar function of theta."""
    if halfwidth <= 0:
        raise ValueError("halfwidth must be positive")
    center = float(np.clip(theta_center, *domain))
    lo, hi, coeffs = _fit_window(lambda t: np.array([fn(t)]), domain[0], domain[1],
                                 center, halfwidth, samples)
    return QuadraticLocalFit(center=center, theta_lo=lo, theta_hi=hi, coeffs=coeffs)


class TimingOverlay:
    """Monotone reference time t_d(theta) through the time-tagged knots.

    Outside the tagged range the overlay continues with the boundary slope,
    which keeps it monotone (end slopes of monotone data are >= 0).
    """

    def __init__(self, thetas, times):
        thetas = np.asarray(thetas, float)
        times = np.asarray(times, float)
        if thetas.size < 2:
            raise ValueError("timing overlay needs at least 2 tagged keyframes")
        for i in range(1, times.size):
            if times[i] <= times[i - 1]:
                raise ValueError(
                    f"time tags must be strictly increasing; tag {i} has "
                    f"time {times[i]} after {times[i - 1]}")
        self.theta_lo, self.theta_hi = float(thetas[0]), float(thetas[-1])
        self._pchip = PchipInterpolator(thetas, times, extrapolate=False)
        self._dpchip = self._pchip.derivative()
        self._ends = (float(self._pchip(self.theta_lo)), float(self._pchip(self.theta_hi)))
        self._end_slopes = (float(self._dpchip(self.theta_lo)),
                            float(self._dpchip(self.theta_hi)))

    def value(self, theta: float) -> float:
        if theta < self.theta_lo:
            return self._ends[0] + self._end_slopes[0] * (theta - self.theta_lo)
        if theta > self.theta_hi:
            return self._ends[1] + self._end_slopes[1] * (theta - self.theta_hi)
        return float(self._pchip(theta))

    def derivative(self, theta: float) -> float:
        if theta < self.theta_lo:
            return self._end_slopes[0]
        if theta > self.theta_hi:
            return self._end_slopes[1]
        return float(self._dpchip(theta))


class VelocityOverlay:
    """Reference speed v_d(theta) >= 0; constant beyond the tagged range."""

    def __init__(self, thetas, speeds):
        thetas = np.asarray(thetas, float)
        speeds = np.asarray(speeds, float)
        if thetas.size < 1:
            raise ValueError("velocity overlay needs at least 1 tagged keyframe")
        if np.any(speeds < 0):
            raise ValueError("speed tags must be >= 0")
        self.theta_lo, self.theta_hi = float(thetas[0]), float(thetas[-1])
        self._ends = (float(speeds[0]), float(speeds[-1]))
        if thetas.size == 1:
            self._pchip = None
            self._dpchip = None
        else:
            self._pchip = PchipInterpolator(thetas, speeds, extrapolate=False)
            self._dpchip = self._pchip.derivative()

    def value(self, theta: float) -> float:
        if self._pchip is None or theta <= self.theta_lo:
            return self._ends[0] if theta <= self.theta_lo else self._ends[1]
        if theta >= self.theta_hi:
            return self._ends[1]
        return float(self._pchip(theta))

    def derivative(self, theta: float) -> float:
        if self._pchip is None or theta <= self.theta_lo or theta >= self.theta_hi:
            return 0.0
        return float(self._dpchip(theta))


def build_timing_overlay(keyframes, path: ReferencePath) -> TimingOverlay:
    pairs = [(path.knot_of(i), kf.time_tag)
             for i, kf in enumerate(keyframes) if kf.time_tag is not None]
    if len(pairs) < 2:
        raise ValueError("timing overlay needs at least 2 time-tagged keyframes")
    thetas, times = zip(*pairs)
    return TimingOverlay(thetas, times)


def build_velocity_overlay(keyframes, path: ReferencePath) -> VelocityOverlay:
    pairs = [(path.knot_of(i), kf.velocity_tag)
             for i, kf in enumerate(keyframes) if kf.velocity_tag is not None]
    if len(pairs) < 1:
        raise ValueError("velocity overlay needs at least 1 speed-tagged keyframe")
    thetas, speeds = zip(*pairs)
    return VelocityOverlay(thetas, speeds)


def keyframes_to_obj(keyframes) -> list[dict]:
    """JSON-ready list; angles in degrees at this boundary."""
    out = []
    for kf in keyframes:
        item = {
            "position": list(kf.position),
            "yaw": float(np.degrees(kf.yaw)),
            "pitch": float(np.degrees(kf.pitch)),
        }
        if kf.time_tag is not None:
            item["time"] = kf.time_tag
        if kf.velocity_tag is not None:
            item["speed"] = kf.velocity_tag
        out.append(item)
    return out


def keyframes_from_obj(obj) -> list[Keyframe]:
    """Parse the JSON keyframe array (angles in degrees)."""
    if not isinstance(obj, list):
        raise ValueError("keyframe document must be a JSON array")
    out = []
    for i, item in enumerate(obj):
        try:
            out.append(Keyframe(
                position=tuple(item["position"]),
                yaw=float(np.radians(item["yaw"])),
                pitch=float(np.radians(item["pitch"])),
                time_tag=item.get("time"),
                velocity_tag=item.get("speed"),
            ))
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"keyframe {i}: {exc}") from exc
    validate_keyframes(out)
    return out
