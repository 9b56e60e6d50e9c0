"""Canned shot library and the timing perturbation used for A/B runs.

The library exists so tests, the CLI and the acceptance battery all speak
about the same shots.  Each entry is a plain keyframe list plus the mode it
is meant to exercise; nothing here touches the solver.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import PchipInterpolator

from .path import Keyframe

PI = np.pi


@dataclass(frozen=True)
class CannedScenario:
    name: str
    keyframes: tuple
    mode: str = "auto"
    description: str = ""
    weight_overrides: dict = field(default_factory=dict)


def _flyby() -> tuple:
    # wide lateral pass with a full 180 degree look-back
    return (
        Keyframe(position=(0.0, -10.0, 3.0), yaw=0.0, pitch=0.0),
        Keyframe(position=(6.0, -3.0, 3.0), yaw=0.9, pitch=-0.15),
        Keyframe(position=(6.0, 3.0, 3.0), yaw=2.2, pitch=-0.15),
        Keyframe(position=(0.0, 10.0, 3.0), yaw=PI, pitch=0.0),
    )


def _pure_rotation() -> tuple:
    # coincident positions: the path degenerates to the epsilon chord and
    # all motion lives in the angle channels
    return (
        Keyframe(position=(2.0, 1.0, 2.0), yaw=0.0, pitch=0.0),
        Keyframe(position=(2.0, 1.0, 2.0), yaw=PI, pitch=-0.3),
    )


def _crane() -> tuple:
    # vertical rise with a tilt-down; smallest translation in the library.
    # The interior keyframe is off the midpoint so retiming it has
    # consequences.
    return (
        Keyframe(position=(1.0, 0.0, 1.0), yaw=0.5, pitch=0.15),
        Keyframe(position=(1.0, 0.0, 5.5), yaw=0.5, pitch=-0.1),
        Keyframe(position=(1.0, 0.0, 7.0), yaw=0.5, pitch=-0.35),
    )


def _orbit() -> tuple:
    kfs = []
    for k in range(7):
        a = 1.5 * PI * k / 6
        kfs.append(Keyframe(position=(5.0 * np.cos(a), 5.0 * np.sin(a), 2.5),
                            yaw=a + PI, pitch=-0.2))
    return tuple(kfs)


def _dolly() -> tuple:
    # straight rail; the slow pan keeps the gimbal channels exercised
    return (
        Keyframe(position=(0.0, 0.0, 2.0), yaw=0.0, pitch=0.0,
                 velocity_tag=2.0),
        Keyframe(position=(20.0, 0.0, 2.0), yaw=0.35, pitch=0.0,
                 velocity_tag=2.0),
    )


def _timed_approach() -> tuple:
    return (
        Keyframe(position=(0.0, 0.0, 2.0), yaw=0.0, pitch=0.0, time_tag=0.0),
        Keyframe(position=(4.0, 2.0, 2.5), yaw=0.6, pitch=0.0, time_tag=3.0),
        Keyframe(position=(8.0, 0.0, 3.0), yaw=1.2, pitch=0.0, time_tag=6.0),
    )


CANNED = {
    "flyby": CannedScenario(
        name="flyby", keyframes=_flyby(),
        description="lateral fly-by with a 180 degree yaw reversal"),
    "pure-rotation": CannedScenario(
        name="pure-rotation", keyframes=_pure_rotation(),
        description="camera pans in place; degenerate zero-length path"),
    "crane": CannedScenario(
        name="crane", keyframes=_crane(),
        description="vertical crane rise while tilting the gimbal down"),
    "orbit": CannedScenario(
        name="orbit", keyframes=_orbit(),
        description="three-quarter orbit, camera locked on the center"),
    "dolly": CannedScenario(
        name="dolly", keyframes=_dolly(), mode="velocity",
        description="straight 20 m push at a constant 2 m/s with a slow pan"),
    "timed-approach": CannedScenario(
        name="timed-approach", keyframes=_timed_approach(), mode="soft-timed",
        description="two-leg approach with user timing tags"),
}


def canned(name: str) -> CannedScenario:
    try:
        return CANNED[name]
    except KeyError:
        raise ValueError(
            f"unknown scenario {name!r}; have {sorted(CANNED)}") from None


def perturb_timings(times, strength: float = 1.0) -> np.ndarray:
    """Warp passage times to emulate a user's hand-placed (worse) tags.

    The warp rushes the start of the shot, which any smoothness-optimal
    schedule avoids (the camera has to pull away from rest), and pads the
    end: normalized time follows the monotone cubic through
    (0, .3, .7, 1) -> (0, .15, .55, 1), blended toward identity as
    `strength` goes to 0 (at 0 the input comes back unchanged).  The warp
    is smooth so a dense schedule stays free of slope kinks, and total
    duration and interior order are preserved, so the warped tags are
    always valid.
    """
    times = np.asarray(times, float)
    if times.ndim != 1 or len(times) < 2:
        raise ValueError("need at least two passage times")
    if np.any(np.diff(times) < 0):
        raise ValueError("passage times must be non-decreasing")
    total = times[-1] - times[0]
    if total <= 0:
        raise ValueError("passage times must span a positive duration")
    if strength == 0.0:
        return times.copy()
    s = (times - times[0]) / total
    warped = PchipInterpolator([0.0, 0.3, 0.7, 1.0], [0.0, 0.15, 0.55, 1.0])(s)
    s = (1.0 - strength) * s + strength * warped
    return times[0] + s * total


def with_time_tags(keyframes, times) -> list[Keyframe]:
    """Copy of the keyframes with the given passage times as tags."""
    if len(times) != len(keyframes):
        raise ValueError(
            f"{len(times)} times for {len(keyframes)} keyframes")
    out = []
    last = None
    for kf, t in zip(keyframes, times):
        t = float(t)
        # strictly increasing tags are required downstream; nudge ties
        if last is not None and t <= last:
            t = last + 1e-3
        out.append(Keyframe(position=kf.position, yaw=kf.yaw, pitch=kf.pitch,
                            time_tag=t, velocity_tag=None))
        last = t
    return out
