"""Scenario documents and trajectory/metrics export.

Scenario JSON carries angles in degrees (same boundary convention as the
keyframe helpers in :mod:`cinetraj.path`); everything internal stays in
radians.  Trajectory CSV uses 17 significant digits so a reparse reproduces
the planned states bit for bit.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace

import numpy as np

from .costs import CostWeights, preset_weights
from .model import INPUT_NAMES, NU, NX_FULL, STATE_NAMES, ModelParams
from .path import (Keyframe, TimingOverlay, VelocityOverlay,
                   keyframes_from_obj, keyframes_to_obj)
from .solver import MODES, SolveRequest, Trajectory

SCHEMA_VERSION = 1

# column order for the weighted per-stage cost terms; only terms that are
# active somewhere in the trajectory get a column
TERM_ORDER = ("position", "yaw", "pitch", "jerk", "end_time", "length",
              "timing", "velocity", "progress_reg")

_FMT = ".17g"


class ScenarioError(ValueError):
    """Malformed scenario document."""


@dataclass(frozen=True)
class Scenario:
    id: str
    keyframes: tuple[Keyframe, ...]
    mode: str = "auto"
    preset: str = "survey"
    overrides: dict = field(default_factory=dict)
    params: ModelParams = field(default_factory=ModelParams)
    # (theta, time) / (theta, speed) reference points, e.g. compiled from a
    # progress curve; they take precedence over keyframe tags when present
    timing_tags: tuple = ()
    velocity_tags: tuple = ()
    created: str = ""
    modified: str = ""

    def __post_init__(self):
        if self.mode not in MODES:
            raise ScenarioError(f"unknown mode {self.mode!r}; have {list(MODES)}")
        object.__setattr__(self, "keyframes", tuple(self.keyframes))
        for name in ("timing_tags", "velocity_tags"):
            pairs = tuple(_as_pair(name, p) for p in getattr(self, name))
            object.__setattr__(self, name, pairs)
        weights = self.weights()  # fail early on a bad preset or override
        self.overlays()  # and on inconsistent tag pairs
        if self.mode == "fixed-length" and (weights.t_len or 0) <= 0:
            raise ScenarioError("fixed-length mode needs a t_len override")

    def weights(self) -> CostWeights:
        try:
            base = preset_weights(self.preset)
            return base.with_overrides(**self.overrides)
        except (TypeError, ValueError) as exc:
            raise ScenarioError(str(exc)) from None

    def overlays(self) -> tuple[TimingOverlay | None, VelocityOverlay | None]:
        timing = velocity = None
        try:
            if self.timing_tags:
                thetas, times = zip(*self.timing_tags)
                timing = TimingOverlay(thetas, times)
            if self.velocity_tags:
                thetas, speeds = zip(*self.velocity_tags)
                velocity = VelocityOverlay(thetas, speeds)
        except ValueError as exc:
            raise ScenarioError(str(exc)) from None
        return timing, velocity

    def to_request(self, mode: str | None = None, **request_kwargs) -> SolveRequest:
        timing, velocity = self.overlays()
        return SolveRequest(keyframes=list(self.keyframes),
                            params=self.params,
                            weights=self.weights(),
                            mode=mode or self.mode,
                            timing=timing,
                            velocity=velocity,
                            **request_kwargs)

    def with_fields(self, **kwargs) -> "Scenario":
        return replace(self, **kwargs)


def _as_pair(name: str, pair) -> tuple[float, float]:
    try:
        a, b = pair
        return (float(a), float(b))
    except (TypeError, ValueError):
        raise ScenarioError(f"{name} entries must be (number, number) pairs, "
                            f"got {pair!r}") from None


def scenario_to_doc(scenario: Scenario) -> dict:
    doc = {
        "schema_version": SCHEMA_VERSION,
        "id": scenario.id,
        "keyframes": keyframes_to_obj(scenario.keyframes),
        "mode": scenario.mode,
        "weights": {"preset": scenario.preset, "overrides": dict(scenario.overrides)},
        "params": scenario.params.to_dict(),
        "created": scenario.created,
        "modified": scenario.modified,
    }
    if scenario.timing_tags:
        doc["timing_tags"] = [list(p) for p in scenario.timing_tags]
    if scenario.velocity_tags:
        doc["velocity_tags"] = [list(p) for p in scenario.velocity_tags]
    return doc


def scenario_from_doc(doc) -> Scenario:
    if not isinstance(doc, dict):
        raise ScenarioError("scenario document must be a JSON object")
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ScenarioError(f"unsupported schema_version {version!r}; "
                            f"expected {SCHEMA_VERSION}")
    try:
        keyframes = keyframes_from_obj(doc["keyframes"])
    except KeyError:
        raise ScenarioError("missing field 'keyframes'") from None
    except ValueError as exc:
        raise ScenarioError(str(exc)) from None
    weights = doc.get("weights") or {}
    params_obj = doc.get("params")
    try:
        params = ModelParams.from_dict(params_obj) if params_obj else ModelParams()
    except (TypeError, ValueError) as exc:
        raise ScenarioError(f"bad params: {exc}") from None
    ident = doc.get("id")
    if not ident or not isinstance(ident, str):
        raise ScenarioError("missing or non-string field 'id'")
    return Scenario(
        id=ident,
        keyframes=tuple(keyframes),
        mode=doc.get("mode", "auto"),
        preset=weights.get("preset", "survey"),
        overrides=dict(weights.get("overrides") or {}),
        params=params,
        timing_tags=tuple(tuple(p) for p in doc.get("timing_tags") or ()),
        velocity_tags=tuple(tuple(p) for p in doc.get("velocity_tags") or ()),
        created=doc.get("created", ""),
        modified=doc.get("modified", ""),
    )


def load_scenario(path) -> Scenario:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ScenarioError(f"{path}: invalid JSON at line {exc.lineno}, "
                                f"column {exc.colno}") from None
    return scenario_from_doc(doc)


def save_scenario(scenario: Scenario, path) -> None:
    with open(path, "w") as fh:
        json.dump(scenario_to_doc(scenario), fh, indent=2)
        fh.write("\n")


def _active_terms(traj: Trajectory) -> list[str]:
    seen = set()
    for terms in traj.diagnostics.per_stage_terms:
        seen.update(terms)
    return [name for name in TERM_ORDER if name in seen]


def trajectory_csv_header(traj: Trajectory) -> list[str]:
    return (["stage", "t"] + list(STATE_NAMES) + ["T"] + list(INPUT_NAMES)
            + ["theta", "theta_dot", "v"]
            + [f"cost_{name}" for name in _active_terms(traj)])


def write_trajectory_csv(traj: Trajectory, path) -> None:
    """One row per stage; inputs are blank on the terminal row."""
    term_names = _active_terms(traj)
    times = traj.times
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(trajectory_csv_header(traj))
        for i in range(traj.n_stages + 1):
            row = [str(i), format(times[i], _FMT)]
            row += [format(val, _FMT) for val in traj.x[i]]
            if i < traj.n_stages:
                row += [format(val, _FMT) for val in traj.u[i]]
            else:
                row += [""] * NU
            row += [format(traj.theta[i], _FMT),
                    format(traj.theta_dot[i], _FMT)]
            row.append(format(traj.v[i], _FMT) if i < traj.n_stages else "")
            terms = traj.diagnostics.per_stage_terms[i]
            row += [format(terms[name], _FMT) if name in terms else ""
                    for name in term_names]
            writer.writerow(row)


@dataclass
class CsvTrajectory:
    t: np.ndarray            # (N+1,)
    x: np.ndarray            # (N+1, 25)
    u: np.ndarray            # (N, 6)
    theta: np.ndarray        # (N+1,)
    theta_dot: np.ndarray    # (N+1,)
    v: np.ndarray            # (N,)
    terms: dict[str, np.ndarray]


def read_trajectory_csv(path) -> CsvTrajectory:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    n_rows = len(rows)
    col = {name: idx for idx, name in enumerate(header)}
    x_cols = [col[name] for name in STATE_NAMES] + [col["T"]]
    u_cols = [col[name] for name in INPUT_NAMES]
    term_names = [name[len("cost_"):] for name in header
                  if name.startswith("cost_")]

    t = np.empty(n_rows)
    x = np.empty((n_rows, NX_FULL))
    u = np.empty((n_rows - 1, NU))
    theta = np.empty(n_rows)
    theta_dot = np.empty(n_rows)
    v = np.empty(n_rows - 1)
    terms = {name: np.zeros(n_rows) for name in term_names}
    for i, row in enumerate(rows):
        t[i] = float(row[col["t"]])
        x[i] = [float(row[j]) for j in x_cols]
        theta[i] = float(row[col["theta"]])
        theta_dot[i] = float(row[col["theta_dot"]])
        if i < n_rows - 1:
            u[i] = [float(row[j]) for j in u_cols]
            v[i] = float(row[col["v"]])
        for name in term_names:
            cell = row[col[f"cost_{name}"]]
            if cell:
                terms[name][i] = float(cell)
    return CsvTrajectory(t=t, x=x, u=u, theta=theta, theta_dot=theta_dot,
                         v=v, terms=terms)


def write_jerk_csv(series: dict, path) -> None:
    """Plot-ready per-stage jerk data from :func:`cinetraj.tracking.jerk_series`."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "sq_jerk", "sq_ang_jerk"])
        for t, sj, saj in zip(series["t"], series["sq_jerk"],
                              series["sq_ang_jerk"]):
            writer.writerow([format(t, _FMT), format(sj, _FMT),
                             format(saj, _FMT)])


def write_report_json(report_dict: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(report_dict, fh, indent=2)
        fh.write("\n")
