"""HTTP planning service.

Angles cross this boundary in degrees; everything internal is radians.
Plans run on worker threads, one in-flight solve per scenario; a second
plan request for the same scenario is rejected with 409 instead of queued.
Each plan snapshots its scenario at launch, so editing or deleting the
scenario afterwards never changes a running or finished plan.
"""

from __future__ import annotations

import threading
import time
import traceback
import uuid
from dataclasses import dataclass, field

import numpy as np
from fastapi import FastAPI, HTTPException, Response
from fastapi.middleware.cors import CORSMiddleware
from pydantic import BaseModel, Field

from .model import CH_PHI_G, CH_PSI_G, CH_PSI_Q, ModelParams
from .path import keyframes_from_obj, keyframes_to_obj, validate_keyframes
from .serialize import Scenario, ScenarioError
from .solver import MODES, SolveInputError, solve
from .store import ScenarioStore, UnknownScenarioError
from .tracking import jerk_series, metrics

LOG_EXCERPT_LINES = 20


class KeyframeBody(BaseModel):
    position: list[float] = Field(min_length=3, max_length=3)
    yaw: float
    pitch: float
    time: float | None = None
    speed: float | None = None


class WeightsBody(BaseModel):
    preset: str = "survey"
    overrides: dict[str, float] = Field(default_factory=dict)


class ScenarioBody(BaseModel):
    id: str | None = None
    keyframes: list[KeyframeBody] = Field(min_length=2)
    mode: str = "auto"
    weights: WeightsBody = Field(default_factory=WeightsBody)
    params: dict | None = None
    # (theta, time) / (theta, speed) pairs from the progress/velocity editors
    timing_tags: list[list[float]] = Field(default_factory=list)
    velocity_tags: list[list[float]] = Field(default_factory=list)


class ScenarioOut(BaseModel):
    id: str
    keyframes: list[KeyframeBody]
    mode: str
    weights: WeightsBody
    params: dict
    timing_tags: list[list[float]]
    velocity_tags: list[list[float]]
    created: str
    modified: str


class TrajectoryOut(BaseModel):
    """Camera motion series; yaw/pitch are the combined camera angles."""

    T: float
    dt: float
    L: float
    converged: bool
    t: list[float]
    position: list[list[float]]
    yaw: list[float]
    pitch: list[float]
    theta: list[float]
    theta_dot: list[float]
    v: list[float]
    knots: list[float]


class PlanOut(BaseModel):
    plan_id: str
    scenario_id: str
    status: str            # running | converged | max-iter | cancelled | error
    detail: str | None = None
    wall_time: float | None = None
    trajectory: TrajectoryOut | None = None
    metrics: dict | None = None
    objective: float | None = None
    objective_terms: dict[str, float] | None = None
    jerk_series: dict | None = None
    log_excerpt: list[str] | None = None


@dataclass
class _PlanTask:
    scenario_id: str
    cancel: threading.Event = field(default_factory=threading.Event)
    thread: threading.Thread | None = None
    status: str = "running"
    detail: str | None = None
    wall_time: float | None = None
    trajectory: TrajectoryOut | None = None
    metrics: dict | None = None
    objective: float | None = None
    objective_terms: dict | None = None
    jerk: dict | None = None
    log_excerpt: list[str] | None = None


def _scenario_from_body(body: ScenarioBody, ident: str) -> Scenario:
    try:
        keyframes = keyframes_from_obj(
            [kf.model_dump(exclude_none=True) for kf in body.keyframes])
        validate_keyframes(keyframes)
        params = (ModelParams.from_dict(body.params) if body.params
                  else ModelParams())
        return Scenario(id=ident, keyframes=tuple(keyframes), mode=body.mode,
                        preset=body.weights.preset,
                        overrides=dict(body.weights.overrides), params=params,
                        timing_tags=tuple(map(tuple, body.timing_tags)),
                        velocity_tags=tuple(map(tuple, body.velocity_tags)))
    except (ScenarioError, ValueError, TypeError) as exc:
        raise HTTPException(status_code=422, detail=str(exc)) from None


def _scenario_out(sc: Scenario) -> ScenarioOut:
    return ScenarioOut(
        id=sc.id,
        keyframes=[KeyframeBody(**obj) for obj in keyframes_to_obj(sc.keyframes)],
        mode=sc.mode,
        weights=WeightsBody(preset=sc.preset, overrides=dict(sc.overrides)),
        params=sc.params.to_dict(),
        timing_tags=[list(p) for p in sc.timing_tags],
        velocity_tags=[list(p) for p in sc.velocity_tags],
        created=sc.created,
        modified=sc.modified)


def _trajectory_out(traj) -> TrajectoryOut:
    yaw = np.degrees(traj.x[:, CH_PSI_Q] + traj.x[:, CH_PSI_G])
    pitch = np.degrees(traj.x[:, CH_PHI_G])
    return TrajectoryOut(
        T=traj.T, dt=traj.dt, L=traj.L, converged=traj.converged,
        t=traj.times.tolist(),
        position=traj.x[:, :3].tolist(),
        yaw=yaw.tolist(),
        pitch=pitch.tolist(),
        theta=traj.theta.tolist(),
        theta_dot=traj.theta_dot.tolist(),
        v=traj.v.tolist(),
        knots=traj.knots.tolist())


def _plan_out(task: _PlanTask) -> PlanOut:
    return PlanOut(plan_id=task.scenario_id, scenario_id=task.scenario_id,
                   status=task.status, detail=task.detail,
                   wall_time=task.wall_time, trajectory=task.trajectory,
                   metrics=task.metrics, objective=task.objective,
                   objective_terms=task.objective_terms, jerk_series=task.jerk,
                   log_excerpt=task.log_excerpt)


def _term_sums(traj) -> dict[str, float]:
    out: dict[str, float] = {}
    for terms in traj.diagnostics.per_stage_terms:
        for name, value in terms.items():
            out[name] = out.get(name, 0.0) + value
    return out


def _run_plan(task: _PlanTask, scenario: Scenario, mode: str) -> None:
    t0 = time.perf_counter()
    try:
        req = scenario.to_request(
            mode=mode, on_outer=lambda k, entry: not task.cancel.is_set())
        traj = solve(req)
        report = metrics(traj, scenario.params)
        status = traj.diagnostics.status
        if status not in ("converged", "cancelled"):
            task.detail = status
            status = "max-iter"
        task.trajectory = _trajectory_out(traj)
        task.metrics = report.to_dict()
        task.objective = traj.diagnostics.objective
        task.objective_terms = _term_sums(traj)
        task.jerk = jerk_series(traj)
        task.log_excerpt = traj.diagnostics.log_lines[-LOG_EXCERPT_LINES:]
        task.status = status
    except SolveInputError as exc:
        task.status = "error"
        task.detail = str(exc)
    except Exception as exc:
        task.status = "error"
        task.detail = f"{type(exc).__name__}: {exc}"
        task.log_excerpt = traceback.format_exc().splitlines()[-LOG_EXCERPT_LINES:]
    finally:
        task.wall_time = time.perf_counter() - t0


def create_app(store_dir) -> FastAPI:
    app = FastAPI(title="cinetraj planner")
    app.add_middleware(CORSMiddleware, allow_origins=["*"],
                       allow_methods=["*"], allow_headers=["*"])
    store = ScenarioStore(store_dir)
    plans: dict[str, _PlanTask] = {}
    plans_lock = threading.Lock()

    @app.get("/scenarios")
    def list_scenarios() -> list[str]:
        return store.list_ids()

    @app.post("/scenarios", status_code=201)
    def create_scenario(body: ScenarioBody) -> ScenarioOut:
        ident = body.id or uuid.uuid4().hex[:12]
        scenario = _scenario_from_body(body, ident)
        try:
            return _scenario_out(store.create(scenario))
        except ScenarioError as exc:
            code = 409 if "already exists" in str(exc) else 422
            raise HTTPException(status_code=code, detail=str(exc)) from None

    @app.get("/scenarios/{scenario_id}")
    def get_scenario(scenario_id: str) -> ScenarioOut:
        try:
            return _scenario_out(store.get(scenario_id))
        except UnknownScenarioError as exc:
            raise HTTPException(status_code=404, detail=str(exc)) from None

    @app.put("/scenarios/{scenario_id}")
    def update_scenario(scenario_id: str, body: ScenarioBody) -> ScenarioOut:
        if body.id is not None and body.id != scenario_id:
            raise HTTPException(status_code=422,
                                detail="body id does not match URL")
        scenario = _scenario_from_body(body, scenario_id)
        try:
            return _scenario_out(store.update(scenario))
        except UnknownScenarioError as exc:
            raise HTTPException(status_code=404, detail=str(exc)) from None

    @app.delete("/scenarios/{scenario_id}", status_code=204)
    def delete_scenario(scenario_id: str) -> Response:
        try:
            store.delete(scenario_id)
        except UnknownScenarioError as exc:
            raise HTTPException(status_code=404, detail=str(exc)) from None
        return Response(status_code=204)

    @app.post("/scenarios/{scenario_id}/plan", status_code=202)
    def plan_scenario(scenario_id: str, mode: str | None = None) -> PlanOut:
        if mode is not None and mode not in MODES:
            raise HTTPException(status_code=422,
                                detail=f"unknown mode {mode!r}; have {list(MODES)}")
        try:
            scenario = store.get(scenario_id)
        except UnknownScenarioError as exc:
            raise HTTPException(status_code=404, detail=str(exc)) from None
        with plans_lock:
            running = plans.get(scenario_id)
            if running is not None and running.status == "running":
                raise HTTPException(
                    status_code=409,
                    detail=f"plan already running for {scenario_id!r}")
            task = _PlanTask(scenario_id=scenario_id)
            task.thread = threading.Thread(
                target=_run_plan, args=(task, scenario, mode or scenario.mode),
                daemon=True)
            plans[scenario_id] = task
            task.thread.start()
        return _plan_out(task)

    @app.get("/plans/{plan_id}")
    def get_plan(plan_id: str) -> PlanOut:
        with plans_lock:
            task = plans.get(plan_id)
        if task is None:
            raise HTTPException(status_code=404, detail=f"no plan {plan_id!r}")
        return _plan_out(task)

    @app.delete("/plans/{plan_id}")
    def cancel_plan(plan_id: str) -> PlanOut:
        with plans_lock:
            task = plans.get(plan_id)
            if task is None:
                raise HTTPException(status_code=404,
                                    detail=f"no plan {plan_id!r}")
            if task.status == "running":
                task.cancel.set()
            else:
                del plans[plan_id]
        return _plan_out(task)

    return app
