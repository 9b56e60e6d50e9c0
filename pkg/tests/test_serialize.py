import dataclasses
import json

import numpy as np
import pytest
from numpy.testing import assert_allclose

from cinetraj.model import NU, NX, ModelParams
from cinetraj.path import Keyframe
from cinetraj.serialize import (
    SCHEMA_VERSION, Scenario, ScenarioError, load_scenario,
    read_trajectory_csv, save_scenario, scenario_from_doc, scenario_to_doc,
    trajectory_csv_header, write_jerk_csv, write_report_json,
    write_trajectory_csv,
)
from cinetraj.solver import Diagnostics, Trajectory


KFS = (
    Keyframe(position=(0.0, 0.0, 2.0), yaw=0.0, pitch=0.0),
    Keyframe(position=(4.0, 1.0, 2.5), yaw=0.7, pitch=-0.2),
    Keyframe(position=(8.0, 0.0, 3.0), yaw=1.4, pitch=0.1),
)


def _scenario(**kwargs) -> Scenario:
    fields = dict(id="shot-1", keyframes=KFS)
    fields.update(kwargs)
    return Scenario(**fields)


def _synthetic_trajectory(rng, n=6, terms=("position", "jerk", "end_time")):
    """Small hand-built trajectory; values are arbitrary but awkward floats."""
    x = rng.normal(scale=np.pi, size=(n + 1, NX + 1))
    u = rng.normal(scale=11.3, size=(n, NU))
    theta = np.cumsum(rng.uniform(0.01, 0.5, size=n + 1))
    per_stage = [{name: float(rng.uniform(0, 3)) for name in terms}
                 for _ in range(n + 1)]
    diag = Diagnostics(status="converged", outer_iterations=3,
                       inner_iterations=17, outer_log=[], objective=1.23,
                       defect_residual=1e-10, kkt_residual=1e-6,
                       terminal_gap=1e-5, per_stage_terms=per_stage,
                       monotone_violations=[], log_lines=[])
    return Trajectory(x=x, u=u, theta=theta,
                      theta_dot=rng.uniform(0, 2, size=n + 1),
                      v=rng.normal(size=n), dt=0.173, T=0.173 * n,
                      L=float(theta[-1]), knots=np.array([0.0, theta[-1]]),
                      converged=True, diagnostics=diag)


# --- scenario documents -------------------------------------------------------

def _assert_scenarios_match(a: Scenario, b: Scenario):
    """Equality up to the degree/radian conversion wobble on angles."""
    for kf_a, kf_b in zip(a.keyframes, b.keyframes, strict=True):
        assert kf_a.position == kf_b.position
        assert kf_a.yaw == pytest.approx(kf_b.yaw, rel=1e-14, abs=1e-15)
        assert kf_a.pitch == pytest.approx(kf_b.pitch, rel=1e-14, abs=1e-15)
        assert kf_a.time_tag == kf_b.time_tag
        assert kf_a.velocity_tag == kf_b.velocity_tag
    rest = {f: getattr(a, f) for f in
            ("id", "mode", "preset", "overrides", "params", "timing_tags",
             "velocity_tags", "created", "modified")}
    assert rest == {f: getattr(b, f) for f in rest}


def test_doc_round_trip():
    sc = _scenario(mode="soft-timed", preset="interactive",
                   overrides={"w_j": 25.0},
                   timing_tags=((0.0, 0.0), (1.2, 4.0)),
                   velocity_tags=((0.5, 2.0),),
                   created="2026-01-01T00:00:00Z")
    doc = scenario_to_doc(sc)
    assert doc["schema_version"] == SCHEMA_VERSION
    _assert_scenarios_match(scenario_from_doc(doc), sc)


def test_doc_round_trip_defaults():
    sc = _scenario()
    _assert_scenarios_match(scenario_from_doc(scenario_to_doc(sc)), sc)


def test_file_round_trip(tmp_path):
    sc = _scenario(params=ModelParams(vel_bound=7.0))
    path = tmp_path / "shot.json"
    save_scenario(sc, path)
    back = load_scenario(path)
    _assert_scenarios_match(back, sc)
    assert back.params.vel_bound == 7.0


def test_doc_keyframes_in_degrees():
    doc = scenario_to_doc(_scenario())
    assert doc["keyframes"][1]["yaw"] == pytest.approx(np.degrees(0.7))
    assert doc["keyframes"][1]["pitch"] == pytest.approx(np.degrees(-0.2))


def test_schema_version_checked():
    doc = scenario_to_doc(_scenario())
    doc["schema_version"] = 99
    with pytest.raises(ScenarioError, match="schema"):
        scenario_from_doc(doc)
    del doc["schema_version"]
    with pytest.raises(ScenarioError, match="schema"):
        scenario_from_doc(doc)


def test_bad_json_reports_position(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text('{"schema_version": 1,,}')
    with pytest.raises(ScenarioError, match="line"):
        load_scenario(path)


def test_unknown_mode_rejected():
    with pytest.raises(ScenarioError, match="mode"):
        _scenario(mode="wobbly")


def test_unknown_preset_and_override_rejected():
    with pytest.raises(ScenarioError):
        _scenario(preset="nope")
    with pytest.raises(ScenarioError):
        _scenario(overrides={"w_bogus": 1.0})


def test_bad_tag_pairs_rejected():
    with pytest.raises(ScenarioError):
        _scenario(timing_tags=((0.0,),))
    with pytest.raises(ScenarioError):
        _scenario(velocity_tags=("fast",))
    # non-increasing times fail the overlay build
    with pytest.raises(ScenarioError):
        _scenario(timing_tags=((0.0, 3.0), (1.0, 1.0)))


def test_to_request_carries_overlays_and_mode():
    sc = _scenario(mode="soft-timed", timing_tags=((0.0, 0.0), (2.0, 5.0)))
    req = sc.to_request()
    assert req.mode == "soft-timed"
    assert req.timing is not None
    assert_allclose(req.timing.value(2.0), 5.0)
    req2 = sc.to_request(mode="auto")
    assert req2.mode == "auto"


def test_fixed_length_needs_t_len():
    with pytest.raises(ScenarioError, match="t_len"):
        _scenario(mode="fixed-length")
    ok = _scenario(mode="fixed-length", overrides={"t_len": 12.0})
    assert ok.to_request().weights.t_len == 12.0


def test_with_fields_revalidates():
    sc = _scenario()
    with pytest.raises(ScenarioError):
        sc.with_fields(mode="nope")


# --- trajectory CSV -----------------------------------------------------------

def test_csv_bit_exact_round_trip(tmp_path):
    rng = np.random.default_rng(31)
    traj = _synthetic_trajectory(rng)
    path = tmp_path / "traj.csv"
    write_trajectory_csv(traj, path)
    back = read_trajectory_csv(path)
    # .17g formatting makes the float round trip exact, not approximate
    assert np.array_equal(back.x, traj.x)
    assert np.array_equal(back.u, traj.u)
    assert np.array_equal(back.theta, traj.theta)
    assert np.array_equal(back.theta_dot, traj.theta_dot)
    assert np.array_equal(back.v, traj.v)
    assert np.array_equal(back.t, traj.times)


def test_csv_terms_columns(tmp_path):
    rng = np.random.default_rng(7)
    traj = _synthetic_trajectory(rng, terms=("jerk", "timing"))
    path = tmp_path / "traj.csv"
    write_trajectory_csv(traj, path)
    header = path.read_text().splitlines()[0].split(",")
    assert header == trajectory_csv_header(traj)
    assert "cost_jerk" in header and "cost_timing" in header
    assert "cost_position" not in header
    back = read_trajectory_csv(path)
    want = [traj.diagnostics.per_stage_terms[i]["jerk"]
            for i in range(traj.n_stages + 1)]
    assert np.array_equal(back.terms["jerk"], want)


def test_csv_terminal_row_has_no_input(tmp_path):
    rng = np.random.default_rng(2)
    traj = _synthetic_trajectory(rng)
    path = tmp_path / "traj.csv"
    write_trajectory_csv(traj, path)
    last = path.read_text().splitlines()[-1].split(",")
    header = trajectory_csv_header(traj)
    assert last[header.index("F_x")] == ""
    assert last[header.index("v")] == ""


def test_jerk_csv(tmp_path):
    series = {"t": [0.0, 0.1], "sq_jerk": [1.5, 2.5], "sq_ang_jerk": [0.25, 0.5]}
    path = tmp_path / "jerk.csv"
    write_jerk_csv(series, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "t,sq_jerk,sq_ang_jerk"
    assert lines[1] == "0,1.5,0.25"


def test_report_json(tmp_path):
    path = tmp_path / "report.json"
    write_report_json({"T": 4.5, "status": "converged"}, path)
    assert json.loads(path.read_text()) == {"T": 4.5, "status": "converged"}
