"""End-to-end checks for the command line front end.

Everything calls cli.main(argv) in-process, which is exactly what the
console script runs; exit codes and stdout/stderr therefore go through
the same paths a shell user sees, without subprocess overhead.
"""

import json

import pytest

from cinetraj import cli
from cinetraj.serialize import read_trajectory_csv
from cinetraj.solver import SolveInputError


def _run(capsys, *argv):
    code = cli.main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def _table_rows(out):
    """Parse the metrics table into {mode: (jerk, ang_jerk, T, status)}."""
    lines = out.splitlines()
    start = next(i for i, ln in enumerate(lines) if ln.startswith("mode "))
    rows = {}
    for ln in lines[start + 1:]:
        if not ln.strip():
            break
        mode, jerk, ang, T, status = ln.split(None, 4)
        num = lambda s: None if s == "-" else float(s)
        rows[mode] = (num(jerk), num(ang), num(T), status.strip())
    return rows


# --- plan ------------------------------------------------------------------------

def test_plan_writes_artifacts(tmp_path, capsys):
    out_dir = tmp_path / "out"
    code, out, err = _run(capsys, "plan", "dolly", "--out-dir", str(out_dir))
    assert code == 0 and err == ""
    stems = ["dolly_trajectory.csv", "dolly_metrics.json", "dolly_jerk.csv",
             "dolly_solver.log"]
    for stem in stems:
        assert (out_dir / stem).exists()
        assert stem in out
    assert "status converged" in out

    report = json.loads((out_dir / "dolly_metrics.json").read_text())
    assert report["converged"] is True
    assert report["mean_sq_jerk"] > 0.0
    assert report["T"] > 0.0
    assert report["objective"] > 0.0

    csv = read_trajectory_csv(out_dir / "dolly_trajectory.csv")
    assert csv.x.shape[0] == 61
    assert (out_dir / "dolly_solver.log").read_text().strip() != ""
    assert (out_dir / "dolly_jerk.csv").read_text().startswith("t,")


def test_plan_unknown_scenario_lists_canned_names(capsys):
    code, out, err = _run(capsys, "plan", "no-such-shot")
    assert code == cli.EXIT_INPUT
    assert err.startswith("error:")
    assert "dolly" in err and "flyby" in err


def test_plan_rejects_malformed_set(capsys):
    code, _, err = _run(capsys, "plan", "dolly", "--set", "w_j")
    assert code == cli.EXIT_INPUT and "key=value" in err

    code, _, err = _run(capsys, "plan", "dolly", "--set", "w_j=smooth")
    assert code == cli.EXIT_INPUT and "not a number" in err


def test_plan_fixed_length_requires_t_len(capsys):
    code, _, err = _run(capsys, "plan", "dolly", "--mode", "fixed-length")
    assert code == cli.EXIT_INPUT and "t_len" in err


def test_plan_rejects_scenario_file_with_bad_tags(tmp_path, capsys):
    doc = {
        "schema_version": 1,
        "id": "bad-tags",
        "mode": "soft-timed",
        "keyframes": [
            {"position": [0.0, 0.0, 1.0], "yaw": 0.0, "pitch": 0.0, "time": 5.0},
            {"position": [4.0, 0.0, 1.0], "yaw": 10.0, "pitch": 0.0, "time": 2.0},
        ],
    }
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(doc))
    code, _, err = _run(capsys, "plan", str(path))
    assert code == cli.EXIT_INPUT
    assert err.startswith("error:") and "keyframe 1" in err


# --- compare ---------------------------------------------------------------------

def test_compare_auto_beats_perturbed_baseline(tmp_path, capsys):
    out_dir = tmp_path / "out"
    code, out, _ = _run(capsys, "compare", "dolly", "--out-dir", str(out_dir))
    assert code == 0
    rows = _table_rows(out)
    auto, base = rows["auto"], rows["quasi-hard"]
    assert auto[3] == "converged" and base[3] == "converged"
    assert auto[0] < base[0]
    assert auto[1] < base[1]
    for stem in ("dolly_auto", "dolly_quasi_hard"):
        assert (out_dir / f"{stem}_metrics.json").exists()


def test_compare_zero_perturb_schedule_reproduces_auto(tmp_path, capsys):
    """Pinning the auto solve's own schedule must give the same shot back."""
    code, out, _ = _run(capsys, "compare", "dolly", "--perturb", "0",
                        "--baseline", "schedule", "--out-dir", str(tmp_path))
    assert code == 0
    rows = _table_rows(out)
    auto, base = rows["auto"], rows["quasi-hard"]
    assert base[0] == pytest.approx(auto[0], rel=0.05)
    assert base[1] == pytest.approx(auto[1], rel=0.05)
    assert base[2] == pytest.approx(auto[2], rel=0.02)


def test_compare_flags_infeasible_baseline(tmp_path, capsys, monkeypatch):
    """A baseline the solver rejects shows up as a row, not a crash.

    No canned scenario produces rejected warped tags (the warp preserves
    strict ordering), so the failure is forced at the seam the real one
    would come through.
    """
    def boom(request):
        raise SolveInputError("tags out of order")

    monkeypatch.setattr(cli, "solve_timed_baseline", boom)
    code, out, _ = _run(capsys, "compare", "dolly", "--out-dir", str(tmp_path))
    assert code == 0
    base = _table_rows(out)["quasi-hard"]
    assert base[:3] == (None, None, None)
    assert base[3] == "infeasible: tags out of order"
    assert not (tmp_path / "dolly_quasi_hard_metrics.json").exists()
