import csv
import json
import subprocess
import sys
from importlib import resources

import pytest

from bimanip.certificate import verify_certificate
from bimanip.cli import EXIT_BUDGET, EXIT_INPUT, EXIT_OK, main
from bimanip.fileio import (FileFormatError, certificate_to_dict, comparable, load_certificate,
                            load_trajectory, save_certificate, save_trajectory)
from bimanip.reachability import read_grid
from bimanip.scene import load_scene
from bimanip.trajectory import validate_trajectory

BOX_TEXT = (resources.files("bimanip") / "scenes" / "box.yaml").read_text()


@pytest.fixture(scope="module")
def certified(tmp_path_factory):
    d = tmp_path_factory.mktemp("cert")
    assert main(["certify", "box", "--seed", "0", "--out", str(d / "a.json")]) == EXIT_OK
    return d


@pytest.fixture(scope="module")
def solved(certified):
    out = certified / "traj.json"
    code = main(["solve", "box", str(certified / "a.json"), "--start", "3,-0.04,0.02,0.3",
                 "--goal", "0,0.03,0.0,1.0", "--seed", "1", "--out", str(out)])
    assert code == EXIT_OK
    return out


def test_certify_is_deterministic(certified):
    assert main(["certify", "box", "--seed", "0", "--out", str(certified / "b.json")]) == EXIT_OK
    a = json.loads((certified / "a.json").read_text())
    b = json.loads((certified / "b.json").read_text())
    assert "created" in a["metadata"]
    assert json.dumps(comparable(a)) == json.dumps(comparable(b))


def test_certificate_file_spans_and_replays(certified):
    cert = load_certificate(certified / "a.json")
    assert cert.spanning and len(cert.entries) >= 5
    w = load_scene("box")
    assert verify_certificate(w, cert) == []


def test_certificate_round_trip_is_exact(box_cert, tmp_path):
    save_certificate(box_cert, tmp_path / "c.json")
    back = load_certificate(tmp_path / "c.json")
    assert certificate_to_dict(back) == certificate_to_dict(box_cert)
    for e, f in zip(box_cert.entries, back.entries):
        assert e.trajectory == f.trajectory
        assert (e.a, e.b, e.start, e.goal) == (f.a, f.b, f.start, f.goal)


def test_trajectory_round_trip_is_exact(box_cert, tmp_path):
    traj = box_cert.entries[0].trajectory
    save_trajectory(traj, tmp_path / "t.json", "fp")
    back, d = load_trajectory(tmp_path / "t.json")
    assert back == traj and d["fingerprint"] == "fp"
    for a, b in zip(traj.segments, back.segments):
        assert a.poses.tobytes() == b.poses.tobytes() and a.meta == b.meta


def test_trajectory_file_checks_version_and_count(box_cert, tmp_path):
    save_trajectory(box_cert.entries[0].trajectory, tmp_path / "t.json")
    d = json.loads((tmp_path / "t.json").read_text())
    for key, val in (("version", 99), ("sample_count", d["sample_count"] + 1)):
        bad = dict(d, **{key: val})
        (tmp_path / "bad.json").write_text(json.dumps(bad))
        with pytest.raises(FileFormatError):
            load_trajectory(tmp_path / "bad.json")


def test_budget_zero_exits_with_budget_code(tmp_path, capsys):
    assert main(["certify", "box", "--budget", "0", "--out", str(tmp_path / "c.json")]) == EXIT_BUDGET
    assert "SPANNING_FAILED" in capsys.readouterr().err
    assert not (tmp_path / "c.json").exists()


def test_malformed_scene_reports_line(tmp_path, capsys):
    lines = BOX_TEXT.splitlines()
    lines.insert(5, "bogus: 1")
    (tmp_path / "bad.yaml").write_text("\n".join(lines))
    assert main(["analyze", str(tmp_path / "bad.yaml")]) == EXIT_INPUT
    assert "line 6" in capsys.readouterr().err
    lines = BOX_TEXT.splitlines()
    lines[8] += " ]]"
    (tmp_path / "bad2.yaml").write_text("\n".join(lines))
    assert main(["analyze", str(tmp_path / "bad2.yaml")]) == EXIT_INPUT
    assert "line 9" in capsys.readouterr().err


def test_edited_scene_is_fingerprint_mismatch(certified, tmp_path, capsys):
    edited = BOX_TEXT.replace("mass: 1.0", "mass: 1.1")
    assert edited != BOX_TEXT
    (tmp_path / "edited.yaml").write_text(edited)
    code = main(["solve", str(tmp_path / "edited.yaml"), str(certified / "a.json"), "--start", "2,0,0,0",
                 "--goal", "2,0,0,0", "--out", str(tmp_path / "t.json")])
    assert code == EXIT_INPUT
    assert "FINGERPRINT_MISMATCH" in capsys.readouterr().err


def test_bad_arguments_are_input_errors(certified, tmp_path):
    assert main(["solve", "box", str(certified / "a.json"), "--start", "2,0,0", "--goal", "2,0,0,0",
                 "--out", str(tmp_path / "t.json")]) == EXIT_INPUT
    with pytest.raises(SystemExit) as ei:
        main(["certify"])
    assert ei.value.code == EXIT_INPUT


def test_cross_class_solution_replays_on_reload(solved):
    traj, d = load_trajectory(solved)
    w = load_scene("box")
    assert d["fingerprint"] == w.fingerprint
    assert traj.n_typeb == 1
    assert validate_trajectory(w, traj).ok


def test_export_csv_row_count(solved, tmp_path):
    assert main(["export", str(solved), "--format", "csv", "--out", str(tmp_path / "t.csv")]) == EXIT_OK
    rows = list(csv.reader((tmp_path / "t.csv").open()))
    d = json.loads(solved.read_text())
    assert len(rows) - 1 == d["sample_count"]
    assert rows[0][:5] == ["segment", "type", "kind", "sample", "s"]


def test_export_summary_and_unknown_format(solved, tmp_path, capsys):
    assert main(["export", str(solved)]) == EXIT_OK
    s = json.loads(capsys.readouterr().out)
    traj, _ = load_trajectory(solved)
    assert s["typeb_segments"] == 1 and s["regrasps"] == traj.regrasps
    assert s["path_length"] == pytest.approx(traj.path_length())
    assert main(["export", str(solved), "--format", "xml"]) == EXIT_INPUT


def test_installed_entry_point(solved):
    r = subprocess.run([sys.executable, "-m", "bimanip.cli", "export", str(solved)], capture_output=True, text=True)
    assert r.returncode == 0 and "transfer_segments" in r.stdout


def test_analyze_walled_scene(tmp_path, capsys):
    assert main(["analyze", "walled", "--class", "2", "--resolution", "0.04,20", "--out", str(tmp_path)]) == EXIT_OK
    assert "class 2: 2 component(s)" in capsys.readouterr().out
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["classes"]["2"]["components"] == 2
    occ, meta = read_grid(tmp_path / "class2")
    assert occ.sum() == report["classes"]["2"]["feasible_cells"]


def test_analyze_box_lists_six_connected_classes(capsys):
    assert main(["analyze", "box", "--resolution", "0.04,20"]) == EXIT_OK
    out = capsys.readouterr().out.splitlines()
    assert len(out) == 6
    assert all(": 1 component(s)" in line for line in out)


def test_analyze_unknown_class(capsys):
    assert main(["analyze", "box", "--class", "9"]) == EXIT_INPUT
