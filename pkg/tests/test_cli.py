import csv
import json
import re
import subprocess
import sys

import numpy as np
import pytest

from spatial_conformal.cli import COMMANDS, RunConfig, build_parser, main
from spatial_conformal.conformal import gscp_contour, gscp_interval
from spatial_conformal.covariance import MaternParams
from spatial_conformal.ingest import load_csv
from spatial_conformal.kriging import SpatialDataset
from spatial_conformal.simulate import ScenarioSpec, generate_fields, generate_scenario

FIXED = ["--nugget", "1", "--partial-sill", "3", "--range", "0.1", "--smoothness", "0.7"]
THETA = MaternParams(1.0, 3.0, 0.1, 0.7)


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_toy(path, locs, y):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["s_x", "s_y", "y"])
        for (a, b), v in zip(locs, y):
            w.writerow([a, b, v])


def test_help_flags_match_run_config():
    parser = build_parser()
    sub = next(a for a in parser._actions if a.dest == "command")
    flags = set()
    for cmd in COMMANDS:
        text = sub.choices[cmd].format_help()
        flags |= set(re.findall(r"(--[A-Za-z][\w-]*)", text))
    flags -= {"--help", "--config", "--no-center"}
    fields = {"--" + f.replace("_", "-") for f in RunConfig.field_names() if f != "command"}
    assert flags == fields


def test_help_exits_zero(capsys):
    assert main(["simulate", "--help"]) == 0
    assert "--scenario" in capsys.readouterr().out


def test_simulate_rows_and_sidecar(tmp_path):
    out = tmp_path / "d.csv"
    assert main(["simulate", "--scenario", "1", "--n", "20", "--seed", "7", "--output", str(out)]) == 0
    assert len(rows(out)) == 400
    side = json.loads(out.with_suffix(".json").read_text())
    assert side["scenario"]["seed"] == 7 and side["n_rows"] == 400


def test_simulate_round_trip(tmp_path):
    out = tmp_path / "d.csv"
    main(["simulate", "--scenario", "5", "--n", "9", "--seed", "3", "--output", str(out)])
    data, _ = load_csv(out)
    assert data == generate_scenario(ScenarioSpec(5, 9, 3))


def test_simulate_bump(tmp_path):
    main(["simulate", "--scenario", "8", "--n", "40", "--seed", "1", "--output", str(tmp_path / "s8.csv")])
    main(["simulate", "--scenario", "1", "--n", "40", "--seed", "1", "--output", str(tmp_path / "s1.csv")])
    s8, _ = load_csv(tmp_path / "s8.csv")
    s1, _ = load_csv(tmp_path / "s1.csv")
    _, _, E = generate_fields(ScenarioSpec(1, 40, 1))
    c = np.flatnonzero(np.all(s8.locations == [0.5, 0.5], axis=1))[0]
    assert s8.responses[c] - (s1.responses[c] - E[c]) == pytest.approx(10.0, abs=1e-9)
    near = np.sum((s8.locations - 0.5) ** 2, axis=1) < 0.01
    assert s8.responses[near].max() - s1.responses[near].max() > 5


def test_simulate_without_seed_logs(tmp_path, caplog):
    assert main(["simulate", "--scenario", "2", "--n", "4", "--output", str(tmp_path / "x.csv")]) == 0
    assert "entropy seed" in caplog.text


def test_usage_errors(tmp_path):
    out = str(tmp_path / "o.csv")
    assert main(["simulate", "--scenario", "9", "--n", "4", "--seed", "1", "--output", out]) == 2
    assert main(["benchmark", "--scenario", "1", "--n", "6", "--output", out]) == 2
    assert main(["predict", "--data", str(tmp_path / "nope.csv"), "--targets", "0,0", "--output", out]) == 2
    assert main(["predict", "--data", "x", "--targets", "0,0", "--method", "slscp", "--output", out]) == 2
    assert main(["simulate", "--bogus"]) == 2
    assert main(["simulate", "--sc", "1", "--seed", "1", "--output", out]) == 2


def test_config_file(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"scenario": [2], "n": 5, "seed": 11, "output": str(tmp_path / "a.csv")}))
    assert main(["simulate", "--config", str(cfg)]) == 0
    assert len(rows(tmp_path / "a.csv")) == 25
    cfg.write_text(json.dumps({"scenario": [2], "n": 5, "sede": 11, "output": str(tmp_path / "a.csv")}))
    assert main(["simulate", "--config", str(cfg)]) == 2


def test_predict_matches_library(tmp_path):
    locs = [[0.1, 0.2], [0.6, 0.3], [0.4, 0.9]]
    y = [0.5, -1.0, 2.0]
    write_toy(tmp_path / "toy.csv", locs, y)
    out = tmp_path / "p.csv"
    assert main(["predict", "--data", str(tmp_path / "toy.csv"), "--targets", "0.3,0.5", "--alpha", "0.5",
                 "--no-center", *FIXED, "--output", str(out)]) == 0
    got = rows(out)[0]
    data = SpatialDataset(locs, y)
    ps = gscp_interval(data, [0.3, 0.5], THETA, 0.5)
    assert float(got["lower_hull"]) == ps.hull[0] and float(got["upper_hull"]) == ps.hull[1]
    assert int(got["n_components"]) == len(ps.components)
    mid = 0.5 * sum(ps.hull)
    assert float(got["plausibility_at_median"]) == gscp_contour(data, [0.3, 0.5], THETA)(mid)
    assert got["method"] == "GSCP" and float(got["alpha"]) == 0.5 and got["status"] == "ok"


def test_slscp_degeneracy_output(tmp_path):
    data = generate_scenario(ScenarioSpec(1, 6, 2))
    from spatial_conformal.ingest import write_csv

    write_csv(data, tmp_path / "d.csv")
    common = ["--data", str(tmp_path / "d.csv"), "--targets", "0.25,0.4;0.9,0.1", *FIXED]
    main(["predict", *common, "--method", "gscp", "--output", str(tmp_path / "g.csv")])
    main(["predict", *common, "--method", "slscp", "--eta", "1e12", "--M", "36", "--output", str(tmp_path / "s.csv")])
    g, s = rows(tmp_path / "g.csv"), rows(tmp_path / "s.csv")
    for a, b in zip(g, s):
        a.pop("method"), b.pop("method")
        assert a == b


def test_per_target_failure_marker(tmp_path, caplog):
    write_toy(tmp_path / "toy.csv", [[0.1, 0.2], [0.6, 0.3], [0.4, 0.9]], [0.5, -1.0, 2.0])
    out = tmp_path / "p.csv"
    args = ["predict", "--data", str(tmp_path / "toy.csv"), "--targets", "0.6,0.3;0.2,0.2", "--nugget", "0",
            "--partial-sill", "1", "--range", "0.2", "--smoothness", "0.5", "--output", str(out)]
    assert main(args) == 0
    got = rows(out)
    assert got[0]["status"] == "error" and got[1]["status"] == "ok"
    assert "1 of 2 targets failed" in caplog.text


def test_predict_targets_file_and_kriging(tmp_path):
    data = generate_scenario(ScenarioSpec(1, 6, 4))
    from spatial_conformal.ingest import write_csv

    write_csv(data, tmp_path / "d.csv")
    (tmp_path / "t.csv").write_text("s_x,s_y\n0.5,0.5\n0.1,0.95\n")
    out = tmp_path / "k.csv"
    assert main(["predict", "--data", str(tmp_path / "d.csv"), "--targets-file", str(tmp_path / "t.csv"),
                 "--method", "kriging", *FIXED, "--output", str(out)]) == 0
    got = rows(out)
    assert len(got) == 2 and got[0]["method"] == "Kriging"
    assert float(got[0]["lower_hull"]) < float(got[0]["upper_hull"])


def test_contour_pieces(tmp_path):
    locs = [[0.1, 0.2], [0.6, 0.3], [0.4, 0.9], [0.8, 0.8]]
    y = [0.5, -1.0, 2.0, 0.1]
    write_toy(tmp_path / "toy.csv", locs, y)
    out = tmp_path / "c.csv"
    assert main(["contour", "--data", str(tmp_path / "toy.csv"), "--targets", "0.5,0.5", "--no-center",
                 *FIXED, "--output", str(out)]) == 0
    pieces = rows(out)
    c = gscp_contour(SpatialDataset(locs, y), [0.5, 0.5], THETA)
    assert len(pieces) == 2 * c.breakpoints.size + 1
    assert float(pieces[0]["lower"]) == -np.inf and float(pieces[-1]["upper"]) == np.inf
    for p in pieces:
        lo, hi, lv = float(p["lower"]), float(p["upper"]), float(p["level"])
        probe = lo if p["kind"] == "point" else (hi - 1 if lo == -np.inf else lo + 1 if hi == np.inf else 0.5 * (lo + hi))
        assert c(probe) == lv
    levels = [float(p["level"]) for p in pieces]
    assert levels[0] == levels[-1] == 0.2 and max(levels) == 1.0


def test_benchmark_deterministic(tmp_path):
    base = ["benchmark", "--scenario", "1", "--n", "6", "--replicates", "2", "--seed", "0",
            "--method", "gscp,kriging,lscp,slscp", "--m", "20", "--eta", "0.3", *FIXED]
    assert main([*base, "--jobs", "1", "--output", str(tmp_path / "a.csv"), "--json-output", str(tmp_path / "a.json"),
                 "--columns-output", str(tmp_path / "cols.csv")]) == 0
    assert main([*base, "--jobs", "1", "--output", str(tmp_path / "b.csv")]) == 0
    assert main([*base, "--jobs", "2", "--output", str(tmp_path / "c.csv")]) == 0
    a = (tmp_path / "a.csv").read_bytes()
    assert a == (tmp_path / "b.csv").read_bytes() == (tmp_path / "c.csv").read_bytes()
    got = rows(tmp_path / "a.csv")
    assert [r["method"] for r in got] == ["GSCP", "Kriging", "LSCP", "sLSCP"]
    assert set(got[0]) >= {"scenario", "N", "method", "Cov90", "Width", "IntScore"}
    assert len(rows(tmp_path / "cols.csv")) == 4 * 6
    assert json.loads((tmp_path / "a.json").read_text())[0]["n_replicates"] == 2


def test_sensitivity_and_tune(tmp_path):
    assert main(["sensitivity", "--n", "5", "--replicates", "1", "--seed", "0", "--output", str(tmp_path / "s.csv")]) == 0
    assert len(rows(tmp_path / "s.csv")) == 9
    main(["simulate", "--scenario", "5", "--n", "8", "--seed", "2", "--output", str(tmp_path / "d.csv")])
    assert main(["tune", "--data", str(tmp_path / "d.csv"), "--etas", "0.1,0.3", "--seed", "1", "--n-validation", "20",
                 *FIXED, "--output", str(tmp_path / "t.json")]) == 0
    res = json.loads((tmp_path / "t.json").read_text())
    assert res["eta"] in (0.1, 0.3)


def test_module_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "spatial_conformal", "simulate", "--scenario", "3", "--n", "3", "--seed", "1",
         "--output", str(tmp_path / "m.csv")],
        capture_output=True, text=True, env={"SPATIAL_CONFORMAL_LOG": "INFO", "PATH": ""},
    )
    assert proc.returncode == 0
    assert "wrote 9 rows" in proc.stderr
    bad = subprocess.run([sys.executable, "-m", "spatial_conformal", "simulate", "--scenario", "0", "--seed", "1",
                          "--output", str(tmp_path / "z.csv")], capture_output=True, text=True)
    assert bad.returncode == 2


def test_tune_unbounded_scores_are_null(tmp_path):
    # at grid spacing 0.05 a 0.05 bandwidth leaves the target weight above alpha
    main(["simulate", "--scenario", "1", "--n", "20", "--seed", "0", "--output", str(tmp_path / "d.csv")])
    assert main(["tune", "--data", str(tmp_path / "d.csv"), "--etas", "0.05,0.5", "--seed", "1", "--n-validation", "10",
                 *FIXED, "--output", str(tmp_path / "t.json")]) == 0
    text = (tmp_path / "t.json").read_text()
    assert "Infinity" not in text
    res = json.loads(text)
    assert res["scores"]["0.05"] is None and res["eta"] == 0.5
