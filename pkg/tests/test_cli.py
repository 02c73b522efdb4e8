import csv
import filecmp
import json
import os
import subprocess
import sys

import pytest

from tirecover.cli import ExperimentConfig, run
from tirecover.errors import ConfigError
from tirecover.scenarios import gradient_reference

SMALL_AUDIT = {"resolution_deg": 10.0, "digamma_ladder": [1.0], "interior_points": [],
               "boundary_points": [[0.3, -0.2, 0.0]]}


def write_config(tmp_path, cfg, name="c.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


def invoke(tmp_path, command, cfg=None, out="out", extra=()):
    args = [command, "--out", str(tmp_path / out), *extra]
    if cfg is not None:
        args += ["--config", write_config(tmp_path, cfg, f"{out}.json")]
    return run(args)


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_verify_passes(tmp_path, capsys):
    assert invoke(tmp_path, "verify") == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["status"] == "PASS"
    report = json.loads((tmp_path / "out" / "verify.json").read_text())
    assert report["passed"] and all(s["status"] == "PASS" for s in report["suites"])


@pytest.mark.parametrize("cfg,field", [
    ({"trace": {"rays": 3}}, "trace.rays"),
    ({"waves": ["P"]}, "waves"),
    ({"unknown_section": {}}, "unknown_section"),
    ({"audit": {"digamma_ladder": [1.0, -1.0]}}, "audit.digamma_ladder"),
    ({"medium": "/nonexistent/medium.json"}, "medium"),
])
def test_bad_configs_exit_with_code_2(tmp_path, capsys, cfg, field):
    assert invoke(tmp_path, "trace", cfg) == 2
    assert field in capsys.readouterr().err


def test_malformed_json_is_a_config_error(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    assert run(["verify", "--config", str(path), "--out", str(tmp_path / "o")]) == 2


def test_numerical_failure_exits_with_code_3(tmp_path, capsys):
    medium = gradient_reference().to_dict()
    medium["params"]["a66"] = medium["params"]["a55"]  # conformal qSH metric
    assert invoke(tmp_path, "qsh-extract", {"medium": medium, "qsh": {"n_samples": 5}}) == 3
    assert "ConformalPoint" in capsys.readouterr().err


def test_trace_writes_lens_relations(tmp_path):
    assert invoke(tmp_path, "trace", {"trace": {"n_rays": 6}, "waves": ["qP", "qSV"]}) == 0
    for w in ("qP", "qSV"):
        table = rows(tmp_path / "out" / f"lens_{w}.csv")
        assert len(table) == 7 and all(r[-1] == "exit" for r in table[1:])


def test_convexity_and_nondegeneracy(tmp_path):
    assert invoke(tmp_path, "convexity", out="conv") == 0
    rep = json.loads((tmp_path / "conv" / "convexity_qP.json").read_text())
    assert rep["passed"]
    cfg = {"foliation": {"points_per_axis": 2, "n_dirs": 6}, "waves": ["qP"]}
    assert invoke(tmp_path, "nondegen", cfg, out="nd") == 0


def test_reversed_foliation_fails_convexity(tmp_path):
    assert invoke(tmp_path, "convexity", {"foliation": {"orientation": -1.0}}) == 1


def test_qsh_extract(tmp_path):
    assert invoke(tmp_path, "qsh-extract", {"qsh": {"n_samples": 50}}) == 0
    assert len(rows(tmp_path / "out" / "extraction.csv")) == 51


def test_audit_passes_for_a_tilted_axis(tmp_path):
    cfg = {"audit": {**SMALL_AUDIT, "cases": [["qP", "a11"], ["qP", "e2"]],
                     "interior_points": [[0.1, 0.0, 0.2]], "fit_directions": 3}}
    assert invoke(tmp_path, "audit", cfg) == 0
    audit = json.loads((tmp_path / "out" / "audit.json").read_text())
    assert audit["passed"] and len(audit["records"]) == 6


def test_audit_fails_when_the_axis_is_orthogonal_to_the_boundary(tmp_path):
    cfg = {"medium": gradient_reference(tilt=(0.0, 0.0)).to_dict(),
           "audit": {**SMALL_AUDIT, "cases": [["qP", "a33"]], "fits": False}}
    assert invoke(tmp_path, "audit", cfg) == 1
    audit = json.loads((tmp_path / "out" / "audit.json").read_text())
    assert any("axis orthogonal to the boundary" in r["issues"] for r in audit["records"])


def test_plot_data_tables(tmp_path):
    empty = tmp_path / "empty.json"
    empty.write_text(json.dumps({"degenerate_directions": []}))
    full = tmp_path / "full.json"
    full.write_text(json.dumps({"degenerate_directions": [[0.1, 0.2, 0.97], [0.0, 1.0, 0.0]]}))
    assert invoke(tmp_path, "plot-data", extra=["--report", str(empty), "--report", str(full)]) == 0
    out = tmp_path / "out"
    slow = rows(out / "slowness_sections.csv")
    assert len(slow) == 1 + 3 * 361
    assert {r[0] for r in slow[1:]} == {"qP", "qSV", "qSH"}
    assert rows(out / "empty_degenerate.csv") == [["zeta3", "zeta1", "zeta2"]]
    assert len(rows(out / "full_degenerate.csv")) == 3
    assert len(rows(out / "degeneracy_polar_qP_e2.csv")) == 362


def test_slowness_of_qsh_is_elliptic(tmp_path):
    assert invoke(tmp_path, "plot-data", {"medium": {"params": {"a11": 14.0, "a13": 2.0, "a33": 12.0,
                                                                "a55": 4.0, "a66": 5.0}}}) == 0
    for r in rows(tmp_path / "out" / "slowness_sections.csv")[1:]:
        if r[0] == "qSH":
            x1, x3 = float(r[2]), float(r[3])
            assert 5.0 * x1**2 + 4.0 * x3**2 == pytest.approx(1.0, rel=1e-10)


def test_echoed_config_round_trips(tmp_path):
    assert invoke(tmp_path, "verify", {"seed": 7, "trace": {"n_rays": 3}}, out="a") == 0
    echoed = tmp_path / "a" / "config.json"
    assert run(["verify", "--config", str(echoed), "--out", str(tmp_path / "b")]) == 0
    assert echoed.read_bytes() == (tmp_path / "b" / "config.json").read_bytes()
    d = json.loads(echoed.read_text())
    assert ExperimentConfig.from_dict(d).to_dict() == d


def test_seed_flag_overrides_the_config(tmp_path):
    assert invoke(tmp_path, "verify", {"seed": 1}, extra=["--seed", "5"]) == 0
    assert json.loads((tmp_path / "out" / "config.json").read_text())["seed"] == 5


def test_unknown_inversion_override():
    with pytest.raises(ConfigError) as info:
        ExperimentConfig(inversion={"kind": "a11", "grid": [4, 4, 4]}).inversion_config()
    assert info.value.field == "inversion.grid"


def test_runs_are_byte_identical(tmp_path):
    cfg = write_config(tmp_path, {"trace": {"n_rays": 4}, "seed": 3})
    env = {**os.environ, "TIRECOVER_THREADS": "1"}
    for out in ("r1", "r2"):
        for command in ("trace", "plot-data"):
            subprocess.run([sys.executable, "-m", "tirecover.cli", command, "--config", cfg,
                            "--out", str(tmp_path / out)], check=True, env=env, capture_output=True)
    cmp = filecmp.dircmp(tmp_path / "r1", tmp_path / "r2")
    assert cmp.left_list == cmp.right_list and len(cmp.left_list) >= 4
    _, mismatch, errors = filecmp.cmpfiles(tmp_path / "r1", tmp_path / "r2", cmp.left_list, shallow=False)
    assert not mismatch and not errors
