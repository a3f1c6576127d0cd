import csv
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from smoothsqp import driver
from smoothsqp.cli import (
    EXIT_CODES,
    EXIT_CONFIG,
    ConfigError,
    RunConfig,
    build_problem,
    fd_step,
    main,
    parse_vector,
    run,
)
from smoothsqp.problem import MeritParams, merit_value
from smoothsqp.registry import list_problems, registry_lookup


def solve(tmp_path, name, *extra, tag="run"):
    trace, report = tmp_path / f"{tag}.csv", tmp_path / f"{tag}.json"
    code = main(["solve", name, "--out-trace", str(trace), "--out-report", str(report), *extra])
    return code, trace, json.loads(report.read_text())


def write_config(tmp_path, data):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(data))
    return str(path)


class TestSolve:
    def test_ex3_14_report(self, tmp_path):
        code, trace, rep = solve(tmp_path, "ex3_14")
        assert code == 0 and rep["status"] == "converged" and rep["exit_code"] == 0
        assert np.max(np.abs(np.array(rep["final_point"]) - [0.25, 0.5])) <= 1e-3
        assert rep["distance_to_reference"] <= 1e-3
        assert abs(rep["upper_objective"] - 0.25) <= 1e-3

    def test_trace_layout(self, tmp_path):
        _, trace, rep = solve(tmp_path, "ex3_14")
        with open(trace) as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["k", "x[0]", "x[1]", "rho", "r", "xi", "alpha", "d_norm", "merit",
                           "stationarity_residual", "rho_updated"]
        assert len(rows) - 1 == rep["iterations"]
        assert [int(r[0]) for r in rows[1:]] == list(range(rep["iterations"]))
        assert {r[-1] for r in rows[1:]} <= {"0", "1"}

    def test_trace_round_trips(self, tmp_path):
        _, trace, _ = solve(tmp_path, "halfline")
        with open(trace) as fh:
            body = list(csv.reader(fh))[1:]
        for row in body:
            for cell in row[1:-1]:
                assert repr(float(cell)) == repr(float(repr(float(cell))))
                assert float(f"{float(cell):.17g}") == float(cell)

    def test_reruns_are_byte_identical(self, tmp_path):
        _, t1, _ = solve(tmp_path, "mirrlees", tag="a")
        _, t2, _ = solve(tmp_path, "mirrlees", tag="b")
        assert t1.read_bytes() == t2.read_bytes()

    @pytest.mark.parametrize("name", list_problems())
    def test_final_merit_recomputes(self, name):
        rep = run(RunConfig(problem=name))
        _, prob, _ = build_problem(name)
        theta = merit_value(prob, np.array(rep.final_point), MeritParams(rep.final_rho, rep.final_r))
        assert abs(rep.final_merit - theta) <= 1e-12 * max(1.0, abs(theta))

    def test_distance_absent_without_reference(self, tmp_path):
        names = [n for n in list_problems() if registry_lookup(n).reference is None]
        for name in names:
            _, _, rep = solve(tmp_path, name, tag=name)
            assert "distance_to_reference" not in rep
        for name in set(list_problems()) - set(names):
            assert run(RunConfig(problem=name)).to_dict()["distance_to_reference"] is not None

    def test_checks_in_report(self, tmp_path):
        code, _, rep = solve(tmp_path, "ex3_14", "--check-cq", "--fd-check")
        assert code == 0
        assert rep["bilevel_wnnamcq"] is True
        (cluster,) = [c for c in rep["cq_verdicts"] if c["settled"]][:1]
        assert any(v["kind"] == "WNNAMCQ" and v["holds"] for v in cluster["verdicts"])
        assert rep["fd_check"] and all(v["ok"] for v in rep["fd_check"].values())

    def test_plot_data(self, tmp_path):
        plot = tmp_path / "p.tsv"
        code, _, rep = solve(tmp_path, "ex3_14", "--emit-plot-data", str(plot))
        lines = plot.read_text().splitlines()
        assert lines[0].split("\t") == ["k", "merit", "d_norm", "rho"]
        assert len(lines) - 1 == rep["iterations"]

    def test_plot_data_default_path(self, tmp_path):
        main(["solve", "halfline", "--out-trace", str(tmp_path / "t.csv"), "--emit-plot-data"])
        assert (tmp_path / "t.plot.tsv").exists()

    def test_x0_override(self, tmp_path):
        code, trace, _ = solve(tmp_path, "ex3_14", "--x0", "0.4,0.2")
        with open(trace) as fh:
            first = list(csv.DictReader(fh))[0]
        assert (float(first["x[0]"]), float(first["x[1]"])) == (0.4, 0.2)

    def test_summary_on_stdout(self, tmp_path, capsys):
        solve(tmp_path, "halfline")
        out = json.loads(capsys.readouterr().out)
        assert out["problem"] == "halfline" and out["status"] == "converged"


class TestExitCodes:
    def test_table(self):
        assert EXIT_CODES[driver.CONVERGED] == 0 and EXIT_CODES[driver.MAX_ITER] == 2
        assert EXIT_CODES[driver.LINE_SEARCH_FAILURE] == 3 and EXIT_CODES[driver.QP_FAILURE] == 4
        assert EXIT_CONFIG == 5 and EXIT_CODES[driver.EVALUATION_FAILURE] == 6

    def test_unknown_problem(self, tmp_path, capsys):
        report = tmp_path / "r.json"
        assert main(["solve", "nope", "--out-report", str(report)]) == EXIT_CONFIG
        rep = json.loads(report.read_text())
        assert rep["status"] == "config_error" and "mirrlees" in rep["message"]
        assert "error" in capsys.readouterr().err

    def test_max_iter(self, tmp_path):
        cfg = write_config(tmp_path, {"spec": 1, "solver": {"max_iter": 2}})
        code, _, rep = solve(tmp_path, "ex3_14", "--config", cfg)
        assert code == 2 and rep["status"] == "max_iter" and rep["iterations"] == 2

    def test_bad_x0_dimension(self, tmp_path):
        assert main(["solve", "ex3_14", "--x0", "1,2,3"]) == EXIT_CONFIG

    def test_unreadable_config(self, tmp_path):
        assert main(["solve", "ex3_14", "--config", str(tmp_path / "missing.json")]) == EXIT_CONFIG

    def test_bad_solver_value(self, tmp_path):
        cfg = write_config(tmp_path, {"spec": 1, "solver": {"beta": 2.0}})
        assert main(["solve", "ex3_14", "--config", cfg]) == EXIT_CONFIG


class TestConfig:
    def test_full_document(self):
        cfg = RunConfig.from_json({"spec": 1, "problem": "mirrlees", "x0": [0.5, 0.3],
                                   "solver": {"max_iter": 50}, "quadrature": {"quad_tol": 1e-9},
                                   "outputs": {"trace": "t.csv", "report": "r.json", "plot": "p.tsv"},
                                   "checks": {"cq_check": True}})
        assert cfg.problem == "mirrlees" and cfg.solver == {"max_iter": 50}
        assert cfg.trace_path == "t.csv" and cfg.plot_path == "p.tsv" and cfg.cq_check
        assert cfg.interiority_check and not cfg.fd_check

    @pytest.mark.parametrize("data", [
        {"problem": "ex3_14"},
        {"spec": 2, "problem": "ex3_14"},
        {"spec": 1},
        {"spec": 1, "problem": "ex3_14", "colour": "blue"},
        {"spec": 1, "problem": "ex3_14", "outputs": {"svg": "x"}},
        [1, 2],
    ])
    def test_rejected(self, data):
        with pytest.raises(ConfigError):
            RunConfig.from_json(data)

    def test_command_line_problem_must_agree(self):
        with pytest.raises(ConfigError):
            RunConfig.from_json({"spec": 1, "problem": "ex3_14"}, "mirrlees")
        assert RunConfig.from_json({"spec": 1}, "ex3_14").problem == "ex3_14"

    def test_config_file_drives_solver(self, tmp_path):
        cfg = write_config(tmp_path, {"spec": 1, "problem": "ex3_14", "x0": [0.3, 0.3],
                                      "outputs": {"report": str(tmp_path / "out.json")}})
        assert main(["solve", "ex3_14", "--config", cfg]) == 0
        assert json.loads((tmp_path / "out.json").read_text())["status"] == "converged"

    def test_parse_vector(self):
        np.testing.assert_array_equal(parse_vector("1, -2.5,3e-1"), [1.0, -2.5, 0.3])
        with pytest.raises(ConfigError):
            parse_vector("1,,x")


class TestListAndAudit:
    def test_list(self, capsys):
        assert main(["list"]) == 0
        names = [line.split()[0] for line in capsys.readouterr().out.splitlines()]
        assert names == list_problems()
        assert {"mirrlees", "ex3_14", "ex3_20"} <= set(names)

    @pytest.mark.parametrize("name", ["ex3_14", "halfline", "l1_ball"])
    def test_audit_passes(self, name, capsys):
        assert main(["audit", name]) == 0
        result = json.loads(capsys.readouterr().out)
        assert result["ok"]

    def test_audit_unknown(self):
        assert main(["audit", "nope"]) == EXIT_CONFIG

    def test_fd_step(self):
        assert fd_step(1.0) == 1e-6 and fd_step(1e6) == 1e-8


def test_module_entry_point(tmp_path):
    env = dict(os.environ, SMOOTHSQP_SEED="3")
    proc = subprocess.run([sys.executable, "-m", "smoothsqp.cli", "solve", "halfline",
                           "--out-report", str(tmp_path / "r.json")], capture_output=True, text=True, env=env)
    assert proc.returncode == 0, proc.stderr
    assert json.loads((tmp_path / "r.json").read_text())["status"] == "converged"
