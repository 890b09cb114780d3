"""CLI behavior: config validation, file outputs, exit codes, determinism.

Runs main() in process so stdout/stderr land in capsys; one subprocess
test covers the installed console script.
"""

import csv
import json
import math
import subprocess
import sys

import numpy as np
import pytest

from riskmpc import cli


def run(capsys, *argv):
    code = cli.main(list(argv))
    cap = capsys.readouterr()
    return code, cap.out, cap.err


def write_cfg(tmp_path, fields, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(fields))
    return str(p)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def solve_cfg(**over):
    cfg = {"problem": {"name": "example1"}, "risk": {"kind": "expectation"},
           "horizon": 3, "x0": 1.5}
    cfg.update(over)
    return cfg


class TestConfigValidation:
    def test_missing_required_field_names_it(self, tmp_path, capsys):
        cfg = solve_cfg()
        del cfg["horizon"]
        code, _, err = run(capsys, "solve", "--config", write_cfg(tmp_path, cfg),
                           "--out", str(tmp_path / "o"))
        assert code == 2
        assert "horizon" in err

    def test_unknown_field_rejected(self, tmp_path, capsys):
        code, _, err = run(capsys, "solve", "--config",
                           write_cfg(tmp_path, solve_cfg(bogus=1)),
                           "--out", str(tmp_path / "o"))
        assert code == 2
        assert "bogus" in err

    def test_kl_requires_c(self, tmp_path, capsys):
        cfg = solve_cfg(risk={"kind": "kl_divergence"})
        code, _, err = run(capsys, "solve", "--config", write_cfg(tmp_path, cfg),
                           "--out", str(tmp_path / "o"))
        assert code == 2
        assert "$.risk.c" in err

    def test_avar_requires_alpha(self, tmp_path, capsys):
        cfg = solve_cfg(risk={"kind": "avar_softplus"})
        code, _, err = run(capsys, "solve", "--config", write_cfg(tmp_path, cfg),
                           "--out", str(tmp_path / "o"))
        assert code == 2
        assert "alpha" in err

    def test_gamma_only_for_example2(self, tmp_path, capsys):
        cfg = solve_cfg(problem={"name": "example1", "gamma": 10})
        code, _, err = run(capsys, "solve", "--config", write_cfg(tmp_path, cfg),
                           "--out", str(tmp_path / "o"))
        assert code == 2
        assert "gamma" in err

    def test_malformed_json(self, tmp_path, capsys):
        p = tmp_path / "broken.json"
        p.write_text("{not json")
        code, _, err = run(capsys, "solve", "--config", str(p))
        assert code == 2
        assert "JSON" in err

    def test_missing_config_file(self, tmp_path, capsys):
        code, _, err = run(capsys, "solve", "--config",
                           str(tmp_path / "nope.json"))
        assert code == 2

    def test_theta_needs_parametric_spec(self, tmp_path, capsys):
        cfg = solve_cfg(theta=[1.0])
        code, _, err = run(capsys, "solve", "--config", write_cfg(tmp_path, cfg),
                           "--out", str(tmp_path / "o"))
        assert code == 2
        assert "theta" in err

    def test_jobs_flag_rejected_outside_pools(self, tmp_path, capsys):
        code, _, err = run(capsys, "solve", "--config",
                           write_cfg(tmp_path, solve_cfg()), "--jobs", "2",
                           "--out", str(tmp_path / "o"))
        assert code == 2
        assert "--jobs" in err

    def test_bad_jobs_env(self, tmp_path, capsys, monkeypatch):
        monkeypatch.setenv("RISKMPC_JOBS", "many")
        cfg = {"problem": {"name": "example1"},
               "risk": {"kind": "expectation"}, "horizons": [3], "x0": 1.5}
        code, _, err = run(capsys, "turnpike", "--config",
                           write_cfg(tmp_path, cfg),
                           "--out", str(tmp_path / "o"))
        assert code == 2
        assert "RISKMPC_JOBS" in err


class TestSolve:
    def test_example1_n3_writes_15_nodes(self, tmp_path, capsys):
        out = tmp_path / "o"
        code, msg, _ = run(capsys, "solve", "--config",
                           write_cfg(tmp_path, solve_cfg()), "--out", str(out))
        assert code == 0
        rows = read_csv(out / "ocp_solution.csv")
        assert len(rows) == 15
        # leaves carry no control
        leaves = [r for r in rows if r["depth"] == "3"]
        assert len(leaves) == 8
        assert all(r["control"] == "" for r in leaves)
        assert all(r["control"] != "" for r in rows if r["depth"] != "3")
        man = json.loads((out / "manifest.json").read_text())
        assert man["command"] == "solve"
        assert man["diagnostics"]["converged"] is True
        assert man["config"]["horizon"] == 3

    def test_stage_summary_has_theta_columns_for_kl(self, tmp_path, capsys):
        cfg = solve_cfg(problem={"name": "example2"},
                        risk={"kind": "kl_divergence", "c": 0.5}, horizon=2)
        out = tmp_path / "o"
        code, _, _ = run(capsys, "solve", "--config", write_cfg(tmp_path, cfg),
                         "--out", str(out))
        assert code == 0
        rows = read_csv(out / "stage_summary.csv")
        assert len(rows) == 2
        assert {"theta_0", "theta_1"} <= set(rows[0])
        assert float(rows[0]["theta_1"]) > 0

    def test_rerun_is_byte_identical(self, tmp_path, capsys):
        cfgp = write_cfg(tmp_path, solve_cfg())
        a, b = tmp_path / "a", tmp_path / "b"
        assert run(capsys, "solve", "--config", cfgp, "--out", str(a))[0] == 0
        assert run(capsys, "solve", "--config", cfgp, "--out", str(b))[0] == 0
        for name in ("ocp_solution.csv", "stage_summary.csv"):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_flag_overrides_config(self, tmp_path, capsys):
        out = tmp_path / "o"
        code, _, _ = run(capsys, "solve", "--config",
                         write_cfg(tmp_path, solve_cfg()), "--out", str(out),
                         "--horizon", "2")
        assert code == 0
        assert len(read_csv(out / "ocp_solution.csv")) == 7
        man = json.loads((out / "manifest.json").read_text())
        assert man["config"]["horizon"] == 2

    def test_frozen_theta_costs_at_least_the_optimum(self, tmp_path, capsys):
        base = {"problem": {"name": "example2"},
                "risk": {"kind": "kl_divergence", "c": 0.5},
                "horizon": 2, "x0": 1.5}
        free, frozen = tmp_path / "free", tmp_path / "frozen"
        assert run(capsys, "solve", "--config", write_cfg(tmp_path, base),
                   "--out", str(free))[0] == 0
        cfg = dict(base, theta=[2.0, 4.0])
        assert run(capsys, "solve", "--config",
                   write_cfg(tmp_path, cfg, "f.json"),
                   "--out", str(frozen))[0] == 0
        j_free = json.loads((free / "manifest.json").read_text())
        j_frozen = json.loads((frozen / "manifest.json").read_text())
        assert (j_frozen["diagnostics"]["objective"]
                >= j_free["diagnostics"]["objective"] - 1e-9)

    def test_tree_cap_exits_4(self, tmp_path, capsys):
        code, _, err = run(capsys, "solve", "--config",
                           write_cfg(tmp_path, solve_cfg(horizon=20)),
                           "--out", str(tmp_path / "o"))
        assert code == 4
        assert "node" in err


@pytest.fixture(scope="module")
def tp_outputs(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("tp")
    cfg = {"problem": {"name": "example1"}, "risk": {"kind": "expectation"},
           "horizons": [3, 5], "n_long": 7, "x0": 1.5}
    out = tmp / "o"
    assert cli.main(["turnpike", "--config", write_cfg(tmp, cfg),
                     "--out", str(out)]) == 0
    return out


class TestTurnpike:
    def test_trajectory_files_per_horizon(self, tp_outputs):
        outputs = tp_outputs
        for N, paths in ((3, 8), (5, 32)):
            rows = read_csv(outputs / f"trajectories_N{N}.csv")
            assert len(rows) == paths * (N + 1)
            probs = {}
            for r in rows:
                probs[r["path"]] = float(r["prob"])
            assert math.isclose(sum(probs.values()), 1.0, abs_tol=1e-12)
            # terminal stage carries no control
            assert all((r["control"] == "") == (r["k"] == str(N))
                       for r in rows)

    def test_distance_rows_and_terminal_blanks(self, tp_outputs):
        rows = read_csv(tp_outputs / "distances.csv")
        assert [(r["N"], r["k"]) for r in rows] == \
            [(str(N), str(k)) for N in (3, 5) for k in range(N + 1)]
        for r in rows:
            terminal = r["k"] == r["N"]
            assert (r["stage_cost"] == "") == terminal
            assert float(r["d_wasserstein"]) >= 0

    def test_stationary_json(self, tp_outputs):
        doc = json.loads((tp_outputs / "stationary.json").read_text())
        assert doc["horizon"] == 7 and doc["stage"] == 3
        assert doc["theta_s"] == []
        assert math.isclose(sum(doc["x_probs"]), 1.0, abs_tol=1e-12)
        assert len(doc["x_atoms"]) == len(doc["x_probs"])


class TestMpc:
    def test_implementable_trace(self, tmp_path, capsys):
        cfg = solve_cfg(algorithm="implementable", steps=4, paths=6)
        out = tmp_path / "o"
        code, _, _ = run(capsys, "mpc", "--config", write_cfg(tmp_path, cfg),
                         "--out", str(out))
        assert code == 0
        rows = read_csv(out / "trace.csv")
        assert len(rows) == 6 * 4
        doc = json.loads((out / "summary.json").read_text())
        assert doc["algorithm"] == "implementable"
        assert doc["n_solves"] + doc["n_memo_hits"] == 6 * 4
        assert np.isfinite(doc["j_avg"])
        # frozen-parameter cost column is empty for this algorithm
        assert all(r["stage_cost_theta"] == "" for r in rows)

    def test_abstract_law_doubles_then_summary(self, tmp_path, capsys):
        cfg = solve_cfg(algorithm="abstract", steps=3)
        out = tmp_path / "o"
        code, _, _ = run(capsys, "mpc", "--config", write_cfg(tmp_path, cfg),
                         "--out", str(out))
        assert code == 0
        law = read_csv(out / "law.csv")
        sizes = {}
        for r in law:
            sizes[int(r["step"])] = sizes.get(int(r["step"]), 0) + 1
        assert sizes == {0: 1, 1: 2, 2: 4, 3: 8}
        costs = read_csv(out / "stage_costs.csv")
        assert [int(r["atoms"]) for r in costs] == [1, 2, 4]
        doc = json.loads((out / "summary.json").read_text())
        assert doc["stderr"] is None
        assert doc["atom_counts"] == [1, 2, 4]

    def test_fixed_theta_echoes_parameter(self, tmp_path, capsys):
        cfg = {"problem": {"name": "example2"},
               "risk": {"kind": "kl_divergence", "c": 0.5},
               "algorithm": "fixed_theta", "theta": [1.5, 8.0],
               "horizon": 2, "steps": 3, "paths": 4, "x0": 1.5}
        out = tmp_path / "o"
        code, _, _ = run(capsys, "mpc", "--config", write_cfg(tmp_path, cfg),
                         "--out", str(out))
        assert code == 0
        doc = json.loads((out / "summary.json").read_text())
        assert doc["theta"] == [1.5, 8.0]
        assert "theta_source" not in doc
        rows = read_csv(out / "trace.csv")
        assert all(r["stage_cost_theta"] != "" for r in rows)

    def test_fixed_theta_estimates_when_absent(self, tmp_path, capsys):
        cfg = {"problem": {"name": "example2"},
               "risk": {"kind": "kl_divergence", "c": 0.5},
               "algorithm": "fixed_theta", "horizon": 2, "steps": 2,
               "paths": 4, "n_long": 5, "x0": 1.5}
        out = tmp_path / "o"
        code, _, _ = run(capsys, "mpc", "--config", write_cfg(tmp_path, cfg),
                         "--out", str(out))
        assert code == 0
        doc = json.loads((out / "summary.json").read_text())
        assert doc["theta_source"] == {"horizon": 5, "stage": 2}
        assert doc["theta"][1] > 0

    def test_theta_with_wrong_algorithm_rejected(self, tmp_path, capsys):
        cfg = solve_cfg(algorithm="implementable", steps=2, paths=2,
                        theta=[1.0])
        code, _, err = run(capsys, "mpc", "--config", write_cfg(tmp_path, cfg),
                           "--out", str(tmp_path / "o"))
        assert code == 2
        assert "fixed_theta" in err

    def test_atom_cap_exits_4(self, tmp_path, capsys):
        cfg = solve_cfg(algorithm="abstract", steps=10, exact_atom_cap=20)
        code, _, err = run(capsys, "mpc", "--config", write_cfg(tmp_path, cfg),
                           "--out", str(tmp_path / "o"))
        assert code == 4
        assert "cap" in err

    @pytest.mark.filterwarnings("ignore:overflow encountered")
    @pytest.mark.filterwarnings("ignore:invalid value encountered")
    def test_divergent_state_exits_3(self, tmp_path, capsys):
        cfg = solve_cfg(algorithm="implementable", steps=3, paths=2,
                        x0=1e200)
        code, _, err = run(capsys, "mpc", "--config", write_cfg(tmp_path, cfg),
                           "--out", str(tmp_path / "o"))
        assert code == 3


class TestSweep:
    def test_offsets_table(self, tmp_path, capsys):
        cfg = {"problem": {"name": "example2"},
               "risk": {"kind": "kl_divergence", "c": 0.5},
               "horizons": [2, 3], "theta_offsets": [[0, 0], [1.5, 1.5]],
               "steps": 2, "paths": 4, "n_long": 5, "x0": 1.5}
        out = tmp_path / "o"
        code, _, _ = run(capsys, "sweep", "--config", write_cfg(tmp_path, cfg),
                         "--out", str(out))
        assert code == 0
        rows = read_csv(out / "sweep.csv")
        assert [(r["horizon"], r["theta_label"]) for r in rows] == [
            ("2", "theta_s"), ("2", "theta_s+(1.5,1.5)"),
            ("3", "theta_s"), ("3", "theta_s+(1.5,1.5)")]
        assert len(set(r["stationary_cost"] for r in rows)) == 1
        assert all(r["algorithm"] == "fixed_theta" for r in rows)
        # offset rows sit 1.5 above the estimated parameter
        assert math.isclose(float(rows[1]["theta_0"]),
                            float(rows[0]["theta_0"]) + 1.5, abs_tol=1e-12)
        assert len(list((out / "cells").glob("cell_*.json"))) == 4

    def test_scales_label_and_jobs_determinism(self, tmp_path, capsys):
        cfg = {"problem": {"name": "example2"},
               "risk": {"kind": "kl_divergence", "c": 0.5},
               "horizons": [2], "theta_scales": [1.0, 0.75],
               "steps": 2, "paths": 4, "n_long": 5, "x0": 1.5}
        cfgp = write_cfg(tmp_path, cfg)
        a, b = tmp_path / "a", tmp_path / "b"
        assert run(capsys, "sweep", "--config", cfgp, "--out", str(a),
                   "--jobs", "1")[0] == 0
        assert run(capsys, "sweep", "--config", cfgp, "--out", str(b),
                   "--jobs", "2")[0] == 0
        rows = read_csv(a / "sweep.csv")
        assert [r["theta_label"] for r in rows] == ["theta_s", "0.75*theta_s"]
        assert (a / "sweep.csv").read_bytes() == (b / "sweep.csv").read_bytes()

    def test_offsets_and_scales_conflict(self, tmp_path, capsys):
        cfg = {"problem": {"name": "example2"},
               "risk": {"kind": "kl_divergence", "c": 0.5},
               "horizons": [2], "theta_offsets": [[0, 0]],
               "theta_scales": [1.0], "steps": 2, "paths": 4, "x0": 1.5}
        code, _, err = run(capsys, "sweep", "--config",
                           write_cfg(tmp_path, cfg),
                           "--out", str(tmp_path / "o"))
        assert code == 2

    def test_expectation_sweep_runs_base_algorithm(self, tmp_path, capsys):
        cfg = {"problem": {"name": "example1"},
               "risk": {"kind": "expectation"}, "horizons": [2, 3],
               "steps": 2, "paths": 4, "n_long": 5, "x0": 1.5}
        out = tmp_path / "o"
        code, _, _ = run(capsys, "sweep", "--config", write_cfg(tmp_path, cfg),
                         "--out", str(out))
        assert code == 0
        rows = read_csv(out / "sweep.csv")
        assert [r["algorithm"] for r in rows] == ["implementable"] * 2
        assert "theta_0" not in rows[0]


class TestRiskEvalAndCheck:
    def test_avar_exact_value(self, capsys):
        code, out, _ = run(capsys, "risk-eval", "--kind", "avar_exact",
                           "--alpha", "0.3", "--values", "1,2,3,4",
                           "--probs", "0.25,0.25,0.25,0.25")
        assert code == 0
        doc = json.loads(out)
        # worst 30%: all of atom 4 (mass .25) plus .05 of atom 3
        assert math.isclose(doc["value"], (0.25 * 4 + 0.05 * 3) / 0.3,
                            abs_tol=1e-12)
        assert doc["theta_star"] == [3.0]

    def test_kl_at_fixed_theta(self, capsys):
        code, out, _ = run(capsys, "risk-eval", "--kind", "kl_divergence",
                           "--c", "0.5", "--values", "1,2,3",
                           "--probs", "0.5,0.3,0.2", "--theta", "1.2,2.5")
        assert code == 0
        doc = json.loads(out)
        t1, t2 = 1.2, 2.5
        want = sum(p * (t1 * 0.5 + t2 + t1 * (math.exp((z - t2) / t1) - 1.0))
                   for z, p in ((1, 0.5), (2, 0.3), (3, 0.2)))
        assert math.isclose(doc["value"], want, rel_tol=1e-12)

    def test_bad_probs_exit_2(self, capsys):
        code, _, err = run(capsys, "risk-eval", "--kind", "expectation",
                           "--values", "1,2", "--probs", "0.9,0.2")
        assert code == 2

    def test_check_passes(self, capsys):
        code, out, _ = run(capsys, "check")
        assert code == 0
        assert "all checks passed" in out
        assert "FAIL" not in out

    def test_console_script(self, tmp_path):
        r = subprocess.run(
            [sys.executable, "-m", "riskmpc.cli", "risk-eval", "--kind",
             "expectation", "--values", "1,3", "--probs", "0.5,0.5"],
            capture_output=True, text=True)
        assert r.returncode == 0
        assert json.loads(r.stdout)["value"] == 2.0
