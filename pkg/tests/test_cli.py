import json
import subprocess
import sys

import pytest

from labelflow.cli import main
from labelflow.harness import bundled_path


def run(argv, capsys):
    code = main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


def test_simulate_writes_agent_table(tmp_path, capsys):
    out = tmp_path / "traj.csv"
    code, stdout, _ = run(["simulate", str(bundled_path("markov_single")), "--k", "8", "--out", str(out)], capsys)
    assert code == 0
    summary = json.loads(stdout)
    assert summary["steps"] == 8 and summary["N"] == 1
    assert out.read_text().startswith("time,agent_id,weight,x0,lambda0,lambda1\n")


def test_simulate_margin_violation_exits_3(capsys):
    code, stdout, stderr = run(["simulate", str(bundled_path("markov_margin")), "--k", "16"], capsys)
    assert code == 3
    assert json.loads(stdout)["T_f"] < 4.0
    assert "margin violated" in stderr


def test_invalid_scenario_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"d": 1, "n": 2, "label_dynamics": {"replicator": {"kind": "nope"}}, "initial": {"N": 1}}')
    code, _, stderr = run(["simulate", str(bad)], capsys)
    assert code == 2 and "nope" in stderr


def test_guard_abort_exits_3(tmp_path, capsys):
    sc = tmp_path / "stiff.json"
    sc.write_text(json.dumps({"d": 1, "n": 2, "initial": {"N": 1},
                              "label_dynamics": {"markov": {"kind": "constant",
                                                            "params": {"Q": [[-10, 20], [10, -20]]}}}}))
    code, _, stderr = run(["simulate", str(sc), "--k", "4"], capsys)
    assert code == 3 and "step size" in stderr
    code, _, stderr = run(["study", "convergence", str(sc), "--ks", "4,8"], capsys)
    assert code == 3 and "aborted at k=4" in stderr


def test_study_with_oracle(tmp_path, capsys):
    out = tmp_path / "study.json"
    code, stdout, _ = run(["study", "convergence", str(bundled_path("markov_single")), "--ks", "16,32",
                           "--oracle", "--out", str(out), "--threads", "pinned"], capsys)
    assert code == 0 and "slope(w1_gap)" in stdout
    report = json.loads(out.read_text())
    assert [r["k"] for r in report["rows"]] == [16, 32]
    assert all(r["runtime_s"] is None for r in report["rows"])


def test_pinned_studies_are_byte_identical(tmp_path, capsys):
    paths = [tmp_path / "a.csv", tmp_path / "b.csv"]
    for p in paths:
        assert run(["study", "residual", str(bundled_path("markov_clouds")), "--ks", "10,20", "--out", str(p),
                    "--threads", "pinned"], capsys)[0] == 0
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_prox_eval_kinds(capsys):
    code, stdout, _ = run(["prox", "eval", "--kind", "hellinger", "--lam-hat", "0.7,0.3", "--tau", "0.05",
                           "--payoff", "0.2,0.8"], capsys)
    assert code == 0 and json.loads(stdout)["converged"]
    code, stdout, _ = run(["prox", "eval", "--kind", "markov", "--lam-hat", "0.5,0.5", "--tau", "0.05",
                           "--Q", "[[-1,2],[1,-2]]"], capsys)
    assert code == 0 and json.loads(stdout)["lambda_new"][0] > 0.5
    code, _, _ = run(["prox", "eval", "--kind", "markov-surrogate", "--lam-hat", "0.2,0.3,0.5", "--tau", "0.1",
                      "--Q", "[[-1,2,0],[1,-3,2],[0,1,-2]]"], capsys)
    assert code == 0
    code, _, stderr = run(["prox", "eval", "--kind", "markov", "--lam-hat", "0.5,0.5", "--tau", "0.05"], capsys)
    assert code == 2 and "--Q" in stderr


def test_bad_arguments_exit_2(capsys):
    with pytest.raises(SystemExit) as info:
        main(["simulate", "x.json", "--threads", "zero"])
    assert info.value.code == 2
    capsys.readouterr()


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "labelflow", "simulate", str(bundled_path("minimal"))],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["scenario"] == "minimal"
