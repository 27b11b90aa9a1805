import json
import math

import pytest

from sigmak.cli import main
from sigmak.reports import CheckReport, observed_orders


def write(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


BUBBLE = {"problem": {"manufactured": "bubble-positive", "n": 3, "k": 2}, "grid": 17}


def test_default_suite_passes(tmp_path, capsys):
    cfg = write(tmp_path, dict(BUBBLE, output="out"))
    assert main(["verify", cfg]) == 0
    run = json.loads((tmp_path / "out" / "run.json").read_text())
    assert run["summary"]["pass"] and run["summary"]["failed"] == []
    names = [c["name"] for c in run["checks"]]
    assert "reverse_holder_probe" in names and "concavity_dq_check" in names
    assert (tmp_path / "out" / "concavity_dq_check.csv").exists()
    assert "PASS" in capsys.readouterr().out


def test_output_is_deterministic(tmp_path):
    cfg = write(tmp_path, BUBBLE)
    assert main(["verify", cfg, "--output", str(tmp_path / "a")]) == 0
    assert main(["verify", cfg, "--output", str(tmp_path / "b")]) == 0
    for f in ("run.json", "verify_div_f.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_env_output_dir(tmp_path, monkeypatch):
    monkeypatch.setenv("SIGMAK_OUTPUT_DIR", str(tmp_path / "env"))
    cfg = write(tmp_path, dict(BUBBLE, checks=["admissibility"], output="ignored"))
    assert main(["verify", cfg]) == 0
    assert (tmp_path / "env" / "run.json").exists()
    assert not (tmp_path / "ignored").exists()


def test_failing_check_exits_one(tmp_path):
    # a saddle leaves Gamma_2 everywhere
    cfg = write(tmp_path, {
        "problem": {
            "spec": {"n": 3, "k": 2, "box": {"lo": [-1, -1, -1], "hi": [1, 1, 1]},
                     "h_model": {"variant": "Zero"}, "f_model": {"expression": "1"}},
            "field": "x1**2 - 3*x2**2 + x3**2",
        },
        "checks": ["admissibility"],
        "output": "out",
    })
    assert main(["verify", cfg]) == 1


@pytest.mark.parametrize(
    "cfg,argv_extra",
    [
        (dict(BUBBLE, checks=["no_such_check"]), []),
        ({"grid": 9}, []),
        ({"problem": {"manufactured": "nope"}}, []),
        (dict(BUBBLE, checks=["mms_convergence"], problem={"spec": {"n": 3, "k": 2, "box": {"lo": [0, 0, 0], "hi": [1, 1, 1]}, "f_model": {"expression": "1"}}, "field": "x1**2+x2**2+x3**2"}), []),
        (dict(BUBBLE), ["--check", "bogus"]),
    ],
)
def test_configuration_errors_exit_two(tmp_path, cfg, argv_extra):
    assert main(["verify", write(tmp_path, cfg), "--output", str(tmp_path / "o")] + argv_extra) == 2


def test_missing_and_malformed_files(tmp_path):
    assert main(["verify", str(tmp_path / "absent.json")]) == 2
    (tmp_path / "bad.json").write_text("{not json")
    assert main(["verify", str(tmp_path / "bad.json")]) == 2
    cfg = write(tmp_path, dict(BUBBLE, problem=dict(BUBBLE["problem"], field_path="missing.csv")))
    assert main(["verify", cfg]) == 2
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2


def test_threshold_exit_three(tmp_path, capsys):
    assert main(["moser", "--k", "2", "--n", "3", "--p", "3", "--case", "case1"]) == 3
    cfg = write(tmp_path, dict(BUBBLE, checks=[{"name": "reverse_holder_probe", "q": 2}]))
    assert main(["verify", cfg, "--output", str(tmp_path / "o")]) == 3
    assert "threshold" in capsys.readouterr().err


def test_moser_table(tmp_path, capsys):
    assert main(["moser", "--k", "2", "--n", "3", "--p", "4", "--case", "case1", "--rows", "3", "--output", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "beta=3/2" in out and "limit of q_j / beta^j: 1 " in out
    d = json.loads((tmp_path / "moser.json").read_text())
    assert d["beta"] == "3/2" and d["limit"] == "1"
    assert main(["moser", "--k", "3", "--n", "3", "--p", "10", "--case", "k>=3-general"]) == 0
    assert "beta=9/4" in capsys.readouterr().out


def test_solve_and_reload(tmp_path):
    cfg = write(tmp_path, {"problem": {"manufactured": "bubble-positive"}, "solve": {"grid": 9}, "output": "out"})
    assert main(["solve", cfg]) == 0
    solved = json.loads((tmp_path / "out" / "solve.json").read_text())
    assert solved["converged"]
    # the solved field feeds back into verify
    cfg2 = write(tmp_path, {"problem": {"manufactured": "bubble-positive", "field_path": "out/solution.csv"},
                            "checks": ["admissibility", "cancellation_identity_checks"]}, "cfg2.json")
    assert main(["verify", cfg2, "--output", str(tmp_path / "o2")]) == 0


def test_solve_missing_boundary(tmp_path):
    cfg = write(tmp_path, {"problem": {"manufactured": "bubble-positive"}, "solve": {"boundary": "nowhere.csv"}})
    assert main(["solve", cfg, "--output", str(tmp_path / "o")]) == 2


def test_sweep_grid_orders(tmp_path):
    cfg = write(tmp_path, {"problem": {"manufactured": "perturbed-bubble"}, "output": "out",
                           "sweep": {"check": "vh_convergence", "axis": "grid", "values": [9, 17, 33], "multiples": [1]}})
    assert main(["sweep", cfg]) == 0
    d = json.loads((tmp_path / "out" / "sweep.json").read_text())
    # grid 9 is pre-asymptotic; the finest pair carries the rate
    assert d["summary"]["orders"][-1] > 1.8
    assert (tmp_path / "out" / "sweep_vh_convergence_grid.csv").read_text().startswith("axis,value,metric")


def test_observed_orders_and_report_csv():
    assert observed_orders([0.2, 0.1], [4e-2, 1e-2]) == pytest.approx([2.0])
    assert observed_orders([0.2, 0.1], [1e-16, 1e-17], floor=1e-13) == [math.inf]
    r = CheckReport("x", "y", levels=[{"h": 0.1, "e": float("nan")}, {"h": 0.05, "e": 1.0}])
    assert r.to_csv().splitlines()[0] == "h,e"
    json.dumps(r.to_dict())
