import json

import numpy as np
import pytest

from ordcut.cli import ConfigError, RunConfig, _parse_resolution, main
from ordcut.fnspaces import Grid, PiecewiseFn, SingularMask


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def identity_out(tmp_path_factory):
    out = tmp_path_factory.mktemp("identity")
    assert main(["solve", "--problem", "identity_smoke", "--out", str(out)]) == 0
    return out


def test_solve_identity(identity_out):
    report = json.loads((identity_out / "report.json").read_text())
    assert report["image_defect"] == pytest.approx(0.025, abs=1e-12)
    assert report["status"] == "ok" and "timestamp" in report["meta"]
    cut = json.loads((identity_out / "cut.json").read_text())
    assert cut["epsilons"] == [0.4, 0.2, 0.1, 0.05] and cut["case"] == "identity_smoke"
    names = sorted(p.name for p in (identity_out / "levels").iterdir())
    assert names == sorted(f"{s}_{k}.{e}" for s in ("sub", "super") for k in range(4) for e in ("csv", "json"))
    plot = (identity_out / "plot.gp").read_text()
    assert "levels/sub_0.csv" in plot and "splot" in plot


def test_solve_then_verify_every_level(identity_out, capsys):
    for path in sorted((identity_out / "levels").glob("*.json")):
        code, out, _ = run(capsys, "verify", "--problem", "identity_smoke", "--candidate", path)
        assert code == 0, out
        assert json.loads(out)["pass_fraction"] == 1.0


def test_verify_accepts_interval_candidate(identity_out, tmp_path, capsys):
    cut = json.loads((identity_out / "cut.json").read_text())
    path = tmp_path / "lower.json"
    path.write_text(json.dumps(cut["lower"]))
    code, out, _ = run(capsys, "verify", "--problem", "identity_smoke", "--candidate", path, "--eps", 0.05, "--side", "sub")
    assert code == 0 and json.loads(out)["max"] == pytest.approx(-0.025)


def test_malformed_equation(tmp_path, capsys):
    path = tmp_path / "bad.pde"
    path.write_text("dt(u +\n[domain]\nbounds = [[0, 1]]\n")
    code, _, err = run(capsys, "solve", "--problem", path, "--out", tmp_path / "o")
    assert code == 2 and "at byte 5" in err


def test_resolution_two_is_rejected(tmp_path, capsys):
    code, _, err = run(capsys, "solve", "--problem", "riccati", "--grid", 2, "--out", tmp_path)
    assert code == 2 and "resolution" in err


@pytest.mark.parametrize(
    "flags",
    [["--eps0", "-1"], ["--levels", "31"], ["--levels", "0"], ["--samples", "0"], ["--allow", "0"], ["--grid", "abc"]],
)
def test_config_validation(flags, tmp_path, capsys):
    assert run(capsys, "solve", "--problem", "riccati", "--out", tmp_path, *flags)[0] == 2


def test_unknown_problem_file(tmp_path, capsys):
    assert run(capsys, "solve", "--problem", tmp_path / "missing.pde", "--out", tmp_path)[0] == 4


def test_bad_flag(capsys):
    assert run(capsys, "solve", "--bogus")[0] == 2


def _riccati_candidate(tmp_path, values):
    grid = Grid(((0.0, 0.9),), (257,))
    u = PiecewiseFn(grid, values, SingularMask.empty(grid.shape))
    path = tmp_path / "cand.json"
    path.write_text(json.dumps(u.to_json()))
    return path


def test_zero_is_a_riccati_solution(tmp_path, capsys):
    code, out, _ = run(capsys, "verify", "--problem", "riccati", "--candidate", _riccati_candidate(tmp_path, np.zeros(257)))
    report = json.loads(out)
    assert code == 0 and report["min"] == 0.0 and report["max"] == 0.0


def test_bump_fails_verification(tmp_path, capsys):
    eps = 0.4 / 2**4
    values = np.zeros(257)
    values[128] = 2 * eps
    code, out, _ = run(capsys, "verify", "--problem", "riccati",
                       "--candidate", _riccati_candidate(tmp_path, values), "--eps", eps)
    assert code == 1 and json.loads(out)["pass_fraction"] < 1


def test_verify_schema_mismatch(tmp_path, capsys):
    path = tmp_path / "junk.json"
    path.write_text(json.dumps({"grid": 3}))
    assert run(capsys, "verify", "--problem", "riccati", "--candidate", path)[0] == 2
    path.write_text("not json")
    assert run(capsys, "verify", "--problem", "riccati", "--candidate", path)[0] == 2


def test_verify_dimension_mismatch(identity_out, capsys):
    path = identity_out / "levels" / "sub_0.json"
    assert run(capsys, "verify", "--problem", "riccati", "--candidate", path)[0] == 2


def test_bench_unknown_case(capsys):
    code, _, err = run(capsys, "bench", "lewy")
    assert code == 2 and "riccati" in err and "poisson_square" in err


def test_bench_filter_runs_one_case(tmp_path, capsys):
    code, out, _ = run(capsys, "bench", "identity_smoke", "--out", tmp_path)
    assert code == 0 and out.splitlines() == ["PASS identity_smoke"]
    suite = json.loads((tmp_path / "bench.json").read_text())
    assert [c["case"] for c in suite["cases"]] == ["identity_smoke"] and suite["passed"]
    assert "timestamp" in json.loads((tmp_path / "bench_meta.json").read_text())


def test_bench_is_deterministic_and_jobs_invariant(tmp_path, capsys, monkeypatch):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(capsys, "bench", "identity_smoke", "riccati", "--out", a)[0] == 0
    monkeypatch.setenv("ORDCUT_JOBS", "2")
    assert run(capsys, "bench", "identity_smoke", "riccati", "--out", b)[0] == 0
    assert (a / "bench.json").read_bytes() == (b / "bench.json").read_bytes()


def test_bad_jobs_env(monkeypatch, capsys):
    monkeypatch.setenv("ORDCUT_JOBS", "many")
    assert run(capsys, "bench", "identity_smoke")[0] == 2


def test_run_config_invariants():
    with pytest.raises(ConfigError):
        RunConfig(resolution=(1026,))
    with pytest.raises(ConfigError):
        RunConfig(seed=-1)
    assert RunConfig(levels=30).levels == 30


@pytest.mark.parametrize("text, res", [("257", (257,)), ("129,129", (129, 129)), ("129x65", (129, 65)), (None, None)])
def test_parse_resolution(text, res):
    assert _parse_resolution(text) == res
