import json

import pytest

from bivmeta import __version__
from bivmeta.cli import EXIT_NUMERIC, EXIT_OK, EXIT_USER, dispatch, pmf_residuals
from bivmeta.core_types import bundled_path

CML = str(bundled_path("cml.csv"))
QUICK = ["--chains", "2", "--iters", "150", "--warmup", "150"]


def test_version(capsys):
    assert dispatch(["--version"]) == EXIT_OK
    out = capsys.readouterr().out
    assert __version__ in out and "build" in out


def test_no_command_and_unknown_flag():
    assert dispatch([]) == EXIT_USER
    assert dispatch(["spearman", "--bogus", "1"]) == EXIT_USER
    assert dispatch(["frobnicate"]) == EXIT_USER


def test_spearman_zero(capsys):
    assert dispatch(["spearman", "--theta", "0"]) == EXIT_OK
    assert capsys.readouterr().out.strip() == "0"


def test_spearman_inverse(capsys):
    assert dispatch(["spearman", "--rho", "0.75"]) == EXIT_OK
    assert float(capsys.readouterr().out) == pytest.approx(6.725813, abs=1e-5)
    assert dispatch(["spearman", "--rho", "1.0"]) == EXIT_USER


def test_pmf_check_passes():
    assert dispatch(["pmf-check", "--n", "50", "--p1", "0.3", "--p2", "0.9", "--theta", "8"]) == EXIT_OK
    res = pmf_residuals(20, 30, 0.5, 0.2, -4.0)
    assert abs(res["total_minus_one"]) < 1e-12 and res["min_cell"] >= 0
    assert dispatch(["pmf-check", "--n", "5", "--p1", "1.5", "--p2", "0.5", "--theta", "1"]) == EXIT_USER


def test_fit_ib_writes_summary_and_manifest(tmp_path):
    out = tmp_path / "out"
    assert dispatch(["fit", "--model", "brma-ib", "--data", CML, "--seed", "7", "--out", str(out)] + QUICK) == EXIT_OK
    summary = json.loads((out / "summary.json").read_text())
    assert summary["model"] == "brma-ib"
    assert summary["summaries"][0]["parameter"] == "rho_b"
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["subcommand"] == "fit" and manifest["seed"] == 7
    assert manifest["version"] == __version__ and len(manifest["inputs"]) == 1


def test_fit_is_deterministic(tmp_path):
    args = ["fit", "--model", "brma", "--rho-w", "0.3", "--data", CML, "--seed", "3"] + QUICK
    assert dispatch(args + ["--out", str(tmp_path / "a"), "--trace", "t.csv"]) == EXIT_OK
    assert dispatch(args + ["--out", str(tmp_path / "b"), "--trace", "t.csv"]) == EXIT_OK
    for name in ("summary.json", "t.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_fit_bc_without_theta_names_flags(tmp_path, capsys):
    code = dispatch(["fit", "--model", "brma-bc", "--data", CML, "--out", str(tmp_path)])
    assert code == EXIT_USER
    assert "--theta-a" in capsys.readouterr().err


def test_fit_brma_needs_rho_w(tmp_path, capsys):
    assert dispatch(["fit", "--model", "brma", "--data", CML, "--out", str(tmp_path)]) == EXIT_USER
    assert "--rho-w" in capsys.readouterr().err


def test_fit_bad_data(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("x,y\n1,2\n")
    assert dispatch(["fit", "--model", "brma-ib", "--data", str(bad), "--out", str(tmp_path / "o")]) == EXIT_USER
    assert dispatch(["fit", "--model", "brma-ib", "--data", str(tmp_path / "nope.csv"),
                     "--out", str(tmp_path / "o")]) == EXIT_USER


def test_trace_cannot_escape_out(tmp_path):
    code = dispatch(["fit", "--model", "brma-ib", "--data", CML, "--out", str(tmp_path / "o"),
                     "--trace", "../escape.csv"] + QUICK)
    assert code == EXIT_USER
    assert not (tmp_path / "escape.csv").exists()


def test_config_file_merges_and_flags_win(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"model": "brma", "rho_w": 0.2, "chains": 2, "iters": 150, "warmup": 150, "seed": 1}))
    out = tmp_path / "o"
    code = dispatch(["fit", "--config", str(cfg), "--data", CML, "--out", str(out), "--seed", "5"])
    assert code == EXIT_OK
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 5 and manifest["config"]["rho_w"] == 0.2


def test_elicit_then_fit_with_theta_prior(tmp_path):
    prior = tmp_path / "theta.json"
    code = dispatch(["elicit", "--b-outer", "200", "--b-inner", "200", "--target", "theta", "--out", str(prior)])
    assert code == EXIT_OK
    obj = json.loads(prior.read_text())
    assert obj["theta_ctrl"]["mean"] > 0 and obj["theta_trt"]["mean"] > 0
    out = tmp_path / "fit"
    code = dispatch(["fit", "--model", "brma-bc", "--data", CML, "--theta-prior", str(prior), "--out", str(out)]
                    + QUICK)
    assert code == EXIT_OK
    names = [s["parameter"] for s in json.loads((out / "summary.json").read_text())["summaries"]]
    assert "theta_ctrl" in names


def test_fit_bc_fixed_theta_json_path(tmp_path):
    out = tmp_path / "res.json"
    code = dispatch(["fit", "--model", "brma-bc", "--data", CML, "--theta-a", "2", "--theta-b", "1",
                     "--out", str(out)] + QUICK)
    assert code == EXIT_OK and out.exists()


def test_simulate_small(tmp_path):
    out = tmp_path / "sim"
    code = dispatch(["--threads", "1", "simulate", "--scenario", "eta=0,assoc=weak,m=40", "--reps", "1",
                     "--studies", "4", "--bootstrap", "20", "--out", str(out)] + QUICK)
    assert code == EXIT_OK
    header = (out / "performance.csv").read_text().splitlines()[0]
    assert header == "model,parameter,bias,coverage,rmse"
    assert (out / "manifest.json").exists() and (out / "replications.jsonl").exists()
    assert dispatch(["simulate", "--scenario", "eta=0,assoc=mild,m=40", "--out", str(out)]) == EXIT_USER


def test_reproduce_small(tmp_path):
    out = tmp_path / "case"
    code = dispatch(["reproduce", "--b-outer", "200", "--b-inner", "200", "--out", str(out)] + QUICK)
    assert code == EXIT_OK
    table = (out / "table2.txt").read_text()
    for fit in ("BRMA", "BRMA-IB", "BRMA-BC"):
        assert fit in table
    header = (out / "rho_b_draws.csv").read_text().splitlines()[0]
    assert header.split(",")[0] == "BRMA"


def test_numerical_failure_exit_code(monkeypatch):
    import bivmeta.cli as cli

    def boom(args):
        raise FloatingPointError("non-finite draws")

    monkeypatch.setitem(cli.COMMANDS, "spearman", boom)
    assert dispatch(["spearman", "--theta", "1"]) == EXIT_NUMERIC


def test_config_unknown_key(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"model": "brma", "colour": "red"}))
    assert dispatch(["fit", "--config", str(cfg), "--data", CML, "--out", str(tmp_path / "o")]) == EXIT_USER
