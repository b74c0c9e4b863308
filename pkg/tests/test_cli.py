"""Command-line front end: exit codes, outputs and determinism."""

import pytest

from sqgnash.cli import CORRUPT_ENV, main, run_verify

TOY_PARAMS = """\
# toy stage on coarse grids
a = 4.0
b = 1.25
beta = 0.3
alpha = 0.01
newton_n = 32
mollify_n = 32
dt_factor = 8
fine_substeps = 16
"""


def _basecase(out, n=64, lam=4, delta=1e-2, stride=64):
    return main(["basecase", "--n", str(n), "--lambda0", str(lam), "--delta0", str(delta),
                 "--out", str(out), "--stride", str(stride)])


def _read_meta(path):
    out = {}
    for line in open(path):
        if "=" in line:
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def test_basecase_writes_outputs(tmp_path, capsys):
    out = tmp_path / "base"
    assert _basecase(out) == 0
    assert "PASS" in capsys.readouterr().out
    meta = _read_meta(out / "meta.txt")
    assert meta["kind"] == "base" and meta["lambda0"] == "4"
    assert float(meta["residual_max"]) < 1e-8
    assert (out / "theta_00000.sqgf").exists() and (out / "R_00000.sqgf").exists()
    header = open(out / "residual.csv").readline().strip()
    assert header == "t,residual"


def test_basecase_is_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert _basecase(a) == 0 and _basecase(b) == 0
    files = sorted(p.name for p in a.iterdir() if p.suffix == ".sqgf")
    assert files
    for name in files:
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_invalid_grid_size(tmp_path, capsys):
    assert main(["basecase", "--n", "3", "--out", str(tmp_path / "x")]) == 2
    assert "invalid input" in capsys.readouterr().err


def test_unknown_argument():
    assert main(["basecase", "--bogus"]) == 2


def test_unwritable_output(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("not a directory")
    assert main(["basecase", "--n", "64", "--out", str(blocker / "sub")]) == 3
    assert "I/O error" in capsys.readouterr().err


def test_stage_missing_input(tmp_path, capsys):
    params = tmp_path / "p.txt"
    params.write_text(TOY_PARAMS)
    code = main(["stage", "--in", str(tmp_path / "nothing"), "--params", str(params), "--out", str(tmp_path / "o")])
    assert code == 2
    assert "meta.txt" in capsys.readouterr().err


def test_stage_rejects_invalid_parameters(tmp_path, capsys):
    base = tmp_path / "base"
    assert _basecase(base) == 0
    params = tmp_path / "p.txt"
    params.write_text("beta = 0.5\n")
    code = main(["stage", "--in", str(base), "--params", str(params), "--out", str(tmp_path / "o")])
    assert code == 2
    assert "beta" in capsys.readouterr().err


def test_stage_rejects_lambda_mismatch(tmp_path):
    base = tmp_path / "base"
    assert _basecase(base) == 0
    params = tmp_path / "p.txt"
    params.write_text(TOY_PARAMS)
    code = main(["stage", "--in", str(base), "--params", str(params), "--out", str(tmp_path / "o"),
                 "--override-lambda", "2", "8"])
    assert code == 2


def test_stage_toy_run(tmp_path, capsys):
    base = tmp_path / "base"
    assert _basecase(base, n=64, lam=2, delta=1e-9) == 0
    params = tmp_path / "p.txt"
    params.write_text(TOY_PARAMS)
    out = tmp_path / "stage"
    code = main(["stage", "--in", str(base), "--params", str(params), "--out", str(out),
                 "--override-lambda", "2", "8", "--override-checks"])
    text = capsys.readouterr().out
    assert code == 0
    for name in ("R_L", "R_O", "R_R", "R1", "residual_max"):
        assert name in text
    meta = _read_meta(out / "meta.txt")
    assert meta["kind"] == "stage" and meta["q"] == "1"
    assert float(meta["residual_max"]) <= float(meta["residual_tol"])
    header = open(out / "stage_report.csv").readline()
    assert header.strip() == "quantity,value"
    assert (out / "params.txt").exists()


def test_stage_toy_without_override_is_rejected(tmp_path, capsys):
    base = tmp_path / "base"
    assert _basecase(base, n=64, lam=2, delta=1e-9) == 0
    params = tmp_path / "p.txt"
    params.write_text(TOY_PARAMS)
    code = main(["stage", "--in", str(base), "--params", str(params), "--out", str(tmp_path / "o"),
                 "--override-lambda", "2", "8"])
    assert code == 2
    assert "invalid input" in capsys.readouterr().err


def test_verify_all_passes(capsys):
    assert main(["verify", "--suite", "all"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "suite,check,value,tolerance,status"
    suites = {line.split(",")[0] for line in lines[1:]}
    assert suites == {"spectral", "lp", "bilinear", "tensor", "flow", "profiles"}
    assert all(line.endswith("PASS") for line in lines[1:])


@pytest.mark.parametrize("suite", ["spectral", "tensor", "profiles"])
def test_verify_single_suite(suite):
    rows = run_verify(suite)
    assert rows and all(r[0] == suite and r[4] for r in rows)


def test_verify_detects_corrupted_ingredient(monkeypatch, capsys):
    monkeypatch.setenv(CORRUPT_ENV, "lp")
    assert main(["verify", "--suite", "lp"]) == 1
    err = capsys.readouterr().err
    assert "lp." in err


def test_thread_option(tmp_path):
    assert main(["--threads", "2", "verify", "--suite", "profiles"]) == 0
