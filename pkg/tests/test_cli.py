import json

import numpy as np
import pytest

from nvcharge.cli import run
from nvcharge.io import read_envelope, read_spectrum, write_curve, write_spectrum
from nvcharge.localization import ImbalanceCurve
from nvcharge.spectra import Spectrum

FAST = ["--realizations", "200x5", "--seed", "3"]


def _run(tmp_path, *argv):
    return run([*argv, "--out", str(tmp_path)])


def _curve_file(tmp_path, phi_e=124.0):
    phis = np.arange(0.0, 180.0, 30.0)
    path = tmp_path / "curve.csv"
    write_curve(path, ImbalanceCurve(phis, -np.cos(np.deg2rad(2 * phis + phi_e))))
    return path


def test_simulate_writes_spectrum_and_envelope(tmp_path):
    assert _run(tmp_path, "simulate", *FAST, "--set", "simulate.plot_data=true") == 0
    spec = read_spectrum(tmp_path / "simulate.csv")
    assert len(spec) == 481
    env = read_envelope(tmp_path / "simulate.json")
    assert env.seed == 3 and env.config["monte_carlo"]["n_spin_realizations"] == 5
    assert (tmp_path / "simulate_plot.csv").exists()


def test_simulate_tag_preset_and_env_var(tmp_path, monkeypatch):
    monkeypatch.setenv("NVCHARGE_OUTPUT_DIR", str(tmp_path))
    assert run(["simulate", *FAST, "--preset", "S3", "--tag", "s3"]) == 0
    env = read_envelope(tmp_path / "simulate_s3.json")
    assert env.config["sample"] == {"rho_c": 0.06, "rho_s": 12.0, "gamma": 0.26}


def test_print_config(tmp_path, capsys):
    assert run(["simulate", "--print-config", "--set", "sample.rho_c=2.5"]) == 0
    out = capsys.readouterr().out
    assert "rho_c = 2.5" in out
    cfg = tmp_path / "c.toml"
    cfg.write_text(out)
    assert run(["simulate", "--config", str(cfg), "--print-config"]) == 0
    assert capsys.readouterr().out == out


def test_imbalance_command(tmp_path):
    curve = _curve_file(tmp_path)
    assert _run(tmp_path, "imbalance", "--curve", str(curve)) == 0
    env = read_envelope(tmp_path / "imbalance.json")
    assert env.payload["result"]["phi_e"] == pytest.approx(124.0)


def test_localize_from_config_and_chain(tmp_path):
    assert _run(tmp_path, "localize", "--set", "localize.errors=[0.05, 0.03, 5.0]",
                "--set", "localize.n_mc=2000") == 0
    env = read_envelope(tmp_path / "localize.json")
    assert env.payload["result"]["distance"] == pytest.approx(5.1, abs=0.2)
    curve = _curve_file(tmp_path, phi_e=236.0)
    assert _run(tmp_path, "imbalance", "--curve", str(curve)) == 0
    assert _run(tmp_path, "localize", "--from-imbalance", str(tmp_path / "imbalance.json"),
                "--set", "localize.pi_z=0.27", "--set", "localize.pi_perp=0.85",
                "--set", "localize.n_mc=1000", "--tag", "nv2") == 0
    env = read_envelope(tmp_path / "localize_nv2.json")
    assert env.payload["result"]["distance"] == pytest.approx(1.8, abs=0.1)
    assert (tmp_path / "localize_cloud_nv2.csv").exists()


def test_mw_angle_command(tmp_path):
    assert _run(tmp_path, "mw-angle", "--set", "mw_angle.r=200.0") == 0
    payload = json.loads((tmp_path / "mw_angle.json").read_text())["payload"]
    assert 0 <= payload["phi_mw"] < 180 and payload["std"] > 0


def test_validation_exit_codes(tmp_path, capsys):
    assert _run(tmp_path, "simulate", "--set", "sample.rho_x=1") == 2
    assert _run(tmp_path, "simulate", "--set", "sample.rho_c=-1") == 2
    assert _run(tmp_path, "simulate", "--realizations", "abc") == 2
    assert _run(tmp_path, "simulate", "--set", "nonsense") == 2
    short = tmp_path / "short.csv"
    short.write_text("phi_mw_deg,imbalance\n0,1\n30,0\n60,-1\n")
    assert _run(tmp_path, "imbalance", "--curve", str(short)) == 2
    assert "invalid input" in capsys.readouterr().err
    bad = tmp_path / "bad.csv"
    bad.write_text("phi_mw_deg,imbalance\n0,x\n")
    assert _run(tmp_path, "imbalance", "--curve", str(bad)) == 2


def test_io_exit_code(tmp_path, capsys):
    assert _run(tmp_path, "imbalance", "--curve", str(tmp_path / "missing.csv")) == 3
    assert "I/O error" in capsys.readouterr().err


def test_convergence_exit_code(tmp_path):
    # peaks instead of dips: no positive-amplitude model exists
    f = np.linspace(2984.0, 3008.0, 241)
    bump = -np.exp(-((f - 2996.0) ** 2))
    write_spectrum(tmp_path / "high.csv", Spectrum(f, bump))
    g = np.linspace(2858.0, 2882.0, 241)
    write_spectrum(tmp_path / "zero.csv", Spectrum(g, np.exp(-((g - 2870.0) ** 2))))
    code = _run(tmp_path, "fit-ensemble", *FAST, "--high", str(tmp_path / "high.csv"),
                "--zero", str(tmp_path / "zero.csv"))
    assert code == 4


def test_fit_single_angle_count_mismatch(tmp_path):
    f = np.linspace(2868.0, 2872.0, 41)
    write_spectrum(tmp_path / "a.csv", Spectrum(f, np.exp(-((f - 2870.0) ** 2))))
    assert _run(tmp_path, "fit-single", "--data", str(tmp_path / "a.csv"),
                "--phi-mw", "0", "90") == 2


def test_reruns_are_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert run(["simulate", *FAST, "--set", "simulate.noise=0.02", "--out", str(out)]) == 0
    for name in ("simulate.csv", "simulate.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_timing_is_opt_in(tmp_path):
    assert _run(tmp_path, "mw-angle", "--timing") == 0
    assert "timing" in json.loads((tmp_path / "mw_angle.json").read_text())
