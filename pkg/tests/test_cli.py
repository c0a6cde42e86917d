import json
import subprocess
import sys

import numpy as np
import pytest

from anticipative.cli import EXIT_MODEL, EXIT_NUMERICAL, EXIT_OK, main
from anticipative.corrkernel import linear_correlation
from anticipative.models import LinearModel, model_to_dict
from anticipative.simulate import read_binary, read_csv


def _run(tmp_path, *args):
    return main([*args, "--out-dir", str(tmp_path)])


def test_kernel(tmp_path, capsys):
    assert _run(tmp_path, "kernel", "--grid-k", "50") == EXIT_OK
    doc = json.loads((tmp_path / "kernel_table.json").read_text())
    assert len(doc["grid"]) == 51
    assert "T0" in capsys.readouterr().out


def test_simulate(tmp_path):
    assert _run(tmp_path, "simulate", "--scenario", "scalar-demo", "--grid-k", "30", "--paths", "2") == EXIT_OK
    t, x, z = read_csv(tmp_path / "path_1.csv")
    bundle = read_binary(tmp_path / "path_1.bin")
    np.testing.assert_array_equal(z, bundle.z)
    np.testing.assert_array_equal(t, bundle.grid)
    assert z.shape == (31, 1)


def test_filter(tmp_path):
    assert _run(tmp_path, "filter", "--grid-k", "100") == EXIT_OK
    doc = json.loads((tmp_path / "filter.json").read_text())
    assert len(doc["anticipative"]["terminal_mean"]) == 6
    assert (tmp_path / "anticipative.csv").exists() and (tmp_path / "plot_signal_1.csv").exists()


@pytest.mark.filterwarnings("ignore:ratios at t=")
def test_ratios(tmp_path, capsys):
    code = _run(tmp_path, "ratios", "--grid-k", "100", "--paths", "40", "--gamma", "1", "10")
    assert code == EXIT_OK
    assert (tmp_path / "ratios_gamma1.csv").exists() and (tmp_path / "ratios_gamma10.csv").exists()
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["gammas"] == [1.0, 10.0]
    assert "gamma=10 t=1" in capsys.readouterr().out


def test_stability(tmp_path):
    assert _run(tmp_path, "stability") == EXIT_OK
    doc = json.loads((tmp_path / "stability.json").read_text())
    assert doc["lambda0"] == pytest.approx(1.0)
    assert doc["decay_fit"]["rate"] >= 1.8


def test_volterra(tmp_path, capsys):
    assert _run(tmp_path, "volterra", "--grid-k", "64", "--p", "t", "--q", "s") == EXIT_OK
    doc = json.loads((tmp_path / "volterra.json").read_text())
    assert doc["best_reading"] == "row"
    assert (tmp_path / "xhat_highdim.csv").exists() and (tmp_path / "xhat_literal.csv").exists()
    assert "better-matching reading" in capsys.readouterr().out


def test_particle(tmp_path):
    assert _run(tmp_path, "particle", "--grid-k", "30", "--n-part", "200") == EXIT_OK
    assert json.loads((tmp_path / "particle.json").read_text())["n_resample"] >= 0


def test_converge(tmp_path):
    assert _run(tmp_path, "converge", "--k-list", "32", "64", "128", "--paths", "20") == EXIT_OK
    doc = json.loads((tmp_path / "convergence.json").read_text())
    assert len(doc["orders"]) == 1
    assert (tmp_path / "manifest.json").exists()


def test_bad_config_exits_2(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"gama": 3}))
    assert _run(tmp_path, "ratios", "--config", str(cfg)) == EXIT_MODEL
    assert _run(tmp_path, "filter", "--scenario", "no-such-model") == EXIT_MODEL
    assert _run(tmp_path, "volterra", "--p", "exp(t)", "--q", "s") == EXIT_MODEL
    assert _run(tmp_path, "ratios", "--scenario", "scalar-demo", "--grid-k", "10", "--paths", "2") == EXIT_MODEL
    assert "invalid model or config" in capsys.readouterr().err


def test_numerical_failure_exits_3(tmp_path, capsys):
    # int_0^t rho'^2 reaches Sigma at t = 1: the Gram matrix becomes singular
    corr = linear_correlation([[1.0]], [[1.0]], 1.0)
    model = LinearModel([[0.0]], [[1.0]], [[1.0]], corr, [0.0])
    path = tmp_path / "model.json"
    path.write_text(json.dumps(model_to_dict(model)))
    assert _run(tmp_path, "kernel", "--scenario", str(path), "--grid-k", "50") == EXIT_NUMERICAL
    assert "GramSingular" in capsys.readouterr().err


def test_console_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "anticipative.cli", "--help"],
                         capture_output=True, text=True)
    assert out.returncode == 0
    for name in ("kernel", "simulate", "filter", "ratios", "stability", "volterra", "particle", "converge"):
        assert name in out.stdout
