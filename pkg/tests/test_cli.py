import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
import yaml

from dethomog.cli import EXIT_ACCEPTANCE, EXIT_CONFIG, EXIT_OK, main
from dethomog.config import load_config

ROOT = Path(__file__).resolve().parents[1]
SMOKE = ROOT / "configs" / "smoke.yaml"


def write_config(tmp_path, **changes):
    doc = yaml.safe_load(SMOKE.read_text())
    for key, value in changes.items():
        if isinstance(value, dict) and isinstance(doc.get(key), dict):
            doc[key].update(value)
        else:
            doc[key] = value
    doc["output"] = {"directory": str(tmp_path / "out")}
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(doc))
    return path


@pytest.mark.parametrize(
    "changes",
    [
        {"version": 2},
        {"surprise": 1},
        {"flow": {"name": "henon"}},
        {"estimator": {"method": "magic"}},
        {"slow": {"h": [["1 + ) x1"]]}},
    ],
    ids=["version", "unknown-key", "flow", "estimator", "expression"],
)
def test_config_errors_exit_2(tmp_path, changes):
    assert main(["estimate", "--config", str(write_config(tmp_path, **changes))]) == EXIT_CONFIG


def test_missing_config_file(tmp_path):
    assert main(["estimate", "--config", str(tmp_path / "nope.yaml")]) == EXIT_CONFIG


def test_estimate_writes_stamped_outputs(tmp_path):
    cfg = write_config(tmp_path)
    assert main(["estimate", "--config", str(cfg)]) == EXIT_OK
    out = tmp_path / "out"
    digest = load_config(cfg).digest()
    first = (out / "coeff_field.csv").read_text().splitlines()[0]
    assert first == f"# config_hash={digest} seed=1"
    doc = json.loads((out / "estimate.json").read_text())
    assert doc["config_hash"] == digest and doc["command"] == "estimate"
    assert doc["checks"]["pass"]
    field = json.loads((out / "coeff_field.json").read_text())
    assert field["meta"]["config_hash"] == digest


def test_seed_and_output_overrides(tmp_path):
    cfg = write_config(tmp_path)
    other = tmp_path / "elsewhere"
    assert main(["wip", "--config", str(cfg), "--seed", "9", "--out", str(other)]) == EXIT_OK
    doc = json.loads((other / "wip.json").read_text())
    assert doc["seed"] == 9


def test_zero_fast_forcing_gives_zero_diffusion(tmp_path):
    cfg = write_config(tmp_path, slow={"h": [["0"]]})
    assert main(["estimate", "--config", str(cfg)]) == EXIT_OK
    field = json.loads((tmp_path / "out" / "coeff_field.json").read_text())
    assert np.all(np.asarray(field["diffusion_sq"]) == 0.0)
    assert np.all(np.asarray(field["diffusion"]) == 0.0)
    x = np.asarray(field["axes"][0])
    np.testing.assert_allclose(np.asarray(field["drift"])[:, 0], x - x**3, atol=1e-12)


@pytest.mark.parametrize("command", ["converge", "suspension", "rough"])
def test_smoke_commands(tmp_path, command):
    assert main([command, "--config", str(write_config(tmp_path))]) == EXIT_OK
    assert any((tmp_path / "out").glob("*.json"))


def test_converge_acceptance_flag_can_fail(tmp_path):
    # a KS threshold of zero can never be met by the final eps
    cfg = write_config(tmp_path, simulation={"acceptance": True, "ks_threshold": 0.0})
    assert main(["converge", "--config", str(cfg)]) == EXIT_ACCEPTANCE


def test_selftest_passes_and_injection_fails(capsys):
    assert main(["selftest"]) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert lines and all(line.startswith("PASS") for line in lines)
    for fault in ("chen", "psd"):
        assert main(["selftest", "--inject", fault]) == EXIT_ACCEPTANCE
        assert "FAIL" in capsys.readouterr().out


def test_console_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "dethomog.cli", "estimate", "--config", str(tmp_path / "missing.yaml")],
        capture_output=True, text=True,
    )
    assert proc.returncode == EXIT_CONFIG
    assert "config error" in proc.stderr
