"""Command-line interface: config handling, CSV output, exit codes."""

import math
from pathlib import Path

import numpy as np
import pytest

from wecs.cli import EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_OK, main
from wecs.config import RunConfig, load_config, parse_config_file, to_system_params
from wecs.errors import ConfigError


class TestConfig:
    def test_defaults(self):
        cfg = RunConfig({})
        assert cfg["g_a_mhz"] == 50.0
        assert cfg["engine"] == "factorized"
        assert cfg["n_b"] == 12

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError):
            RunConfig({"bogus": 1})

    def test_file_parsing(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text(
            "# comment line\n"
            "g_b_mhz = 4.5   # trailing comment\n"
            "n_b = 10\n"
            "\n"
            "engine = effective\n",
            encoding="utf-8",
        )
        values = parse_config_file(path)
        cfg = RunConfig(values)
        assert cfg["g_b_mhz"] == 4.5
        assert cfg["n_b"] == 10
        assert cfg["engine"] == "effective"

    def test_overrides_after_file(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("g_b_mhz = 4.5\n", encoding="utf-8")
        cfg = load_config(path, ["g_b_mhz=3.5", "target_beta = 0.9"])
        assert cfg["g_b_mhz"] == 3.5
        assert cfg["target_beta"] == 0.9

    def test_single_conversion_point(self):
        cfg = RunConfig({"g_a_mhz": 10.0, "kappa_inv_us": 2.0})
        p = to_system_params(cfg)
        assert p.g_A == pytest.approx(2 * math.pi * 10.0)
        assert p.kappa == pytest.approx(0.5)

    def test_bad_sweep_spec(self):
        with pytest.raises(ConfigError):
            RunConfig({"sweep_min": 10.0, "sweep_max": 5.0})
        with pytest.raises(ConfigError):
            RunConfig({"sweep_points": 1})


class TestCli:
    def test_unknown_config_key_exit_code(self, tmp_path, capsys):
        rc = main(["full-run", "--set", "nonsense=1", "--out", str(tmp_path / "x.csv")])
        assert rc == EXIT_CONFIG

    def test_infeasible_target_exit_code(self, tmp_path):
        rc = main([
            "full-run", "--set", "target_beta=1.3", "--engine", "lossless",
            "--out", str(tmp_path / "x.csv"),
        ])
        assert rc == EXIT_INFEASIBLE

    def test_step_sweep_csv_schema(self, tmp_path):
        out = tmp_path / "sf.csv"
        rc = main([
            "step-fidelity", "--step", "3", "--out", str(out),
            "--set", "sweep_points=2", "--no-timing",
        ])
        assert rc == EXIT_OK
        lines = out.read_text().splitlines()
        data = [l for l in lines if not l.startswith("#")]
        assert data[0] == "sweep_value,fidelity"
        assert len(data) == 3
        assert "# engine = factorized" in lines

    def test_deterministic_output(self, tmp_path):
        args = [
            "step-fidelity", "--step", "3", "--set", "sweep_points=2", "--no-timing",
        ]
        out1, out2 = tmp_path / "a.csv", tmp_path / "b.csv"
        assert main(args + ["--out", str(out1)]) == EXIT_OK
        assert main(args + ["--out", str(out2)]) == EXIT_OK
        assert out1.read_bytes() == out2.read_bytes()

    def test_parallel_jobs_preserve_order(self, tmp_path):
        serial, parallel = tmp_path / "s.csv", tmp_path / "p.csv"
        base = ["step-fidelity", "--step", "3", "--set", "sweep_points=3", "--no-timing"]
        assert main(base + ["--out", str(serial)]) == EXIT_OK
        assert main(base + ["--out", str(parallel), "--jobs", "2"]) == EXIT_OK
        assert serial.read_bytes() == parallel.read_bytes()

    def test_bosonization_csv(self, tmp_path):
        out = tmp_path / "bos.csv"
        rc = main(["bosonization-check", "--spins", "4", "6", "--n-max", "2",
                   "--out", str(out)])
        assert rc == EXIT_OK
        rows = [l for l in out.read_text().splitlines() if not l.startswith("#")]
        assert rows[0].startswith("n_spins,n_from,n_to")
        assert len(rows) == 1 + 2 * 2

    def test_state_transfer_csv(self, tmp_path):
        out = tmp_path / "st.csv"
        rc = main(["state-transfer", "--out", str(out), "--set", "n_b=12"])
        assert rc == EXIT_OK
        text = out.read_text()
        assert "final_fidelity" in text
        last = text.strip().splitlines()[-1].split(",")
        assert float(last[3]) >= 1.0 - 1e-6

    def test_full_run_effective_engine(self, tmp_path):
        out = tmp_path / "fr.csv"
        rc = main([
            "full-run", "--engine", "effective", "--out", str(out), "--no-timing",
            "--set", "n_blocks=2", "--set", "n_c=2", "--set", "n_b=4",
            "--set", "target_beta=0.3", "--set", "coherent_tail_tol=0.0001",
        ])
        assert rc == EXIT_OK
        rows = [l for l in out.read_text().splitlines() if not l.startswith("#")]
        vals = rows[1].split(",")
        fid = float(vals[1])
        fid_red = float(vals[2])
        assert 0.9 < fid <= fid_red <= 1.0

    def test_config_echo_covers_resolved_values(self, tmp_path):
        out = tmp_path / "echo.csv"
        rc = main([
            "bosonization-check", "--spins", "4", "--out", str(out),
            "--set", "g_b_mhz=3.3",
        ])
        assert rc == EXIT_OK
        assert "# g_b_mhz = 3.3" in out.read_text()
