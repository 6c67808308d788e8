"""Renderer: schema validation, series conventions, output files."""

from pathlib import Path

import numpy as np
import pytest

from wecs_plots.cli import main
from wecs_plots.render import FigureSpec, SchemaError, read_sweep_csv, render


def write_csv(path: Path, header: str, rows: list[str], comments: int = 2) -> Path:
    lines = [f"# config_key_{i} = {i}" for i in range(comments)]
    lines.append(header)
    lines.extend(rows)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


@pytest.fixture
def step_csv(tmp_path):
    return write_csv(
        tmp_path / "steps.csv",
        "sweep_value,fidelity,wall_ms",
        [f"{v},{f},{w}" for v, f, w in [(5, 0.992, 30), (27.5, 0.998, 25), (50, 0.9992, 28)]],
    )


@pytest.fixture
def d_csv(tmp_path):
    header = (
        "sweep_value,fidelity,fidelity_ideal_steps,beta_abs,"
        "mean_photon_c1,mean_photon_c2,mean_photon_c3,t4_us"
    )
    rows = [
        f"{d},{f},{fr},{b},0.017,0.0171,0.0169,{t}"
        for d, f, fr, b, t in [
            (7, 0.88, 0.895, 1.2, 0.717),
            (9, 0.864, 0.878, 1.2, 0.922),
            (11, 0.834, 0.848, 1.2, 1.127),
        ]
    ]
    return write_csv(tmp_path / "dsweep.csv", header, rows)


@pytest.fixture
def trace_csv(tmp_path):
    header = "t_us,fidelity,beta_abs,mean_photon_c1,mean_photon_c2,mean_photon_c3"
    ts = np.linspace(0, 1.2, 25)
    rows = [
        f"{t},{0.4 + 0.4 * t / 1.2},{1.25 * abs(np.sin(1.396 * t))},0.012,0.013,0.011"
        for t in ts
    ]
    return write_csv(tmp_path / "trace.csv", header, rows)


class TestReader:
    def test_comments_skipped(self, step_csv):
        header, cols = read_sweep_csv(step_csv)
        assert header[0] == "sweep_value"
        assert len(cols["fidelity"]) == 3

    def test_empty_rows_rejected(self, tmp_path):
        path = write_csv(tmp_path / "empty.csv", "sweep_value,fidelity", [])
        with pytest.raises(SchemaError):
            read_sweep_csv(path)


class TestRender:
    @pytest.mark.parametrize("fmt", ["png", "svg"])
    def test_step_fidelity(self, step_csv, tmp_path, fmt):
        out = render(FigureSpec(step_csv, "step-fidelity", tmp_path / f"fig.{fmt}"))
        assert out.exists() and out.stat().st_size > 500

    def test_d_sweep_two_series(self, d_csv, tmp_path):
        out = render(FigureSpec(d_csv, "d-sweep", tmp_path / "d.png"))
        assert out.exists() and out.stat().st_size > 500

    def test_time_trace_three_series(self, trace_csv, tmp_path):
        out = render(FigureSpec(trace_csv, "time-trace", tmp_path / "t.png"))
        assert out.exists() and out.stat().st_size > 500

    def test_schema_mismatch_lists_columns(self, step_csv, tmp_path):
        with pytest.raises(SchemaError) as err:
            render(FigureSpec(step_csv, "d-sweep", tmp_path / "x.png"))
        message = str(err.value)
        assert "fidelity_ideal_steps" in message
        assert "found" in message

    def test_unknown_kind(self, step_csv, tmp_path):
        with pytest.raises(SchemaError):
            FigureSpec(step_csv, "scatter", tmp_path / "x.png")

    def test_svg_rerender_identical(self, trace_csv, tmp_path):
        a = render(FigureSpec(trace_csv, "time-trace", tmp_path / "a.svg"))
        b = render(FigureSpec(trace_csv, "time-trace", tmp_path / "b.svg"))
        assert a.read_bytes() == b.read_bytes()


class TestCli:
    def test_round_trip(self, d_csv, tmp_path, capsys):
        out = tmp_path / "d.png"
        rc = main(["--kind", "d-sweep", "--in", str(d_csv), "--out", str(out)])
        assert rc == 0
        assert out.exists()

    def test_schema_error_exit_code(self, step_csv, tmp_path, capsys):
        rc = main(["--kind", "d-sweep", "--in", str(step_csv), "--out", str(tmp_path / "x.png")])
        assert rc == 2
        assert "fidelity_ideal_steps" in capsys.readouterr().err

    def test_missing_input(self, tmp_path):
        rc = main(["--kind", "d-sweep", "--in", str(tmp_path / "nope.csv"),
                   "--out", str(tmp_path / "x.png")])
        assert rc == 2

    def test_format_flag(self, step_csv, tmp_path):
        out = tmp_path / "fig.img"
        rc = main(["--kind", "step-fidelity", "--in", str(step_csv),
                   "--out", str(out), "--format", "png"])
        assert rc == 0
