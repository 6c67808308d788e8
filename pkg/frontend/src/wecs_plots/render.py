"""Figure rendering for the simulator's CSV output.

Three figure kinds mirror the sweep commands:

* ``step-fidelity``: fidelity versus the swept coupling (MHz).
* ``d-sweep``: fidelity versus reduced detuning, red squares for the
  ideal-early-stages mode and blue dots for the fully lossy mode.
* ``time-trace``: fidelity (blue), half the displacement amplitude (red)
  and the per-cavity photon number enlarged ten times (green) against the
  displacement-stage time.

Inputs are read-only; rendering is deterministic for identical CSVs.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

KINDS = ("step-fidelity", "d-sweep", "time-trace")

REQUIRED_COLUMNS = {
    "step-fidelity": ["sweep_value", "fidelity"],
    "d-sweep": [
        "sweep_value",
        "fidelity",
        "fidelity_ideal_steps",
        "beta_abs",
        "t4_us",
    ],
    "time-trace": ["t_us", "fidelity", "beta_abs"],
}

DEFAULT_LABELS = {
    "step-fidelity": ("coupling / drive (MHz)", "fidelity"),
    "d-sweep": ("reduced detuning D", "fidelity"),
    "time-trace": ("displacement-stage time (us)", "value"),
}


class SchemaError(ValueError):
    """CSV columns do not match the expected sweep schema."""


@dataclass
class FigureSpec:
    """What to render: input CSV, figure kind, output image."""

    input_path: str | Path
    kind: str
    output_path: str | Path
    image_format: str | None = None  # inferred from the output suffix if None
    xlabel: str | None = None
    ylabel: str | None = None
    title: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SchemaError(f"unknown figure kind {self.kind!r}; expected one of {KINDS}")
        fmt = self.image_format or Path(self.output_path).suffix.lstrip(".").lower()
        if fmt not in ("png", "svg"):
            raise SchemaError(f"unsupported image format {fmt!r}; use png or svg")
        self.image_format = fmt


def read_sweep_csv(path: str | Path) -> tuple[list[str], dict[str, np.ndarray]]:
    """Parse a sweep CSV, skipping the `#` config echo block."""
    lines = [
        line for line in Path(path).read_text(encoding="utf-8").splitlines()
        if line.strip() and not line.lstrip().startswith("#")
    ]
    if not lines:
        raise SchemaError(f"{path}: no header row found")
    reader = csv.reader(lines)
    header = next(reader)
    rows = list(reader)
    if not rows:
        raise SchemaError(f"{path}: no data rows")
    columns = {}
    for i, name in enumerate(header):
        columns[name] = np.array([float(r[i]) for r in rows])
    return header, columns


def _check_schema(kind: str, header: list[str], path) -> None:
    missing = [c for c in REQUIRED_COLUMNS[kind] if c not in header]
    if missing:
        raise SchemaError(
            f"{path}: columns do not match the {kind} schema; "
            f"expected at least {REQUIRED_COLUMNS[kind]}, found {header} "
            f"(missing {missing})"
        )


def _photon_columns(header: list[str]) -> list[str]:
    return sorted(c for c in header if c.startswith("mean_photon_c"))


def render(spec: FigureSpec) -> Path:
    """Render one figure; returns the written image path."""
    header, cols = read_sweep_csv(spec.input_path)
    _check_schema(spec.kind, header, spec.input_path)

    plt.rcParams.update({
        "figure.figsize": (6.4, 4.2),
        "font.size": 11,
        "svg.hashsalt": "wecs-plots",
    })
    fig, ax = plt.subplots()

    if spec.kind == "step-fidelity":
        ax.plot(cols["sweep_value"], cols["fidelity"], "o-", color="tab:blue",
                label="fidelity")
        ax.set_ylim(min(0.99, float(cols["fidelity"].min()) - 0.002), 1.0005)
        ax.legend()

    elif spec.kind == "d-sweep":
        ax.plot(cols["sweep_value"], cols["fidelity_ideal_steps"], "s", ms=7,
                color="tab:red", label="ideal early stages")
        ax.plot(cols["sweep_value"], cols["fidelity"], "o", ms=6,
                color="tab:blue", label="all stages lossy")
        ax.legend()

    else:  # time-trace
        ax.plot(cols["t_us"], cols["fidelity"], color="tab:blue", label="fidelity")
        ax.plot(cols["t_us"], cols["beta_abs"] / 2.0, color="tab:red",
                label="|amplitude| / 2")
        photons = _photon_columns(header)
        if photons:
            mean = np.mean([cols[c] for c in photons], axis=0)
            ax.plot(cols["t_us"], 10.0 * mean, color="tab:green",
                    label="photon number x 10")
        ax.legend(loc="center left")

    xlabel, ylabel = DEFAULT_LABELS[spec.kind]
    ax.set_xlabel(spec.xlabel or xlabel)
    ax.set_ylabel(spec.ylabel or ylabel)
    if spec.title:
        ax.set_title(spec.title)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()

    out = Path(spec.output_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    metadata = {"Date": None} if spec.image_format == "svg" else None
    fig.savefig(out, format=spec.image_format, dpi=160, metadata=metadata)
    plt.close(fig)
    return out
