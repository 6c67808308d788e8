"""Run configuration: flat key = value files, CLI overrides, unit handling.

Frequencies and couplings are entered as linear frequencies nu = omega/2pi
in MHz; decoherence is entered as lifetimes in microseconds.  The
conversion to internal angular units happens exactly once, in
:func:`to_system_params`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .model import SystemParams

_FLOAT_KEYS = {
    "g_a_mhz": 50.0,
    "g_r_mhz": 5.0,
    "g_mhz": 5.0,
    "g_b_mhz": 4.0,
    "omega_eg_mhz": 50.0,
    "omega_mhz": 100.0,
    "delta_a_mhz": 36.0,
    "delta_b_mhz": 36.0,
    "kappa_inv_us": 1.0,
    "kappa_prime_inv_us": 1000.0,
    "gamma_inv_us": 25.0,
    "gamma_phi_inv_us": 15.0,
    "target_beta": 1.2,
    "phi_rad": -math.pi / 2.0,
    "sweep_min": 5.0,
    "sweep_max": 50.0,
    "rel_tol": 1e-8,
    "abs_tol": 1e-10,
    "coherent_tail_tol": 1e-6,
}

_INT_KEYS = {
    "n_blocks": 3,
    "n_c": 3,
    "n_b": 12,
    "sweep_points": 19,
    "trace_points": 220,
    "seed": 0,  # reserved for future stochastic features
}

_STR_KEYS = {
    "engine": "factorized",
}

_BOOL_KEYS = {
    "idle_coupler_decay": False,
    "track_delta_a": True,
}

_ENGINES = ("factorized", "brute", "effective", "lossless")


@dataclass
class RunConfig:
    """Resolved configuration for one CLI invocation."""

    values: dict = field(default_factory=dict)

    def __post_init__(self):
        base = {}
        base.update(_FLOAT_KEYS)
        base.update(_INT_KEYS)
        base.update(_STR_KEYS)
        base.update(_BOOL_KEYS)
        merged = dict(base)
        for key, val in self.values.items():
            if key not in base:
                raise ConfigError(f"unknown config key {key!r}")
            merged[key] = _coerce(key, val)
        self.values = merged
        self._validate()

    def _validate(self):
        v = self.values
        if v["engine"] not in _ENGINES:
            raise ConfigError(f"engine must be one of {_ENGINES}, got {v['engine']!r}")
        if v["sweep_points"] < 2:
            raise ConfigError("sweep_points must be >= 2")
        if v["sweep_min"] >= v["sweep_max"]:
            raise ConfigError("sweep_min must be below sweep_max")
        for key in ("g_a_mhz", "g_r_mhz", "g_mhz", "g_b_mhz", "omega_eg_mhz", "omega_mhz"):
            if v[key] <= 0:
                raise ConfigError(f"{key} must be positive")

    def __getitem__(self, key: str):
        return self.values[key]

    def echo_lines(self) -> list[str]:
        """Config echo block written atop every CSV (sorted, stable)."""
        return [f"# {k} = {self.values[k]}" for k in sorted(self.values)]


def _coerce(key: str, val):
    if key in _STR_KEYS:
        return str(val)
    if key in _BOOL_KEYS:
        if isinstance(val, bool):
            return val
        s = str(val).strip().lower()
        if s in ("1", "true", "yes", "on"):
            return True
        if s in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"cannot parse boolean config value {key} = {val!r}")
    try:
        if key in _INT_KEYS:
            return int(str(val).strip())
        return float(str(val).strip())
    except ValueError as exc:
        raise ConfigError(f"cannot parse numeric config value {key} = {val!r}") from exc


def parse_config_file(path: str | Path) -> dict:
    """Flat ``key = value`` UTF-8 file with ``#`` comments."""
    out = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, val = line.split("=", 1)
        out[key.strip()] = val.strip()
    return out


def apply_overrides(base: dict, overrides: list[str]) -> dict:
    """Apply repeatable --set key=value flags on top of file values."""
    merged = dict(base)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, val = item.split("=", 1)
        merged[key.strip()] = val.strip()
    return merged


def load_config(path: str | Path | None, overrides: list[str] | None = None) -> RunConfig:
    values = parse_config_file(path) if path else {}
    if overrides:
        values = apply_overrides(values, overrides)
    return RunConfig(values)


def to_system_params(cfg: RunConfig) -> SystemParams:
    """The single MHz-to-angular conversion point."""
    v = cfg.values
    return SystemParams.from_mhz(
        g_A_mhz=v["g_a_mhz"],
        g_r_mhz=v["g_r_mhz"],
        g_mhz=v["g_mhz"],
        g_b_mhz=v["g_b_mhz"],
        omega_eg_mhz=v["omega_eg_mhz"],
        omega_mhz=v["omega_mhz"],
        delta_a_mhz=v["delta_a_mhz"],
        delta_b_mhz=v["delta_b_mhz"],
        kappa_inv_us=v["kappa_inv_us"],
        kappa_prime_inv_us=v["kappa_prime_inv_us"],
        gamma_inv_us=v["gamma_inv_us"],
        gamma_phi_inv_us=v["gamma_phi_inv_us"],
        n_blocks=v["n_blocks"],
        N_c=v["n_c"],
        N_b=v["n_b"],
        target_beta=v["target_beta"],
        phi=v["phi_rad"],
        idle_coupler_decay=v["idle_coupler_decay"],
        coherent_tail_tol=v["coherent_tail_tol"],
    )
