"""Command-line front end: sweeps, single runs, CSV emission.

Subcommands mirror the study's figures: ``step-fidelity`` sweeps one
stage's coupling, ``sweep-d`` scans the reduced detuning D = delta_b/g_b
(re-solving the displacement time per point), ``time-trace`` samples the
displacement stage, ``full-run`` executes the protocol once, and
``state-transfer`` / ``bosonization-check`` exercise the auxiliary
analyses.  All CSV output carries a ``#``-prefixed echo of the resolved
configuration and uses 12 significant digits, so identical configurations
produce byte-identical files (timing columns excluded via --no-timing).

Exit codes: 0 success, 2 configuration error, 3 numerical/convergence
error, 4 infeasible protocol parameters.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import math
import sys
import time
from pathlib import Path

import numpy as np

from .config import RunConfig, load_config, to_system_params
from .errors import (
    AccuracyError,
    ConfigError,
    InfeasibleParameterError,
    IntegrationError,
    WecsError,
)
from .model import EnsembleMicroModel, collective_mode_check
from .protocol import (
    run_protocol,
    state_transfer,
    step_fidelity,
    transfer_photon_numbers,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_INFEASIBLE = 4

_FMT = "{:.12g}"


def _fmt(value) -> str:
    if value is None:
        return "nan"
    if isinstance(value, float) and math.isnan(value):
        return "nan"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return _FMT.format(float(value))


def write_csv(path, header: list[str], rows: list[list], cfg: RunConfig,
              extra_comments: list[str] = ()) -> None:
    lines = []
    lines.extend(cfg.echo_lines())
    for c in extra_comments:
        lines.append(f"# {c}")
    lines.append(",".join(header))
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    text = "\n".join(lines) + "\n"
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


def _engine_modes(engine: str) -> tuple[str, str, bool]:
    """CLI engine name -> (engine, stage4 Hamiltonian, lossy)."""
    return {
        "factorized": ("factorized", "full", True),
        "effective": ("factorized", "effective", True),
        "brute": ("brute", "full", True),
        "lossless": ("pure", "full", False),
    }[engine]


# ---------------------------------------------------------------------------
# Sweep workers (top level so a process pool can pickle them)
# ---------------------------------------------------------------------------


def _step_point(args) -> dict:
    step, mhz, cfg_values = args
    cfg = RunConfig(dict(cfg_values))
    key = {1: "g_a_mhz", 2: "g_r_mhz", 3: "omega_eg_mhz"}[step]
    cfg.values[key] = mhz
    p = to_system_params(cfg)
    t0 = time.perf_counter()
    fid = step_fidelity(p, step, rel_tol=cfg["rel_tol"], abs_tol=cfg["abs_tol"])
    return {"sweep_value": mhz, "fidelity": fid, "wall_ms": 1e3 * (time.perf_counter() - t0)}


def _d_point(args) -> dict:
    d_ratio, cfg_values, engine = args
    cfg = RunConfig(dict(cfg_values))
    delta_b = d_ratio * cfg["g_b_mhz"]
    cfg.values["delta_b_mhz"] = delta_b
    if cfg["track_delta_a"]:
        # keep the cavity resonant between qubit and ensemble sidebands so
        # the displacement stays on its slow lobe at every D
        cfg.values["delta_a_mhz"] = delta_b
    p = to_system_params(cfg)
    eng, stage4, lossy = _engine_modes(engine)
    t0 = time.perf_counter()
    blue = run_protocol(
        p, engine=eng, stage4=stage4, ideal_first_steps=False, lossy=lossy,
        record_trace=(eng == "factorized" and stage4 == "full"),
        rel_tol=cfg["rel_tol"], abs_tol=cfg["abs_tol"],
    )
    red = run_protocol(
        p, engine=eng, stage4=stage4, ideal_first_steps=True, lossy=lossy,
        rel_tol=cfg["rel_tol"], abs_tol=cfg["abs_tol"],
    )
    wall_ms = 1e3 * (time.perf_counter() - t0)
    photon_max = [math.nan] * 3
    if blue.trace is not None:
        for j in range(min(3, blue.trace.mean_photon.shape[0])):
            photon_max[j] = float(blue.trace.mean_photon[j].max())
    return {
        "sweep_value": d_ratio,
        "fidelity": blue.fidelity,
        "fidelity_ideal_steps": red.fidelity,
        "beta_abs": abs(blue.beta_achieved),
        "mean_photon_c1": photon_max[0],
        "mean_photon_c2": photon_max[1],
        "mean_photon_c3": photon_max[2],
        "t4_us": blue.plan.t4,
        "wall_ms": wall_ms,
    }


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_step_fidelity(cfg: RunConfig, args) -> int:
    step = args.step
    values = np.linspace(cfg["sweep_min"], cfg["sweep_max"], cfg["sweep_points"])
    work = [(step, float(v), dict(cfg.values)) for v in values]
    results = _run_pool(_step_point, work, args.jobs)
    header = ["sweep_value", "fidelity"] + ([] if args.no_timing else ["wall_ms"])
    rows = []
    for r in results:
        row = [r["sweep_value"], r["fidelity"]]
        if not args.no_timing:
            row.append(r["wall_ms"])
        rows.append(row)
    swept = {1: "g_a_mhz", 2: "g_r_mhz", 3: "omega_eg_mhz"}[step]
    write_csv(args.out, header, rows, cfg, [f"kind = step-fidelity", f"step = {step}",
                                            f"swept_key = {swept} (MHz)"])
    return EXIT_OK


_D_COLUMNS = [
    "sweep_value", "fidelity", "fidelity_ideal_steps", "beta_abs",
    "mean_photon_c1", "mean_photon_c2", "mean_photon_c3", "t4_us",
]


def cmd_sweep_d(cfg: RunConfig, args) -> int:
    values = np.linspace(cfg["sweep_min"], cfg["sweep_max"], cfg["sweep_points"])
    work = [(float(v), dict(cfg.values), cfg["engine"]) for v in values]
    results = _run_pool(_d_point, work, args.jobs)
    header = list(_D_COLUMNS) + ([] if args.no_timing else ["wall_ms"])
    rows = []
    for r in results:
        row = [r[k] for k in _D_COLUMNS]
        if not args.no_timing:
            row.append(r["wall_ms"])
        rows.append(row)
    write_csv(args.out, header, rows, cfg, ["kind = d-sweep", "swept = delta_b/g_b"])
    return EXIT_OK


def cmd_time_trace(cfg: RunConfig, args) -> int:
    p = to_system_params(cfg)
    eng, stage4, lossy = _engine_modes(cfg["engine"])
    if eng != "factorized" or stage4 != "full":
        raise ConfigError("time-trace requires the factorized engine")
    res = run_protocol(
        p, engine=eng, stage4=stage4, ideal_first_steps=False, lossy=lossy,
        record_trace=True, trace_points=cfg["trace_points"],
        rel_tol=cfg["rel_tol"], abs_tol=cfg["abs_tol"],
    )
    tr = res.trace
    header = ["t_us", "fidelity", "beta_abs"] + [
        f"mean_photon_c{j + 1}" for j in range(p.n_blocks)
    ]
    rows = []
    for i, t in enumerate(tr.times):
        rows.append([t, tr.fidelity[i], tr.beta_abs[i]] + list(tr.mean_photon[:, i]))
    write_csv(args.out, header, rows, cfg,
              ["kind = time-trace", f"t4_us = {_fmt(res.plan.t4)}",
               f"fidelity_at_t4 = {_fmt(res.fidelity)}"])
    return EXIT_OK


def cmd_full_run(cfg: RunConfig, args) -> int:
    p = to_system_params(cfg)
    eng, stage4, lossy = _engine_modes(cfg["engine"])
    t0 = time.perf_counter()
    blue = run_protocol(p, engine=eng, stage4=stage4, ideal_first_steps=False,
                        lossy=lossy, compute_step_fidelities=lossy,
                        rel_tol=cfg["rel_tol"], abs_tol=cfg["abs_tol"])
    red = run_protocol(p, engine=eng, stage4=stage4, ideal_first_steps=True,
                       lossy=lossy, rel_tol=cfg["rel_tol"], abs_tol=cfg["abs_tol"])
    wall_ms = 1e3 * (time.perf_counter() - t0)
    header = list(_D_COLUMNS) + ([] if args.no_timing else ["wall_ms"])
    row = [
        p.detuning_ratio, blue.fidelity, red.fidelity, abs(blue.beta_achieved),
        math.nan, math.nan, math.nan, blue.plan.t4,
    ]
    if not args.no_timing:
        row.append(wall_ms)
    comments = [
        "kind = full-run",
        f"t1_us = {_fmt(blue.plan.t1)}",
        f"t2_us = {_fmt(blue.plan.t2_max)}",
        f"t3_us = {_fmt(blue.plan.t3)}",
        f"total_us = {_fmt(blue.plan.total)}",
    ]
    for k in sorted(blue.step_fidelities):
        comments.append(f"step{k}_fidelity = {_fmt(blue.step_fidelities[k])}")
    write_csv(args.out, header, [row], cfg, comments)
    return EXIT_OK


def cmd_state_transfer(cfg: RunConfig, args) -> int:
    p = to_system_params(cfg)
    res = state_transfer(p)
    n_times = 41
    header = ["t_us", "mean_photon_cavity", "mean_photon_ensemble", "overlap_with_target"]
    rows = []
    for t in np.linspace(0.0, res.duration, n_times):
        n_cav, n_ens = transfer_photon_numbers(p, p.target_beta, float(t))
        rows.append([t, n_cav, n_ens, math.nan])
    rows[-1][3] = res.fidelity
    write_csv(args.out, header, rows, cfg,
              ["kind = state-transfer", f"duration_us = {_fmt(res.duration)}",
               f"final_fidelity = {_fmt(res.fidelity)}"])
    return EXIT_OK


def cmd_bosonization_check(cfg: RunConfig, args) -> int:
    header = [
        "n_spins", "n_from", "n_to", "matrix_element", "bosonic_value",
        "rel_deviation", "bright_coupling", "collective_coupling",
    ]
    rows = []
    for n_spins in args.spins:
        model = EnsembleMicroModel.uniform(n_spins, g_k=1.0)
        rep = collective_mode_check(model, n_max=min(args.n_max, n_spins - 1))
        for n, (elem, ref, dev) in enumerate(
            zip(rep.matrix_elements, rep.bosonic_values, rep.rel_deviations)
        ):
            rows.append([
                n_spins, n, n + 1, elem, ref, dev,
                rep.bright_state_coupling, rep.collective_coupling,
            ])
    write_csv(args.out, header, rows, cfg, ["kind = bosonization-check"])
    return EXIT_OK


def _run_pool(fn, work, jobs: int):
    if jobs <= 1 or len(work) <= 1:
        return [fn(w) for w in work]
    with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
        # map preserves submission order regardless of completion order
        return list(pool.map(fn, work))


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wecs",
        description="W-type entangled coherent state preparation: sweeps and analyses.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", default=None, help="flat key = value file")
        sp.add_argument("--out", default=None, help="CSV output path (default stdout)")
        sp.add_argument("--jobs", type=int, default=1, help="sweep worker processes")
        sp.add_argument(
            "--engine",
            choices=["factorized", "brute", "effective", "lossless"],
            default=None,
            help="evolution engine (overrides config)",
        )
        sp.add_argument(
            "--set", action="append", default=[], metavar="KEY=VALUE",
            help="override one config value (repeatable)",
        )
        sp.add_argument(
            "--no-timing", action="store_true",
            help="omit wall-clock columns for byte-stable output",
        )

    sp = sub.add_parser("step-fidelity", help="sweep one stage's coupling or drive")
    sp.add_argument("--step", type=int, choices=[1, 2, 3], required=True)
    common(sp)

    sp = sub.add_parser("sweep-d", help="fidelity versus reduced detuning D")
    common(sp)

    sp = sub.add_parser("time-trace", help="sample the displacement stage over time")
    common(sp)

    sp = sub.add_parser("full-run", help="run the full protocol once")
    common(sp)

    sp = sub.add_parser("state-transfer", help="ensemble-to-cavity swap analysis")
    common(sp)

    sp = sub.add_parser("bosonization-check", help="collective-mode ladder accuracy")
    sp.add_argument("--spins", type=int, nargs="+", default=[4, 6, 8])
    sp.add_argument("--n-max", type=int, default=3)
    common(sp)

    return parser


_COMMANDS = {
    "step-fidelity": cmd_step_fidelity,
    "sweep-d": cmd_sweep_d,
    "time-trace": cmd_time_trace,
    "full-run": cmd_full_run,
    "state-transfer": cmd_state_transfer,
    "bosonization-check": cmd_bosonization_check,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, args.set)
        if args.engine:
            cfg.values["engine"] = args.engine
        return _COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InfeasibleParameterError as exc:
        print(f"infeasible parameters: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (IntegrationError, AccuracyError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except WecsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    raise SystemExit(main())
