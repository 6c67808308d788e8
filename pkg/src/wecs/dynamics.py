"""Time evolution engines.

Exact propagators for static Hamiltonians, an embedded adaptive
Dormand-Prince 5(4) integrator for (time-dependent) Lindblad dynamics in
matrix form, restricted quantum-channel extraction, and block-product
channel composition.  The Liouvillian is never materialized; the
right-hand side is applied as H/L matrix products, batched over a leading
axis when several operators evolve under the same generator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import AccuracyError, IntegrationError, NonHermitianError, SignatureError
from .hilbert import DensityMatrix, Operator, SpaceSignature, StateVector, embed, make_boson_ops

DEFAULT_REL_TOL = 1e-8
DEFAULT_ABS_TOL = 1e-10
TRACE_DRIFT_TOL = 1e-6

# adaptive steps never exceed this fraction of the fastest rotating period
ROTATING_STEP_FRACTION = 1.0 / 20.0


def _raw(m):
    return m.data if isinstance(m, Operator) else m


class TimeDependentHamiltonian:
    """H(t) = static + sum_k (e^{i w_k t} A_k + e^{-i w_k t} A_k^dag).

    ``rotating`` holds (w_k, A_k) pairs; the Hermitian conjugate partner is
    implicit, so H(t) is Hermitian whenever ``static`` is.
    """

    def __init__(self, static, rotating: Sequence[tuple[float, object]] = ()):
        self.static = _raw(static)
        self.rotating = [(float(w), _raw(a)) for w, a in rotating]
        self.dim = self.static.shape[0]

    @property
    def is_static(self) -> bool:
        return not self.rotating

    def evaluate(self, t: float):
        h = self.static
        for w, a in self.rotating:
            z = np.exp(1j * w * t)
            term = z * a
            h = h + term + term.conj().T
        return h

    @property
    def max_frequency(self) -> float:
        return max((abs(w) for w, _ in self.rotating), default=0.0)

    @property
    def suggested_max_step(self) -> float:
        """Step ceiling resolving the fastest phase (period / 20)."""
        wmax = self.max_frequency
        return math.inf if wmax == 0.0 else (2.0 * math.pi / wmax) * ROTATING_STEP_FRACTION


def as_time_dependent(hamiltonian) -> TimeDependentHamiltonian:
    if isinstance(hamiltonian, TimeDependentHamiltonian):
        return hamiltonian
    return TimeDependentHamiltonian(hamiltonian)


@dataclass
class Stage:
    """One evolution segment: a generator and how long it acts."""

    hamiltonian: object  # matrix, Operator, or TimeDependentHamiltonian
    collapse_ops: Sequence[tuple[object, float]]
    duration: float


@dataclass
class EvolutionTask:
    """A single Lindblad integration with optional recorded observables."""

    hamiltonian: object
    collapse_ops: Sequence[tuple[object, float]]
    initial: object  # StateVector | DensityMatrix | ndarray
    t_final: float
    dt_hint: float | None = None
    record: Sequence[tuple[object, float]] = ()  # (observable, sampling interval)
    rel_tol: float = DEFAULT_REL_TOL
    abs_tol: float = DEFAULT_ABS_TOL
    fixed_step: float | None = None

    def __post_init__(self):
        if self.t_final <= 0:
            raise ValueError("t_final must be positive")
        if self.dt_hint is not None and self.dt_hint > self.t_final:
            raise ValueError("dt_hint must not exceed t_final")


@dataclass
class RecordedTraces:
    """Sampled expectation values Tr[O rho(t)] per recorded observable."""

    times: list
    values: list


class LindbladRHS:
    """drho/dt = -i (H_nh rho - rho H_nh^dag) + sum_k r_k L_k rho L_k^dag,

    with H_nh = H(t) - (i/2) sum_k r_k L_k^dag L_k.  Correct for arbitrary
    (non-Hermitian) matrix arguments, so channel basis elements |u><v| can
    be evolved directly.  Supports a leading batch axis for dense storage.
    """

    def __init__(self, hamiltonian: TimeDependentHamiltonian, collapse_ops):
        self.h = hamiltonian
        self.jumps = []
        k_sum = None
        for op, rate in collapse_ops:
            if rate == 0.0:
                continue
            l_mat = _raw(op)
            if sp.issparse(l_mat):
                l_mat = l_mat.tocsr()
            ld = l_mat.conj().T
            if sp.issparse(ld):
                ld = ld.tocsr()
            self.jumps.append((float(rate), l_mat, ld))
            ldl = (ld @ l_mat) * rate
            k_sum = ldl if k_sum is None else k_sum + ldl
        h0 = self.h.static
        self.h_nh_static = h0 if k_sum is None else h0 - 0.5j * k_sum
        self.sparse = sp.issparse(self.h_nh_static) or any(
            sp.issparse(a) for _, a in self.h.rotating
        )

    def _h_nh(self, t: float):
        h = self.h_nh_static
        for w, a in self.h.rotating:
            z = np.exp(1j * w * t)
            h = h + z * a + np.conj(z) * a.conj().T
        return h

    def __call__(self, t: float, rho: np.ndarray) -> np.ndarray:
        h_nh = self._h_nh(t)
        if self.sparse and rho.ndim == 3:
            out = np.empty_like(rho)
            for k in range(rho.shape[0]):
                out[k] = self._apply(h_nh, rho[k])
            return out
        return self._apply(h_nh, rho)

    def _apply(self, h_nh, rho):
        h_dag = h_nh.conj().T
        out = -1j * (h_nh @ rho - rho @ h_dag)
        for rate, l_mat, ld in self.jumps:
            out = out + rate * (l_mat @ rho @ ld)
        return out


class BatchedLindbladRHS:
    """Lindblad generator as a sparse superoperator on stacked columns.

    States are row-major vectorized into a (d*d, k) batch; the static part
    and each rotating frequency become one precomputed superoperator, so a
    right-hand-side evaluation is a handful of sparse matvec batches:

        dV/dt = K0 V + sum_k (z_k P_k + conj(z_k) Q_k) V,  z_k = e^{i w_k t}.

    Dense superoperators are used below dimension 32 where scipy's call
    overhead would dominate.  Intended for block-size spaces; the full
    system superoperator would be far too large and the brute-force path
    keeps the matrix-product form instead.
    """

    _DENSE_LIMIT = 32

    def __init__(self, hamiltonian: TimeDependentHamiltonian, collapse_ops):
        base = LindbladRHS(hamiltonian, collapse_ops)
        d = base.h_nh_static.shape[0]
        self.dim = d
        eye = sp.identity(d, format="csr", dtype=complex)

        def to_sp(m):
            return sp.csr_matrix(m) if not sp.issparse(m) else m.tocsr()

        def commutator_super(m):
            m = to_sp(m)
            return -1j * (sp.kron(m, eye, format="csr")
                          - sp.kron(eye, m.T, format="csr"))

        s = base.h_nh_static
        s = to_sp(s)
        k0 = -1j * (sp.kron(s, eye, format="csr") - sp.kron(eye, s.conj(), format="csr"))
        for rate, l_mat, ld in base.jumps:
            l_sp = to_sp(l_mat)
            k0 = k0 + rate * sp.kron(l_sp, l_sp.conj(), format="csr")
        self.rot_super = []
        for w, a in base.h.rotating:
            a_sp = to_sp(a)
            self.rot_super.append(
                (w, commutator_super(a_sp), commutator_super(a_sp.conj().T))
            )
        if d < self._DENSE_LIMIT:
            k0 = k0.toarray()
            self.rot_super = [(w, p.toarray(), q.toarray()) for w, p, q in self.rot_super]
        self.k0 = k0

    def __call__(self, t: float, v: np.ndarray) -> np.ndarray:
        out = self.k0 @ v
        for w, p, q in self.rot_super:
            z = np.exp(1j * w * t)
            out = out + z * (p @ v) + np.conj(z) * (q @ v)
        return np.asarray(out)


class SchrodingerRHS:
    """dpsi/dt = -i H(t) psi; a batch of kets may sit in trailing columns."""

    def __init__(self, hamiltonian: TimeDependentHamiltonian):
        self.h = hamiltonian

    def __call__(self, t: float, psi: np.ndarray) -> np.ndarray:
        out = self.h.evaluate(t) @ psi
        return -1j * np.asarray(out)


# ---------------------------------------------------------------------------
# Embedded Dormand-Prince 5(4)
# ---------------------------------------------------------------------------

_DP_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_DP_A = [
    np.array([]),
    np.array([1 / 5]),
    np.array([3 / 40, 9 / 40]),
    np.array([44 / 45, -56 / 15, 32 / 9]),
    np.array([19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729]),
    np.array([9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656]),
    np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84]),
]
_DP_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_DP_B4 = np.array(
    [5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40]
)
_DP_ERR = _DP_B5 - _DP_B4

_MIN_STEP_FACTOR = 1e-14


@dataclass
class IntegrationStats:
    steps: int = 0
    rejected: int = 0
    rhs_calls: int = 0


def _dp_step(rhs, t, y, h, k1, stats):
    """One Dormand-Prince step from (t, y): returns (y5, err_vec, k7)."""
    ks = [k1]
    for i in range(1, 7):
        yi = y
        for j, aij in enumerate(_DP_A[i]):
            if aij != 0.0:
                yi = yi + (h * aij) * ks[j]
        ks.append(rhs(t + _DP_C[i] * h, yi))
        stats.rhs_calls += 1
    y5 = y
    for j in range(7):
        if _DP_B5[j] != 0.0:
            y5 = y5 + (h * _DP_B5[j]) * ks[j]
    err_vec = None
    for j in range(7):
        if _DP_ERR[j] != 0.0:
            term = (h * _DP_ERR[j]) * ks[j]
            err_vec = term if err_vec is None else err_vec + term
    return y5, err_vec, ks[6]


def _scaled_error(err_vec, y0, y1, rel_tol, abs_tol) -> float:
    scale = abs_tol + rel_tol * np.maximum(np.abs(y0), np.abs(y1))
    q = np.abs(err_vec) / scale
    return float(np.sqrt(np.mean(q * q)))


def integrate_ode(
    rhs: Callable[[float, np.ndarray], np.ndarray],
    y0: np.ndarray,
    t_span: tuple[float, float],
    rel_tol: float = DEFAULT_REL_TOL,
    abs_tol: float = DEFAULT_ABS_TOL,
    max_step: float = math.inf,
    dt_hint: float | None = None,
    fixed_step: float | None = None,
    sample_times: Sequence[float] | None = None,
    on_sample: Callable[[float, np.ndarray], None] | None = None,
) -> tuple[np.ndarray, IntegrationStats]:
    """March a linear ODE with embedded 5(4) error control.

    Local error per step is held at rel_tol * scale + abs_tol (RMS over all
    elements).  ``fixed_step`` disables adaptivity and takes uniform steps
    (used by the order self-test).  Steps are clamped so each entry of
    ``sample_times`` is hit exactly, where ``on_sample(t, y)`` fires.

    Raises IntegrationError on step-size underflow, carrying the failure
    time.
    """
    t0, t1 = map(float, t_span)
    if t1 <= t0:
        raise ValueError("integration span must be forward in time")
    stats = IntegrationStats()
    y = np.array(y0, dtype=complex, copy=True)

    samples = np.sort(np.asarray(sample_times, dtype=float)) if sample_times is not None else None
    sample_idx = 0
    tiny = 1e-12 * max(1.0, abs(t1))
    if samples is not None and on_sample is not None:
        while sample_idx < len(samples) and samples[sample_idx] <= t0 + tiny:
            on_sample(float(samples[sample_idx]), y)
            sample_idx += 1

    t = t0
    span = t1 - t0
    k1 = rhs(t, y)
    stats.rhs_calls += 1

    if fixed_step is not None:
        n_steps = max(1, int(round(span / fixed_step)))
        h = span / n_steps
        for _ in range(n_steps):
            y, _, k1 = _dp_step(rhs, t, y, h, k1, stats)
            t += h
            stats.steps += 1
            sample_idx = _emit(samples, on_sample, sample_idx, t, y, tiny)
        return y, stats

    min_step = _MIN_STEP_FACTOR * max(abs(t1), 1.0)
    h = dt_hint if dt_hint else span / 50.0
    h = min(h, max_step, span)

    while t < t1 - tiny:
        h = min(h, max_step, t1 - t)
        clamped = False
        if samples is not None and sample_idx < len(samples):
            target = samples[sample_idx]
            if t + h >= target - tiny and target > t + tiny:
                h = target - t
                clamped = True
        if h < min_step:
            raise IntegrationError(f"step size underflow ({h:.3e}) at t = {t:.6e}", t_failure=t)
        y_new, err_vec, k_last = _dp_step(rhs, t, y, h, k1, stats)
        err = _scaled_error(err_vec, y, y_new, rel_tol, abs_tol)
        if err <= 1.0:
            t = t + h
            y = y_new
            k1 = k_last
            stats.steps += 1
            sample_idx = _emit(samples, on_sample, sample_idx, t, y, tiny)
            factor = 5.0 if err == 0.0 else min(5.0, max(0.2, 0.9 * err ** -0.2))
            h = h * factor
        else:
            stats.rejected += 1
            h = h * max(0.2, 0.9 * err ** -0.2)

    return y, stats


def _emit(samples, on_sample, sample_idx, t, y, tiny):
    if samples is None or on_sample is None:
        return sample_idx
    while sample_idx < len(samples) and samples[sample_idx] <= t + tiny:
        on_sample(float(samples[sample_idx]), y)
        sample_idx += 1
    return sample_idx


# ---------------------------------------------------------------------------
# Public evolution operations
# ---------------------------------------------------------------------------


def propagate_exact(h, state, t: float):
    """Apply exp(-i H t) for a static Hermitian H via eigendecomposition.

    ``state`` may be a StateVector or DensityMatrix; the same type is
    returned.  Raises NonHermitianError for non-Hermitian input.
    """
    h_mat = _raw(h)
    if sp.issparse(h_mat):
        h_mat = h_mat.toarray()
    dev = float(np.max(np.abs(h_mat - h_mat.conj().T)))
    if dev > 1e-10:
        raise NonHermitianError(f"propagate_exact requires Hermitian H (deviation {dev:.3e})")
    w, v = np.linalg.eigh(h_mat)
    phases = np.exp(-1j * w * t)
    if isinstance(state, StateVector):
        amp = v @ (phases * (v.conj().T @ state.amplitudes))
        return StateVector(state.signature, amp, normalized=state.normalized)
    if isinstance(state, DensityMatrix):
        u = (v * phases) @ v.conj().T
        return DensityMatrix(state.signature, u @ state.data @ u.conj().T, unnormalized=True)
    amp = v @ (phases * (v.conj().T @ np.asarray(state, dtype=complex)))
    return amp


def _initial_matrix(initial) -> tuple[np.ndarray, bool, SpaceSignature | None]:
    """Returns (matrix, is_unit_trace_density, signature)."""
    if isinstance(initial, StateVector):
        rho = np.outer(initial.amplitudes, initial.amplitudes.conj())
        return rho, initial.normalized, initial.signature
    if isinstance(initial, DensityMatrix):
        return initial.data.copy(), abs(initial.trace - 1.0) < 1e-8, initial.signature
    arr = np.asarray(initial, dtype=complex)
    return arr, False, None


def evolve_lindblad(task: EvolutionTask):
    """Integrate the master equation for one task.

    Returns (final, RecordedTraces).  ``final`` is a DensityMatrix when the
    input carried a signature, else a raw ndarray.  Raises AccuracyError if
    the trace drifts by more than 1e-6 for a unit-trace input.
    """
    h = as_time_dependent(task.hamiltonian)
    rhs = LindbladRHS(h, task.collapse_ops)
    rho0, unit_trace, sig = _initial_matrix(task.initial)

    obs = []
    times_per_obs = []
    values_per_obs = []
    merged = {}
    for i, (op, interval) in enumerate(task.record):
        if interval <= 0:
            raise ValueError("record interval must be positive")
        n = int(math.floor(task.t_final / interval + 1e-9))
        ts = np.round(np.arange(0, n + 1) * interval, 15)
        ts = ts[ts <= task.t_final + 1e-12]
        obs.append(_raw(op))
        times_per_obs.append(ts)
        values_per_obs.append([])
        for tval in ts:
            merged.setdefault(float(tval), []).append(i)

    sample_times = sorted(merged) if merged else None

    def on_sample(tval, y):
        for i in merged.get(tval, ()):  # exact keys by construction
            m = obs[i]
            if sp.issparse(m):
                val = complex((m @ y).trace()) if y.ndim == 2 else np.array(
                    [complex((m @ yk).trace()) for yk in y]
                )
            else:
                val = np.einsum("ij,...ji->...", m, y)
            values_per_obs[i].append(val)

    y_final, stats = integrate_ode(
        rhs,
        rho0,
        (0.0, task.t_final),
        rel_tol=task.rel_tol,
        abs_tol=task.abs_tol,
        max_step=h.suggested_max_step,
        dt_hint=task.dt_hint,
        fixed_step=task.fixed_step,
        sample_times=sample_times,
        on_sample=on_sample if merged else None,
    )

    if unit_trace:
        drift = abs(complex(np.trace(y_final)).real - 1.0)
        if drift > TRACE_DRIFT_TOL:
            raise AccuracyError(f"trace drifted by {drift:.3e} (> {TRACE_DRIFT_TOL:.0e})")

    traces = RecordedTraces(
        times=[np.asarray(ts) for ts in times_per_obs],
        values=[np.asarray(vs) for vs in values_per_obs],
    )
    final = DensityMatrix(sig, y_final, unnormalized=True) if sig is not None else y_final
    return final, traces


def evolve_schrodinger(
    hamiltonian,
    psi0: np.ndarray,
    duration: float,
    rel_tol: float = DEFAULT_REL_TOL,
    abs_tol: float = DEFAULT_ABS_TOL,
) -> np.ndarray:
    """Pure-state evolution under a (possibly time-dependent) Hamiltonian."""
    h = as_time_dependent(hamiltonian)
    rhs = SchrodingerRHS(h)
    psi, _ = integrate_ode(
        rhs,
        np.asarray(psi0, dtype=complex),
        (0.0, duration),
        rel_tol=rel_tol,
        abs_tol=abs_tol,
        max_step=h.suggested_max_step,
    )
    return psi


def mean_photon(rho: DensityMatrix, mode_label: str) -> float:
    """Tr[n_mode rho] for one bosonic factor; tiny negatives are clamped."""
    dim = rho.signature.dim_of(mode_label)
    number = make_boson_ops(dim, mode_label).number
    n_full = embed(number, mode_label, rho.signature)
    val = rho.expectation(n_full).real
    if val < -1e-10:
        raise AccuracyError(f"mean photon number {val:.3e} below -1e-10")
    return float(max(val, 0.0))


# ---------------------------------------------------------------------------
# Restricted quantum channels and block composition
# ---------------------------------------------------------------------------


class QuantumChannel:
    """Action of a Lindblad evolution on a declared input subspace.

    ``input_kets`` spans the subspace; the channel stores the evolved image
    of every |u_i><u_j| with i <= j, recovering i > j from Hermiticity
    (Lindblad evolution commutes with the adjoint).  ``recorded`` optionally
    holds sampled traces Tr[O_k E_t(B_ij)] on a common time grid;
    ``record_adjoint_map[k]`` names the index of O_k^dag within the recorded
    list so mirrored pairs can be reconstructed as conjugates.
    """

    def __init__(
        self,
        signature,
        input_kets,
        outputs,
        record_times=None,
        recorded=None,
        record_adjoint_map=None,
    ):
        self.signature = signature
        self.input_kets = [np.asarray(k, dtype=complex) for k in input_kets]
        self.outputs = outputs  # dict[(i, j)] -> (d, d) ndarray
        self.record_times = record_times
        self.recorded = recorded or {}  # dict[(i, j)] -> (n_times, n_obs)
        self.record_adjoint_map = record_adjoint_map

    def pair(self, i: int, j: int) -> np.ndarray:
        if (i, j) in self.outputs:
            return self.outputs[(i, j)]
        return self.outputs[(j, i)].conj().T

    def recorded_series(self, i: int, j: int, obs_idx: int) -> np.ndarray:
        """Tr[O_k E_t(|u_i><u_j|)] over the record grid.

        Mirrored pairs use Tr[O E(B^dag)] = conj(Tr[O^dag E(B)]).
        """
        if (i, j) in self.recorded:
            return self.recorded[(i, j)][:, obs_idx]
        if self.record_adjoint_map is None:
            raise SignatureError("no adjoint map recorded; cannot mirror pair traces")
        k = self.record_adjoint_map[obs_idx]
        return np.conj(self.recorded[(j, i)][:, k])

    def trace_preservation_error(self) -> float:
        """Max |Tr E(|u><u|) - 1| over the declared basis."""
        err = 0.0
        for i in range(len(self.input_kets)):
            err = max(err, abs(complex(np.trace(self.pair(i, i))).real - 1.0))
        return err


def extract_channel(
    stages: Sequence[Stage],
    input_kets: Sequence[np.ndarray],
    signature: SpaceSignature | None = None,
    record_ops: Sequence[np.ndarray] = (),
    record_adjoint_map: Sequence[int] | None = None,
    sample_times: Sequence[float] | None = None,
    rel_tol: float = DEFAULT_REL_TOL,
    abs_tol: float = DEFAULT_ABS_TOL,
    exploit_hermiticity: bool = True,
) -> QuantumChannel:
    """Evolve |u_i><u_j| basis elements through a chain of stages.

    All basis elements advance together as one batched integration per
    stage.  With ``exploit_hermiticity`` only i <= j pairs are evolved
    (halving the work); pass False to evolve every pair independently,
    which the invariant tests use to confirm adjoint consistency.

    ``sample_times`` are offsets within the total chained duration; at each
    one, Tr[O E_t(B_ij)] is recorded for every O in ``record_ops``.
    """
    kets = [np.asarray(k, dtype=complex).ravel() for k in input_kets]
    m = len(kets)
    if exploit_hermiticity:
        pairs = [(i, j) for i in range(m) for j in range(i, m)]
    else:
        pairs = [(i, j) for i in range(m) for j in range(m)]
    d = kets[0].shape[0]
    stacked = np.stack([np.outer(kets[i], kets[j].conj()) for i, j in pairs])
    # row-major vectorized batch, one basis element per column
    batch = np.ascontiguousarray(stacked.reshape(len(pairs), d * d).T)

    obs = [_raw(o) for o in record_ops]
    obs_rows = np.stack([np.asarray(o).T.ravel() for o in obs]) if obs else None
    rec = {p: [] for p in pairs} if obs else {}
    rec_times: list[float] = []

    samples = np.sort(np.asarray(sample_times, dtype=float)) if sample_times is not None else None

    offset = 0.0
    for stage in stages:
        h = as_time_dependent(stage.hamiltonian)
        rhs = BatchedLindbladRHS(h, stage.collapse_ops)
        local_samples = None
        if samples is not None:
            sel = samples[samples <= offset + stage.duration + 1e-12]
            local_samples = np.clip(sel - offset, 0.0, stage.duration)

        def on_sample(tval, y, _offset=offset):
            rec_times.append(_offset + tval)
            vals = obs_rows @ y  # (n_obs, n_pairs): Tr[O rho] = vec(O^T) . vec(rho)
            for idx, p in enumerate(pairs):
                rec[p].append(vals[:, idx].copy())

        batch, _ = integrate_ode(
            rhs,
            batch,
            (0.0, stage.duration),
            rel_tol=rel_tol,
            abs_tol=abs_tol,
            max_step=h.suggested_max_step,
            sample_times=local_samples,
            on_sample=on_sample if (obs and local_samples is not None and len(local_samples)) else None,
        )
        offset += stage.duration
        if samples is not None:
            samples = samples[samples > offset + 1e-12]

    outputs = {p: batch[:, idx].reshape(d, d).copy() for idx, p in enumerate(pairs)}
    recorded = {p: np.asarray(v) for p, v in rec.items()} if obs else None
    times = np.asarray(rec_times) if obs else None
    return QuantumChannel(
        signature,
        kets,
        outputs,
        record_times=times,
        recorded=recorded,
        record_adjoint_map=list(record_adjoint_map) if record_adjoint_map is not None else None,
    )


def compose_block_channels_operator(
    channels: Sequence[QuantumChannel],
    op_terms: Sequence[tuple[complex, Sequence[tuple[int, int]]]],
    target_branches: Sequence[tuple[complex, Sequence[np.ndarray]]],
) -> float:
    """<psi_t| (tensor_j E_j)(rho_in) |psi_t> as a branch-pair sum, returned
    as the square-rooted fidelity.

    ``op_terms`` expands rho_in = sum_m c_m tensor_j |u_{i_mj}><u_{j_mj}|;
    ``target_branches`` expands |psi_t> = sum_w d_w tensor_j |w_j>.  The
    global density matrix is never materialized.
    """
    n_blocks = len(channels)
    # per block: sandwich cache <w| E(B_pair) |w'>
    total = 0.0 + 0.0j
    for coeff, pairs in op_terms:
        if len(pairs) != n_blocks:
            raise SignatureError("one (ket, bra) index pair per block required")
        for dw, wkets in target_branches:
            for dwp, wpkets in target_branches:
                prod = np.conj(dw) * dwp
                for j in range(n_blocks):
                    out = channels[j].pair(*pairs[j])
                    prod *= np.vdot(wkets[j], out @ wpkets[j])
                total += coeff * prod
    val = total.real
    if abs(total.imag) > 1e-8:
        raise AccuracyError(f"composed overlap has imaginary part {total.imag:.3e}")
    return float(math.sqrt(min(max(val, 0.0), 1.0)))


def compose_block_channels(
    channels: Sequence[QuantumChannel],
    input_branches: Sequence[tuple[complex, Sequence[int]]],
    target_branches: Sequence[tuple[complex, Sequence[np.ndarray]]],
) -> float:
    """Fidelity of a channel-evolved pure branch expansion against a target.

    ``input_branches`` expands |psi_in> = sum_u c_u tensor_j ket[idx_uj];
    the density expansion over (u, v) pairs is generated internally.
    """
    op_terms = []
    for cu, uidx in input_branches:
        for cv, vidx in input_branches:
            op_terms.append((cu * np.conj(cv), list(zip(uidx, vidx))))
    return compose_block_channels_operator(channels, op_terms, target_branches)


def compose_recorded_series(
    channels: Sequence[QuantumChannel],
    op_terms: Sequence[tuple[complex, Sequence[tuple[int, int]]]],
    obs_indices: Sequence[int],
) -> np.ndarray:
    """Time series of sum_m c_m prod_j Tr[O_{k_j} E_t(B_{pair_mj})].

    ``obs_indices[j]`` selects which recorded observable to use at block j.
    Returns a complex array over the common record grid.
    """
    n_t = len(channels[0].record_times)
    out = np.zeros(n_t, dtype=complex)
    for coeff, pairs in op_terms:
        prod = np.full(n_t, complex(coeff), dtype=complex)
        for j, ch in enumerate(channels):
            prod *= ch.recorded_series(pairs[j][0], pairs[j][1], obs_indices[j])
        out += prod
    return out
