"""Complex linear algebra over labeled tensor-product Hilbert spaces.

States and operators carry a :class:`SpaceSignature` naming each tensor
factor.  Kronecker ordering is factor-major: the first factor in the
signature is the slowest index.  All constructions are immutable after
creation and safe to share between threads.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import (
    AccuracyError,
    DimensionError,
    NonHermitianError,
    SignatureError,
    TruncationError,
)

logger = logging.getLogger(__name__)

# kron products at or above this total dimension are stored sparse
DENSE_DIM_LIMIT = 256

HERMITICITY_TOL = 1e-12
NORM_TOL = 1e-10
COHERENT_TAIL_WARN = 1e-8
COHERENT_TAIL_HARD = 1e-4


def _as_dense(m) -> np.ndarray:
    return m.toarray() if sp.issparse(m) else np.asarray(m)


@dataclass(frozen=True)
class SpaceSignature:
    """Ordered list of (label, dim) tensor factors."""

    factors: tuple[tuple[str, int], ...]

    def __init__(self, factors: Iterable[tuple[str, int]]):
        object.__setattr__(self, "factors", tuple((str(l), int(d)) for l, d in factors))
        labels = [l for l, _ in self.factors]
        if len(set(labels)) != len(labels):
            raise SignatureError(f"duplicate factor labels in {labels}")
        for l, d in self.factors:
            if d < 1:
                raise DimensionError(f"factor {l!r} has dimension {d} < 1")

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(l for l, _ in self.factors)

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(d for _, d in self.factors)

    @property
    def dim(self) -> int:
        return int(np.prod(self.dims, dtype=np.int64)) if self.factors else 1

    def index(self, label: str) -> int:
        for i, (l, _) in enumerate(self.factors):
            if l == label:
                return i
        raise SignatureError(f"unknown factor label {label!r}; have {self.labels}")

    def dim_of(self, label: str) -> int:
        return self.factors[self.index(label)][1]

    def subsignature(self, labels: Sequence[str]) -> "SpaceSignature":
        """Kept factors, in original signature order."""
        keep = set(labels)
        for l in labels:
            self.index(l)
        return SpaceSignature([f for f in self.factors if f[0] in keep])

    def __repr__(self) -> str:
        inner = ", ".join(f"{l}:{d}" for l, d in self.factors)
        return f"SpaceSignature({inner})"


def _check_square(data, dim: int, what: str):
    if data.shape != (dim, dim):
        raise SignatureError(f"{what} shape {data.shape} does not match signature dim {dim}")


class Operator:
    """A linear operator on a labeled tensor-product space.

    ``data`` may be a dense ndarray or a scipy sparse matrix.  When
    ``hermitian=True`` the matrix is verified Hermitian to 1e-12.
    """

    __slots__ = ("signature", "data", "hermitian")

    def __init__(self, signature: SpaceSignature, data, hermitian: bool = False):
        if not sp.issparse(data):
            data = np.asarray(data, dtype=complex)
        _check_square(data, signature.dim, "operator")
        if hermitian:
            dev = _herm_deviation(data)
            if dev > HERMITICITY_TOL:
                raise NonHermitianError(f"operator marked Hermitian deviates by {dev:.3e}")
        self.signature = signature
        self.data = data
        self.hermitian = bool(hermitian)

    @property
    def matrix(self) -> np.ndarray:
        """Dense matrix view (converts sparse storage on demand)."""
        return _as_dense(self.data)

    def dagger(self) -> "Operator":
        return Operator(self.signature, self.data.conj().T, hermitian=self.hermitian)

    def _wrap(self, data, hermitian=False) -> "Operator":
        return Operator(self.signature, data, hermitian=hermitian)

    def __matmul__(self, other):
        if isinstance(other, Operator):
            self._require_same(other)
            return self._wrap(self.data @ other.data)
        return self.data @ other

    def __add__(self, other: "Operator") -> "Operator":
        self._require_same(other)
        a, b = self.data, other.data
        if sp.issparse(a) != sp.issparse(b):
            a, b = _as_dense(a), _as_dense(b)
        return self._wrap(a + b)

    def __sub__(self, other: "Operator") -> "Operator":
        return self + (other * (-1.0))

    def __mul__(self, scalar: complex) -> "Operator":
        return self._wrap(self.data * scalar)

    __rmul__ = __mul__

    def herm_deviation(self) -> float:
        return _herm_deviation(self.data)

    def _require_same(self, other: "Operator"):
        if other.signature.factors != self.signature.factors:
            raise SignatureError(
                f"operator signatures differ: {self.signature} vs {other.signature}"
            )

    def __repr__(self):
        kind = "sparse" if sp.issparse(self.data) else "dense"
        return f"Operator({self.signature}, {kind}, dim={self.signature.dim})"


def _herm_deviation(data) -> float:
    d = data - data.conj().T
    if sp.issparse(d):
        return float(abs(d).max()) if d.nnz else 0.0
    return float(np.max(np.abs(d))) if d.size else 0.0


class StateVector:
    """A pure state on a labeled space.

    Normalized to 1 within 1e-10 unless constructed with
    ``normalized=False`` (used for unrenormalized post-selection
    branches).
    """

    __slots__ = ("signature", "amplitudes", "normalized")

    def __init__(self, signature: SpaceSignature, amplitudes, normalized: bool = True):
        amp = np.asarray(amplitudes, dtype=complex).ravel()
        if amp.shape != (signature.dim,):
            raise SignatureError(
                f"amplitude length {amp.shape[0]} does not match signature dim {signature.dim}"
            )
        if normalized:
            n = np.linalg.norm(amp)
            if abs(n - 1.0) > NORM_TOL:
                raise SignatureError(f"state norm {n} deviates from 1 beyond {NORM_TOL}")
        self.signature = signature
        self.amplitudes = amp
        self.normalized = bool(normalized)

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.amplitudes))

    def overlap(self, other: "StateVector") -> complex:
        if other.signature.factors != self.signature.factors:
            raise SignatureError("state signatures differ")
        return complex(np.vdot(self.amplitudes, other.amplitudes))

    def to_density(self) -> "DensityMatrix":
        rho = np.outer(self.amplitudes, self.amplitudes.conj())
        return DensityMatrix(self.signature, rho, unnormalized=not self.normalized)

    def __repr__(self):
        return f"StateVector({self.signature})"


class DensityMatrix:
    """A (possibly unnormalized) density operator on a labeled space."""

    __slots__ = ("signature", "data", "trace")

    def __init__(self, signature: SpaceSignature, data, unnormalized: bool = False):
        data = np.asarray(data, dtype=complex)
        _check_square(data, signature.dim, "density matrix")
        dev = float(np.max(np.abs(data - data.conj().T))) if data.size else 0.0
        if dev > 1e-10:
            raise NonHermitianError(f"density matrix deviates from Hermitian by {dev:.3e}")
        tr = complex(np.trace(data)).real
        if not unnormalized and abs(tr - 1.0) > 1e-8:
            raise SignatureError(f"density trace {tr} deviates from 1 beyond 1e-8")
        self.signature = signature
        self.data = data
        self.trace = tr

    def validate_positive(self, tol: float = 1e-8) -> float:
        """Smallest eigenvalue; raises if below -tol."""
        w = np.linalg.eigvalsh(self.data)
        lo = float(w[0])
        if lo < -tol:
            raise AccuracyError(f"density matrix has eigenvalue {lo:.3e} below -{tol:.0e}")
        return lo

    def expectation(self, op) -> complex:
        m = op.data if isinstance(op, Operator) else op
        if sp.issparse(m):
            return complex((m @ self.data).trace())
        return complex(np.einsum("ij,ji->", m, self.data))

    def __repr__(self):
        return f"DensityMatrix({self.signature}, trace={self.trace:.6f})"


class BosonOps(NamedTuple):
    annihilation: Operator
    creation: Operator
    number: Operator


class QubitOps(NamedTuple):
    sigma_minus: Operator
    sigma_plus: Operator
    sigma_z: Operator
    proj_g: Operator
    proj_e: Operator


def make_boson_ops(dim: int, label: str = "mode") -> BosonOps:
    """Truncated ladder operators with <n-1|a|n> = sqrt(n).

    Raises DimensionError for dim < 2.
    """
    if dim < 2:
        raise DimensionError(f"bosonic truncation needs dim >= 2, got {dim}")
    sig = SpaceSignature([(label, dim)])
    a = np.diag(np.sqrt(np.arange(1, dim, dtype=float)), k=1).astype(complex)
    adag = a.conj().T
    return BosonOps(
        Operator(sig, a),
        Operator(sig, adag),
        Operator(sig, adag @ a, hermitian=True),
    )


def make_qubit_ops(label: str = "qubit") -> QubitOps:
    """Two-level operators in the (|g>, |e>) ordering.

    sigma_z = |e><e| - |g><g| (excited minus ground).
    """
    sig = SpaceSignature([(label, 2)])
    sm = np.array([[0, 1], [0, 0]], dtype=complex)  # |g><e|
    sp_ = sm.conj().T
    sz = np.diag([-1.0, 1.0]).astype(complex)
    pg = np.diag([1.0, 0.0]).astype(complex)
    pe = np.diag([0.0, 1.0]).astype(complex)
    return QubitOps(
        Operator(sig, sm),
        Operator(sig, sp_),
        Operator(sig, sz, hermitian=True),
        Operator(sig, pg, hermitian=True),
        Operator(sig, pe, hermitian=True),
    )


QUBIT_G = np.array([1.0, 0.0], dtype=complex)
QUBIT_E = np.array([0.0, 1.0], dtype=complex)
QUBIT_PLUS = np.array([1.0, 1.0], dtype=complex) / math.sqrt(2.0)   # (|e>+|g>)/sqrt2
QUBIT_MINUS = np.array([-1.0, 1.0], dtype=complex) / math.sqrt(2.0)  # (|e>-|g>)/sqrt2


def embed(op: Operator, target_label: str, sig: SpaceSignature) -> Operator:
    """Lift a single-factor operator to I x ... x op x ... x I on ``sig``."""
    idx = sig.index(target_label)
    d_target = sig.dims[idx]
    if op.signature.dim != d_target:
        raise DimensionError(
            f"operator dim {op.signature.dim} does not match factor "
            f"{target_label!r} dim {d_target}"
        )
    use_sparse = sig.dim >= DENSE_DIM_LIMIT
    mat = op.data
    if use_sparse and not sp.issparse(mat):
        mat = sp.csr_matrix(mat)
    if not use_sparse and sp.issparse(mat):
        mat = mat.toarray()

    def eye(n):
        return sp.identity(n, format="csr", dtype=complex) if use_sparse else np.eye(n, dtype=complex)

    left = int(np.prod(sig.dims[:idx], dtype=np.int64)) if idx else 1
    right = int(np.prod(sig.dims[idx + 1:], dtype=np.int64)) if idx + 1 < len(sig.dims) else 1
    if use_sparse:
        out = sp.kron(sp.kron(eye(left), mat, format="csr"), eye(right), format="csr")
    else:
        out = np.kron(np.kron(eye(left), mat), eye(right))
    return Operator(sig, out, hermitian=op.hermitian)


def coherent_amplitudes(alpha: complex, dim: int) -> tuple[np.ndarray, float]:
    """Truncated coherent amplitudes c_n = e^{-|a|^2/2} a^n / sqrt(n!) and the
    discarded Poisson tail weight."""
    amps = np.zeros(dim, dtype=complex)
    amps[0] = math.exp(-abs(alpha) ** 2 / 2.0)
    for n in range(1, dim):
        amps[n] = amps[n - 1] * alpha / math.sqrt(n)
    kept = float(np.sum(np.abs(amps) ** 2))
    tail = max(0.0, 1.0 - kept)
    return amps, tail


def coherent_state(
    alpha: complex,
    dim: int,
    label: str = "mode",
    tail_tol: float = COHERENT_TAIL_WARN,
) -> StateVector:
    """Truncated, renormalized coherent state |alpha> on a dim-level mode.

    Warns when the discarded Poisson tail exceeds ``tail_tol`` and raises
    TruncationError above the hard limit 1e-4.
    """
    if dim < 1:
        raise DimensionError(f"coherent state needs dim >= 1, got {dim}")
    amps, tail = coherent_amplitudes(alpha, dim)
    if tail > COHERENT_TAIL_HARD:
        raise TruncationError(
            f"coherent truncation discards weight {tail:.3e} > {COHERENT_TAIL_HARD:.0e} "
            f"(|alpha|^2 = {abs(alpha) ** 2:.3f}, dim = {dim})"
        )
    if tail > tail_tol:
        warnings.warn(
            f"coherent truncation tail {tail:.3e} exceeds tolerance {tail_tol:.0e}",
            stacklevel=2,
        )
    norm = float(np.linalg.norm(amps))
    logger.debug("coherent_state renormalization factor %.12g (tail %.3e)", 1.0 / norm, tail)
    sig = SpaceSignature([(label, dim)])
    return StateVector(sig, amps / norm)


def basis_state(sig: SpaceSignature, occupations: Sequence[int]) -> StateVector:
    """Product basis ket with the given index in each factor."""
    if len(occupations) != len(sig.factors):
        raise SignatureError("one occupation index per factor required")
    amp = np.zeros(sig.dim, dtype=complex)
    flat = 0
    for (label, d), k in zip(sig.factors, occupations):
        if not 0 <= k < d:
            raise DimensionError(f"occupation {k} out of range for factor {label!r} (dim {d})")
        flat = flat * d + k
    amp[flat] = 1.0
    return StateVector(sig, amp)


def product_state(sig: SpaceSignature, vectors: Sequence[np.ndarray]) -> StateVector:
    """Kronecker product of per-factor amplitude vectors, in signature order."""
    if len(vectors) != len(sig.factors):
        raise SignatureError("one vector per factor required")
    amp = np.ones(1, dtype=complex)
    for (label, d), v in zip(sig.factors, vectors):
        v = np.asarray(v, dtype=complex).ravel()
        if v.shape != (d,):
            raise DimensionError(f"vector for factor {label!r} has length {v.size}, need {d}")
        amp = np.kron(amp, v)
    return StateVector(sig, amp, normalized=abs(np.linalg.norm(amp) - 1.0) <= NORM_TOL)


def fidelity_pure_target(rho: DensityMatrix, psi: StateVector) -> float:
    """sqrt(<psi|rho|psi>), clamped against small negative numerical noise."""
    if rho.signature.factors != psi.signature.factors:
        raise SignatureError("fidelity: density and target signatures differ")
    val = np.vdot(psi.amplitudes, rho.data @ psi.amplitudes).real
    if val < -1e-12:
        raise AccuracyError(f"target expectation {val:.3e} below the -1e-12 noise floor")
    return float(math.sqrt(min(max(val, 0.0), 1.0)))


def partial_trace(rho: DensityMatrix, keep_labels: Sequence[str]) -> DensityMatrix:
    """Reduced density matrix over the kept factors (original order)."""
    if not keep_labels:
        raise SignatureError("partial_trace needs at least one kept label")
    sig = rho.signature
    keep_idx = sorted(sig.index(l) for l in keep_labels)
    dims = sig.dims
    k = len(dims)
    tensor = rho.data.reshape(dims + dims)
    # trace out factors not kept, from the highest axis down so indices stay valid
    for ax in reversed([i for i in range(k) if i not in keep_idx]):
        n_remaining = tensor.ndim // 2
        tensor = np.trace(tensor, axis1=ax, axis2=ax + n_remaining)
    new_sig = SpaceSignature([sig.factors[i] for i in keep_idx])
    d = new_sig.dim
    return DensityMatrix(new_sig, tensor.reshape(d, d), unnormalized=True)
