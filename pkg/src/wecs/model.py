"""Physical model: parameter container, Hamiltonian and dissipator builders.

All frequencies and couplings inside :class:`SystemParams` are angular
(rad/us); decay rates are plain inverse microseconds.  Configuration files
quote linear frequencies nu = omega/2pi in MHz, converted exactly once by
:meth:`SystemParams.from_mhz`.

Factor label conventions: the coupler qubit is ``A``; block j consists of
qubit ``qj``, cavity ``cj`` and ensemble mode ``bj``.  Builders accept any
signature and act on every block whose labels are present, so the same
functions serve the full space, a single block, or bare pairs like
(``q``, ``c``).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace
import numpy as np

from .dynamics import TimeDependentHamiltonian
from .errors import DimensionError, SignatureError
from .hilbert import (
    Operator,
    SpaceSignature,
    embed,
    make_boson_ops,
    make_qubit_ops,
)

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class SystemParams:
    """Every constant of the driven qubit/cavity/ensemble model.

    Angular units (rad/us) for couplings, drives and detunings; rates in
    1/us.  ``g_r_per_block`` optionally overrides the resonant qubit-cavity
    coupling block by block (the swap timing then differs per block).
    """

    n_blocks: int = 3
    g_A: float = TWO_PI * 50.0       # coupler-cavity coupling
    g_r: float = TWO_PI * 5.0        # resonant qubit-cavity coupling
    g: float = TWO_PI * 5.0          # off-resonant qubit-cavity coupling
    g_b: float = TWO_PI * 4.0        # ensemble-cavity coupling
    Omega_eg: float = TWO_PI * 50.0  # qubit rotation pulse Rabi frequency
    Omega: float = TWO_PI * 100.0    # displacement-stage drive Rabi frequency
    phi: float = -math.pi / 2.0      # rotation pulse phase
    delta_a: float = TWO_PI * 36.0   # cavity-qubit detuning
    delta_b: float = TWO_PI * 36.0   # cavity-ensemble detuning
    kappa: float = 1.0               # cavity decay rate
    kappa_prime: float = 1.0e-3      # ensemble decay rate
    gamma: float = 1.0 / 25.0        # qubit relaxation rate
    gamma_phi: float = 1.0 / 15.0    # qubit dephasing rate
    N_c: int = 3                     # cavity Fock truncation
    N_b: int = 12                    # ensemble Fock truncation
    target_beta: float = 1.2
    g_r_per_block: tuple[float, ...] | None = None
    idle_coupler_decay: bool = False
    coherent_tail_tol: float = 1e-6

    def __post_init__(self):
        if self.n_blocks < 1:
            raise DimensionError("n_blocks must be >= 1")
        for name in ("g_A", "g_r", "g", "g_b", "Omega_eg", "Omega"):
            if getattr(self, name) <= 0:
                raise ValueError(f"coupling {name} must be positive")
        for name in ("kappa", "kappa_prime", "gamma", "gamma_phi"):
            if getattr(self, name) < 0:
                raise ValueError(f"rate {name} must be non-negative")
        if self.N_c < 2 or self.N_b < 2:
            raise DimensionError("Fock truncations must be >= 2")
        if self.g_r_per_block is not None and len(self.g_r_per_block) != self.n_blocks:
            raise ValueError("g_r_per_block needs one coupling per block")

    @classmethod
    def from_mhz(
        cls,
        g_A_mhz: float = 50.0,
        g_r_mhz: float = 5.0,
        g_mhz: float = 5.0,
        g_b_mhz: float = 4.0,
        omega_eg_mhz: float = 50.0,
        omega_mhz: float = 100.0,
        delta_a_mhz: float = 36.0,
        delta_b_mhz: float = 36.0,
        kappa_inv_us: float = 1.0,
        kappa_prime_inv_us: float = 1000.0,
        gamma_inv_us: float = 25.0,
        gamma_phi_inv_us: float = 15.0,
        **kwargs,
    ) -> "SystemParams":
        """Build from linear-frequency (MHz) and lifetime (us) inputs."""
        return cls(
            g_A=TWO_PI * g_A_mhz,
            g_r=TWO_PI * g_r_mhz,
            g=TWO_PI * g_mhz,
            g_b=TWO_PI * g_b_mhz,
            Omega_eg=TWO_PI * omega_eg_mhz,
            Omega=TWO_PI * omega_mhz,
            delta_a=TWO_PI * delta_a_mhz,
            delta_b=TWO_PI * delta_b_mhz,
            kappa=1.0 / kappa_inv_us if kappa_inv_us > 0 else 0.0,
            kappa_prime=1.0 / kappa_prime_inv_us if kappa_prime_inv_us > 0 else 0.0,
            gamma=1.0 / gamma_inv_us if gamma_inv_us > 0 else 0.0,
            gamma_phi=1.0 / gamma_phi_inv_us if gamma_phi_inv_us > 0 else 0.0,
            **kwargs,
        )

    # -- derived quantities (pure functions of the fields) ------------------

    @property
    def lam(self) -> float:
        """Dispersive qubit-ensemble coupling g*g_b/4 (1/delta_a + 1/delta_b)."""
        return self.g * self.g_b / 4.0 * (1.0 / self.delta_a + 1.0 / self.delta_b)

    @property
    def delta_c(self) -> float:
        return self.delta_a - self.delta_b

    @property
    def Delta(self) -> float:
        """Effective displacement detuning delta_c - g_b^2/delta_b."""
        return self.delta_c - self.g_b ** 2 / self.delta_b

    @property
    def stark_shift(self) -> float:
        """Vacuum-induced ensemble frequency pull g_b^2/delta_b."""
        return self.g_b ** 2 / self.delta_b

    @property
    def detuning_ratio(self) -> float:
        """delta_b / g_b, the sweep variable of the detuning study."""
        return self.delta_b / self.g_b

    def with_rates_zero(self) -> "SystemParams":
        return replace(self, kappa=0.0, kappa_prime=0.0, gamma=0.0, gamma_phi=0.0)

    def block_g_r(self, j: int) -> float:
        if self.g_r_per_block is not None:
            return self.g_r_per_block[j - 1]
        return self.g_r


# ---------------------------------------------------------------------------
# Signatures
# ---------------------------------------------------------------------------


def block_signature(p: SystemParams, j: int | str = "") -> SpaceSignature:
    """(qubit, cavity, ensemble) factors for one block."""
    s = str(j)
    return SpaceSignature([(f"q{s}", 2), (f"c{s}", p.N_c), (f"b{s}", p.N_b)])


def coupler_signature(p: SystemParams, n_c: int | None = None) -> SpaceSignature:
    """(coupler, cavities...) space used while the coupler is active."""
    d = p.N_c if n_c is None else n_c
    factors = [("A", 2)]
    factors += [(f"c{j}", d) for j in range(1, p.n_blocks + 1)]
    return SpaceSignature(factors)


def full_signature(p: SystemParams) -> SpaceSignature:
    """All blocks, grouped block by block (no coupler)."""
    factors = []
    for j in range(1, p.n_blocks + 1):
        factors += [(f"q{j}", 2), (f"c{j}", p.N_c), (f"b{j}", p.N_b)]
    return SpaceSignature(factors)


def _block_ids(sig: SpaceSignature, lead: str, partner: str) -> list[str]:
    """Suffixes s such that both lead+s and partner+s are factors of sig."""
    labels = set(sig.labels)
    out = []
    for lab in sig.labels:
        if lab.startswith(lead) and lab != "A":
            s = lab[len(lead):]
            if f"{partner}{s}" in labels:
                out.append(s)
    return out


def _pair_product(sig, op1: Operator, lab1: str, op2: Operator, lab2: str):
    return (embed(op1, lab1, sig) @ embed(op2, lab2, sig)).data


# ---------------------------------------------------------------------------
# Hamiltonian builders
# ---------------------------------------------------------------------------


def build_h_i1(p: SystemParams, sig: SpaceSignature) -> Operator:
    """Coupler resonantly exchanging excitations with every cavity:
    sum_j g_A (a_j^dag sA^- + a_j sA^+).  Conserves total excitation number.
    """
    if "A" not in sig.labels:
        raise SignatureError("coupler factor 'A' missing from signature")
    cavities = [lab for lab in sig.labels if lab.startswith("c")]
    if not cavities:
        raise SignatureError("no cavity factors in signature")
    qA = make_qubit_ops("A")
    h = None
    for lab in cavities:
        adag = make_boson_ops(sig.dim_of(lab), lab).creation
        term = p.g_A * _pair_product(sig, adag, lab, qA.sigma_minus, "A")
        h = term if h is None else h + term
    h = h + h.conj().T
    return Operator(sig, h, hermitian=True)


def build_h_i2(p: SystemParams, sig: SpaceSignature) -> Operator:
    """Per-block resonant qubit-cavity exchange sum_j g_rj (a_j^dag s_j^- + h.c.)."""
    ids = _block_ids(sig, "q", "c")
    if not ids:
        raise SignatureError("no (qubit, cavity) block pairs in signature")
    h = None
    for s in ids:
        j = int(s) if s else 1
        q = make_qubit_ops(f"q{s}")
        adag = make_boson_ops(sig.dim_of(f"c{s}"), f"c{s}").creation
        term = p.block_g_r(j) * _pair_product(sig, adag, f"c{s}", q.sigma_minus, f"q{s}")
        h = term if h is None else h + term
    h = h + h.conj().T
    return Operator(sig, h, hermitian=True)


def build_h_i3(p: SystemParams, sig: SpaceSignature) -> Operator:
    """Resonant classical pulse on each qubit:
    sum_j Omega_eg (e^{i phi} |g><e| + h.c.)."""
    qlabels = [lab for lab in sig.labels if lab.startswith("q")]
    if not qlabels:
        raise SignatureError("no qubit factors in signature")
    h = None
    for lab in qlabels:
        q = make_qubit_ops(lab)
        term = p.Omega_eg * np.exp(1j * p.phi) * embed(q.sigma_minus, lab, sig).data
        h = term if h is None else h + term
    h = h + h.conj().T
    return Operator(sig, h, hermitian=True)


def _check_dispersive(p: SystemParams):
    if p.delta_a <= 0 or p.delta_b <= 0:
        raise ValueError("displacement stage needs positive detunings")
    ra, rb = p.delta_a / p.g, p.delta_b / p.g_b
    if ra < 3.0 or rb < 3.0:
        raise ValueError(
            f"detuning ratios delta_a/g = {ra:.2f}, delta_b/g_b = {rb:.2f} "
            "are below 3; the dispersive treatment breaks down"
        )
    if ra < 5.0 or rb < 5.0:
        warnings.warn(
            f"detuning ratios delta_a/g = {ra:.2f}, delta_b/g_b = {rb:.2f} "
            "below 5; dispersive corrections may be visible",
            stacklevel=3,
        )


def build_h_i4_terms(p: SystemParams, sig: SpaceSignature) -> TimeDependentHamiltonian:
    """Displacement-stage Hamiltonian, kept in rotating-term form:

    sum_j g [e^{i delta_a t} a_j^dag s_j^- + h.c.]
    + sum_j g_b [e^{i delta_b t} a_j^dag b_j + h.c.]
    + sum_j Omega (s_j^+ + s_j^-).
    """
    _check_dispersive(p)
    ids_qc = _block_ids(sig, "q", "c")
    ids_cb = _block_ids(sig, "c", "b")
    if not ids_qc or not ids_cb:
        raise SignatureError("displacement stage needs (q, c) and (c, b) pairs")
    a_qubit = None
    a_mode = None
    static = None
    for s in ids_qc:
        q = make_qubit_ops(f"q{s}")
        adag = make_boson_ops(sig.dim_of(f"c{s}"), f"c{s}").creation
        t1 = p.g * _pair_product(sig, adag, f"c{s}", q.sigma_minus, f"q{s}")
        a_qubit = t1 if a_qubit is None else a_qubit + t1
        drive = p.Omega * embed(q.sigma_plus + q.sigma_minus, f"q{s}", sig).data
        static = drive if static is None else static + drive
    for s in ids_cb:
        adag = make_boson_ops(sig.dim_of(f"c{s}"), f"c{s}").creation
        b = make_boson_ops(sig.dim_of(f"b{s}"), f"b{s}").annihilation
        t2 = p.g_b * _pair_product(sig, adag, f"c{s}", b, f"b{s}")
        a_mode = t2 if a_mode is None else a_mode + t2
    return TimeDependentHamiltonian(
        static, [(p.delta_a, a_qubit), (p.delta_b, a_mode)]
    )


def build_h_i4(p: SystemParams, sig: SpaceSignature, t: float) -> Operator:
    """Displacement-stage Hamiltonian evaluated at time t."""
    h = build_h_i4_terms(p, sig).evaluate(t)
    return Operator(sig, h, hermitian=True)


def sigma_z_rotated() -> np.ndarray:
    """|+><+| - |-><-| with |+-> = (|e> +- |g>)/sqrt2; equals sigma_x in
    the (|g>, |e>) basis."""
    return np.array([[0.0, 1.0], [1.0, 0.0]], dtype=complex)


def build_h_eff_terms(p: SystemParams, sig: SpaceSignature) -> TimeDependentHamiltonian:
    """Dispersive limit of the displacement stage:

    -sum_j lam sz~_j (b_j e^{-i Delta t} + b_j^dag e^{i Delta t}),

    acting trivially on the cavity factors.  Delta = 0 is legal and simply
    yields the static resonant-displacement limit.
    """
    _check_dispersive(p)
    ids = _block_ids(sig, "q", "b")
    if not ids:
        raise SignatureError("effective stage needs (q, b) pairs")
    rot = None
    for s in ids:
        bdag = make_boson_ops(sig.dim_of(f"b{s}"), f"b{s}").creation
        sz = Operator(SpaceSignature([(f"q{s}", 2)]), sigma_z_rotated(), hermitian=True)
        term = -p.lam * _pair_product(sig, sz, f"q{s}", bdag, f"b{s}")
        rot = term if rot is None else rot + term
    zero = rot * 0.0
    if p.Delta == 0.0:
        return TimeDependentHamiltonian(rot + rot.conj().T)
    return TimeDependentHamiltonian(zero, [(p.Delta, rot)])


def build_h_eff(p: SystemParams, sig: SpaceSignature, t: float) -> Operator:
    h = build_h_eff_terms(p, sig).evaluate(t)
    return Operator(sig, h, hermitian=True)


def build_collapse_ops(p: SystemParams, sig: SpaceSignature) -> list[tuple[Operator, float]]:
    """Jump operators with rates for every factor present in the signature.

    Cavity decay (a_j, kappa), ensemble decay (b_j, kappa'), qubit
    relaxation (s_j^-, gamma) and qubit dephasing as the jump operator
    sigma_z with rate gamma_phi, which reproduces the double-sided form
    gamma_phi (sz rho sz - rho) exactly since sz^2 = 1.  The coupler gets
    the same relaxation/dephasing rates as the block qubits.  Zero-rate
    entries are dropped.
    """
    out: list[tuple[Operator, float]] = []
    for lab, dim in sig.factors:
        if lab == "A" or lab.startswith("q"):
            q = make_qubit_ops(lab)
            if p.gamma > 0:
                out.append((embed(q.sigma_minus, lab, sig), p.gamma))
            if p.gamma_phi > 0:
                out.append((embed(q.sigma_z, lab, sig), p.gamma_phi))
        elif lab.startswith("c"):
            if p.kappa > 0:
                a = make_boson_ops(dim, lab).annihilation
                out.append((embed(a, lab, sig), p.kappa))
        elif lab.startswith("b"):
            if p.kappa_prime > 0:
                b = make_boson_ops(dim, lab).annihilation
                out.append((embed(b, lab, sig), p.kappa_prime))
    return out


# ---------------------------------------------------------------------------
# Spin-ensemble micro-model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EnsembleMicroModel:
    """N two-level spins (|0>, |+1| sublevels) coupled to one cavity mode."""

    couplings: tuple[float, ...]  # g_k, rad/us
    delta: float = 0.0            # cavity-spin detuning

    @property
    def n_spins(self) -> int:
        return len(self.couplings)

    @property
    def g_rms(self) -> float:
        """Root mean square of the individual couplings."""
        g = np.asarray(self.couplings)
        return float(math.sqrt(np.sum(np.abs(g) ** 2) / len(g)))

    @property
    def collective_coupling(self) -> float:
        """sqrt(N) * g_rms, the coupling of the bright collective mode."""
        return math.sqrt(self.n_spins) * self.g_rms

    @classmethod
    def uniform(cls, n_spins: int, g_k: float, delta: float = 0.0) -> "EnsembleMicroModel":
        return cls(tuple([g_k] * n_spins), delta)


def micro_signature(m: EnsembleMicroModel, cavity_dim: int = 2) -> SpaceSignature:
    factors = [("cav", cavity_dim)]
    factors += [(f"s{k}", 2) for k in range(1, m.n_spins + 1)]
    return SpaceSignature(factors)


def build_micro_hamiltonian(m: EnsembleMicroModel, sig: SpaceSignature) -> Operator:
    """sum_k g_k (a^dag tau_k^- + a tau_k^+) in the resonant frame."""
    adag = make_boson_ops(sig.dim_of("cav"), "cav").creation
    h = None
    for k, g_k in enumerate(m.couplings, start=1):
        tau_minus = make_qubit_ops(f"s{k}").sigma_minus
        term = g_k * _pair_product(sig, adag, "cav", tau_minus, f"s{k}")
        h = term if h is None else h + term
    h = h + h.conj().T
    return Operator(sig, h, hermitian=True)


def collective_raising_matrix(m: EnsembleMicroModel) -> np.ndarray:
    """b^dag = (1/(sqrt(N) g_rms)) sum_k g_k tau_k^+ on the bare spin space."""
    n = m.n_spins
    dim = 2 ** n
    sig = SpaceSignature([(f"s{k}", 2) for k in range(1, n + 1)])
    out = None
    for k, g_k in enumerate(m.couplings, start=1):
        tau_plus = make_qubit_ops(f"s{k}").sigma_plus
        term = g_k * embed(tau_plus, f"s{k}", sig).data
        out = term if out is None else out + term
    mat = out / m.collective_coupling
    return mat.toarray() if hasattr(mat, "toarray") else mat


@dataclass
class BosonizationReport:
    """How closely the collective spin operator matches a bosonic ladder."""

    n_spins: int
    n_max: int
    matrix_elements: list[float]
    bosonic_values: list[float]
    rel_deviations: list[float]
    max_rel_deviation: float
    bright_state_coupling: float
    collective_coupling: float


def collective_mode_check(m: EnsembleMicroModel, n_max: int) -> BosonizationReport:
    """Compare <n+1| b^dag |n> on symmetric spin states against sqrt(n+1).

    The states |n> are the normalized n-fold applications of the collective
    raising operator to the all-ground state; deviations grow like O(n/N).
    """
    if n_max >= m.n_spins:
        raise DimensionError("collective check needs n_max below the spin count")
    bdag = collective_raising_matrix(m)
    dim = bdag.shape[0]
    state = np.zeros(dim, dtype=complex)
    state[0] = 1.0  # all spins in |0>
    elements, bosonic, devs = [], [], []
    current = state
    for n in range(n_max):
        raised = bdag @ current
        norm = np.linalg.norm(raised)
        elem = float(norm)  # <n+1|b^dag|n> with |n+1> the normalized raise
        target = math.sqrt(n + 1.0)
        elements.append(elem)
        bosonic.append(target)
        devs.append(abs(elem / target - 1.0))
        current = raised / norm

    # bright-state coupling: one cavity photon, spins ground
    sig = micro_signature(m, cavity_dim=2)
    h = build_micro_hamiltonian(m, sig)
    ket = np.zeros(sig.dim, dtype=complex)
    # |1>_cav x |0...0>: cavity is the slowest factor
    ket[sig.dim // 2] = 1.0
    hmat = h.data
    image = hmat @ ket if not hasattr(hmat, "toarray") else np.asarray(hmat @ ket).ravel()
    bright = float(np.linalg.norm(image))

    return BosonizationReport(
        n_spins=m.n_spins,
        n_max=n_max,
        matrix_elements=elements,
        bosonic_values=bosonic,
        rel_deviations=devs,
        max_rel_deviation=max(devs),
        bright_state_coupling=bright,
        collective_coupling=m.collective_coupling,
    )
