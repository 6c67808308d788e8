"""wecs: W-type entangled coherent states of spin ensembles in circuit QED.

Simulates a four-stage preparation protocol for a continuous-variable
W state shared by bosonized spin ensembles in separate driven cavities,
with lossy Lindblad dynamics, analytic oracles, block-factorized channel
composition, and CSV-producing sweep commands.
"""

from .errors import (
    AccuracyError,
    ConfigError,
    DimensionError,
    InfeasibleParameterError,
    IntegrationError,
    NonHermitianError,
    SignatureError,
    TruncationError,
    WecsError,
)
from .hilbert import (
    DensityMatrix,
    Operator,
    SpaceSignature,
    StateVector,
    coherent_state,
    embed,
    fidelity_pure_target,
    make_boson_ops,
    make_qubit_ops,
    partial_trace,
)
from .model import (
    EnsembleMicroModel,
    SystemParams,
    build_collapse_ops,
    build_h_eff,
    build_h_i1,
    build_h_i2,
    build_h_i3,
    build_h_i4,
    build_micro_hamiltonian,
    collective_mode_check,
)
from .dynamics import (
    EvolutionTask,
    QuantumChannel,
    Stage,
    TimeDependentHamiltonian,
    compose_block_channels,
    compose_block_channels_operator,
    evolve_lindblad,
    extract_channel,
    mean_photon,
    propagate_exact,
)
from .oracles import (
    OracleReport,
    oracle_coupler_spread,
    oracle_displacement_amplitude,
    oracle_displacement_phase,
    oracle_jc,
    oracle_rotation,
    oracle_transfer,
    run_oracle_suite,
)
from .protocol import (
    ProtocolResult,
    StepPlan,
    alpha_of_t,
    beta_final,
    ideal_state_after_step,
    ideal_w_state,
    measure_intracavity_qubits,
    post_selected_outcomes,
    run_protocol,
    state_transfer,
    step_fidelity,
)

__version__ = "0.1.0"
