"""Online control of linear dynamical systems with disturbance-action policies.

The package pairs two logarithmic-regret online learners (projected gradient
descent and natural gradient preconditioned by the exact E[JᵀJ]) with the
machinery that justifies them: diagonal strong-stability certificates,
surrogate-loss constructions, exact Toeplitz-Kronecker second moments, and a
numerical certification suite for every spectral bound involved.
"""
from .lds import (
    LinearSystem,
    NoiseModel,
    QuadraticCost,
    Trajectory,
    recover_disturbance,
    rollout,
    sample_noise,
    step,
)
from .learners import (
    LearnerState,
    Preconditioner,
    RunLog,
    StepSchedule,
    auto_horizon,
    ogd_step,
    ogd_with_memory,
    ong_step,
    run_online_control,
)
from .policy import (
    DacController,
    DacPolicy,
    DisturbanceRing,
    LinearController,
    PolicyClass,
    action,
    devectorize,
    linear_to_dac,
    project_euclidean,
    project_weighted,
    vectorize,
)
from .stability import (
    StabilityCertificate,
    StabilityError,
    certify,
    closed_loop,
    default_gain,
    try_certify,
)
from .surrogate import (
    SurrogateModel,
    expected_gram,
    jacobian,
    monte_carlo_gram,
    psi,
    psi_nonstationary,
    read_gram,
    surrogate_cost_and_grad,
    surrogate_pair,
    write_gram,
)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
