"""REML variance estimation for linear mixed models as optimization on R x prod P^{q_j}."""
from .design import FixedDesign, GroupedDesign, GroupingFactor, LmmProblem
from .hmatrix import HFactorization, HPattern, assemble_H, cholmod_available
from .manifold import (
    NotPositiveDefiniteError,
    ProductManifold,
    SpdPoint,
    SymTangent,
    ThetaPoint,
    ThetaTangent,
    product_inner,
    product_norm,
    product_retract,
    product_transport,
    spd_egrad_to_rgrad,
    spd_inner,
    spd_retract,
    spd_rhess,
    spd_transport,
)
from .objective import (
    LmmObjective,
    ObjectiveWorkspace,
    evaluate,
    gls_beta,
    init_theta,
    riemannian_gradient,
    riemannian_hess_vec,
)
from .optimizers import (
    LineSearchConfig,
    RunResult,
    StoppingConfig,
    Termination,
    TrustRegionConfig,
    check_stopping,
    rcg_solve,
    rntr_solve,
    tcg_subsolve,
)
from .simulation import Dataset, FactorSpec, Scenario, generate_dataset, scenario_random_intercepts, scenario_random_slope
from .harness import ExperimentConfig, MetricsSummary, deviation_LR, extract_estimates, mse, run_experiment

__version__ = "0.1.0"
