"""Policy evaluation toolkit for tabular Markov reward processes.

Exact solvers for value functions, occupancy measures and asymptotic
variances; trajectory simulation; TD, every-visit Monte Carlo and
subgraph-bootstrap batch estimators; a variance-reduced online solver;
data-driven variance estimation and greedy subgraph selection; plus a
benchmark/CLI harness.
"""

__version__ = "0.1.0"

from .errors import (
    MrpError,
    RowSumExceedsOne,
    RewardOutOfBounds,
    NotAbsorbing,
    SingularSystem,
    ZeroOccupancy,
    NotTransient,
    TruncationBudgetExceeded,
    MaxLenExceeded,
    FixedPointNotContractive,
    ZeroVisits,
    NonFiniteIterate,
    InsufficientBudget,
    BudgetExceeded,
    ParameterMismatch,
)
from .mrp_core import (
    TERMINAL,
    RewardModel,
    Mrp,
    LazyMrp,
    HorizonProfile,
    ValidationReport,
    validate,
    exact_value,
    exact_occupancy,
    one_step_variance,
    horizon_profile,
    load_mrp,
    dump_mrp,
)
from .sampling import (
    Trajectory,
    Dataset,
    EmpiricalCounts,
    sample_trajectory,
    sample_dataset,
    pooled_view,
    empirical_counts,
)
from .covariance import (
    Subgraph,
    CovarianceReport,
    sigma_td,
    sigma_mc,
    sigma_subgraph,
    sigma_subgraph_transient,
    check_transient,
    exit_diagnostics,
    refined_diagonal_oracle,
)
from .estimators import (
    EstimateResult,
    td_estimate,
    mc_estimate,
    subgraph_estimate,
    solve_empirical_fixed_point,
)
from .rootsa import (
    RootSaConfig,
    WeightVector,
    compute_weights,
    stochastic_operator,
    population_operator,
    root_sa,
    root_sa_with_restarts,
)
from .variance_estimation import (
    VarianceEstimate,
    transition_power_estimate,
    residual_covariance,
    variance_estimate,
    variance_estimate_plugin,
    truncated_sandwich,
)
from .subgraph_select import (
    SelectionTrace,
    candidate_set,
    greedy_select,
    exact_variance_fn,
)
from . import benchmarks
