"""Risk-averse stochastic economic MPC over finite-support noise.

Scenario-tree optimal control with parameterized risk-measure stage costs,
closed-loop MPC simulation, and turnpike diagnostics.
"""

from .ensemble import (
    Ensemble,
    PairedEnsemble,
    dedup,
    ky_fan,
    mean,
    moment_distance,
    wasserstein_1d,
)
from .mpc import (
    AtomCapError,
    ExactPropagation,
    MpcConfig,
    MpcError,
    MpcTrace,
    feedback,
    performance_sweep,
    run_closed_loop,
    run_exact_propagation,
)
from .risk import (
    RiskMinimizationError,
    RiskSpec,
    RiskValue,
    avar_exact,
    avar_softplus,
    custom_psi,
    evaluate,
    expectation,
    inner_minimize,
    kl_divergence,
    kl_reduced,
)
from .sysmodel import Problem, ScalarCoeffs, make_example1, make_example2, probe_jacobians
from .tree import (
    DecisionVector,
    RolloutError,
    ScenarioTree,
    TreeSizeError,
    build_tree,
    default_decision,
    rollout,
    shift_decision,
    solve_ocp,
    value_decomposition_check,
)
from .turnpike import (
    StationaryEstimate,
    TurnpikeError,
    estimate_stationary,
    exceedance_profile,
    trajectory_bundle,
    turnpike_curves,
)

__version__ = "0.1.0"
