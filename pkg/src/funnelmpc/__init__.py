"""Funnel-based model predictive output tracking.

The package splits along the pipeline: funnel boundaries and gain
conditions (``funnel``), the chained error variables (``errchain``), plant
descriptions (``systems``), fixed-step simulation and the funnel feedback
law (``sim``), the barrier optimal control problem (``ocp``), the receding
horizon loop (``mpc``), CSV/SVG artifacts (``logio``), and the command line
front end (``cli``).
"""

from .errchain import (
    chain_matrix,
    error_variables,
    highest_error_identity_check,
    polynomial_coefficients,
)
from .errors import (
    FunnelMpcError,
    InternalDynamicsDiverged,
    OcpInfeasibleError,
    PreconditionViolation,
    RecursiveFeasibilityViolation,
    SingularGainError,
)
from .funnel import (
    ClassGReport,
    FunnelChain,
    FunnelFunction,
    GainSelection,
    GainVector,
    InitialJetData,
    build_funnel_chain,
    class_g_check,
    default_gamma,
    exponential_sum_funnel,
    funnel_from_callables,
    funnel_membership,
    gain_lower_bounds,
    gamma_margin,
    saturation_bound,
    select_gains,
)
from .mpc import ClosedLoopLog, GuaranteeReport, MpcConfig, run_fmpc, verify_guarantees
from .ocp import (
    OcpSolution,
    OcpSpec,
    StageCost,
    brute_force_ocp,
    cost_functional,
    solve_ocp,
    stage_cost,
)
from .sim import (
    ControlSignal,
    FeedbackLaw,
    JetHistory,
    NormalFormPlant,
    StateSpacePlant,
    Trajectory,
    feasibility_feedback,
    feedback_rollout,
    zoh_feedback_rollout,
    integrate_open_loop,
    make_plant,
)
from .systems import (
    CausalOperator,
    MassOnCarParams,
    ReferenceSignal,
    RelativeDegreeSystem,
    StateSpaceSystem,
    constant_reference,
    cosine_reference,
    delay_operator,
    estimate_dynamics_bounds,
    integrator_chain,
    internal_dynamics_operator,
    mass_on_car_initial_data,
    mass_on_car_normal_form,
    mass_on_car_state_space,
    rhs_highest_derivative,
    static_operator,
)

__version__ = "0.1.0"
