"""Particle toolkit for constrained optimal control of non-local dynamics on
spaces of probability measures: simulation, Wasserstein gradients, costate
integration, and maximum-principle certificate checking."""

from .measures import (
    Coupling,
    DiscreteMeasure,
    disintegration_bound_check,
    optimal_coupling,
    pushforward,
    support_radius,
    w1_dual_bound,
    wasserstein,
)
from .fields import (
    ConstantField,
    ControlLaw,
    InteractionKernel,
    KernelBounds,
    SpatialField,
    basis_catalog,
    check_hypotheses,
    eval_control,
    eval_control_jacobian,
    eval_gamma,
    eval_velocity,
    eval_velocity_jacobian,
    kernel_catalog,
)
from .functionals import (
    NBody,
    RunningCost,
    StateConstraint,
    SupportDistance,
    Variance,
    chainrule_fd_oracle,
    constraint_catalog,
    running_catalog,
    terminal_catalog,
)
from .dynamics import (
    NeedleEntry,
    NeedlePackage,
    TimeGrid,
    TrajectorySolution,
    apply_needle,
    flow_map,
    solve_forward,
    solve_linearized_classical,
    solve_linearized_nonlocal,
    solve_needle_linearization,
    verify_first_order,
)
from .pmp import (
    CostatePath,
    GridMeasure,
    MultiplierSet,
    PMPCertificate,
    ZetaPath,
    check_certificate,
    final_gradient,
    grad_penalized_constraint,
    hamiltonian,
    k_function,
    k_function_table,
    penalized_constraint,
    solve_costate_backward,
    zeta_from_measure,
)
from .scenario import Scenario, load_scenario, scenario_from_dict

__version__ = "0.1.0"
