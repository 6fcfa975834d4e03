"""Numerical laboratory for null-controls of the coupled
fourth-order-parabolic / elliptic system on (0,1)."""

__version__ = "0.1.0"

from .operators import (
    Grid,
    OperatorSet,
    NegNormRealizer,
    build_grid,
    build_operators,
    solve_elliptic,
    neg_norm,
)
from .dynamics import (
    SystemParams,
    ControlWindow,
    Trajectory,
    SourceTerm,
    System,
    apply_F,
    solve_forward_linear,
    solve_forward_nonlinear,
    solve_forward_eps,
    solve_adjoint,
    solve_adjoint_eps,
)
from .hum import (
    HumConfig,
    ControlResult,
    CostCurve,
    gramian_apply,
    compute_null_control,
    compute_null_control_eps,
    cost_sweep,
)
from .source_term import (
    WeightSchedule,
    TimeGrid,
    PiecewiseControl,
    make_weights,
    make_time_grid,
    verify_weight_relation,
    assemble_source_term_control,
)
from .fixed_point import (
    FixedPointConfig,
    FixedPointResult,
    lambda_map,
    solve_nonlinear_control,
)
from .carleman import (
    NuFunction,
    CarlemanWeights,
    CarlemanAudit,
    build_nu,
    build_weights,
    eval_functionals,
)
