"""Single-loop bilevel learning for imaging problems.

Per outer iteration the method takes one primal-dual step on the inner
reconstruction problem, one linear-system splitting step on the adjoint
equation, and one proximal-gradient step on the hyperparameters.  The
package also ships the high-precision implicit baseline, the experiment
builders (MRI sampling-mask learning, deconvolution-kernel identification,
a closed-form quadratic toy), and oracle-based verification utilities.
"""

from .containers import (
    DimensionMismatch,
    DualField,
    Grid2,
    MetricNotPositive,
    PdpsMetric,
    PrimalDualState,
    inner_product,
    q_form,
    q_norm,
)
from .linops import (
    KernelParams,
    LinearOperator,
    MaskParams,
    build_line_map,
    conv_build,
    conv_param_derivative,
    diff_adjoint,
    diff_apply,
    diff_operator,
    fft2_adjoint,
    fft2_apply,
    mask_apply,
    rotate,
)
from .prox import (
    DeblurOuterRegParams,
    MriOuterRegParams,
    SmoothedTVConjParams,
    grad_smoothed_tv_conj,
    hess_smoothed_tv_conj,
    prox_deblur_outer,
    prox_mri_data,
    prox_mri_outer,
    prox_smoothed_tv_conj,
)
from .inner_solvers import (
    InnerProblemCallbacks,
    PdpsStepParams,
    StepLengthViolation,
    fb_step,
    pdps_step,
    validate_pdps_steps,
)
from .adjoint import (
    AdjointMatrix,
    AdjointSystem,
    BlockGaussSeidel,
    GaussSeidelSplitting,
    IdentitySplitting,
    JacobiSplitting,
    NoSplitting,
    SplittingError,
    block_gs_step,
    check_split_condition,
    splitting_step,
    theta_x_field,
)
from .driver import (
    BataState,
    BilevelProblem,
    IterateLog,
    MethodDefaults,
    RunConfig,
    bata_iteration,
    hypergradient,
    implicit_solve,
    relative_errors,
    run,
)
from .experiments import (
    DeblurExperimentConfig,
    MriExperimentConfig,
    build_deblur_problem,
    build_mri_problem,
    build_quadratic_problem,
    simulate_deblur_data,
    simulate_mri_data,
)
from .verification import (
    OracleReport,
    brute_prox_oracle,
    fd_hypergradient,
    three_point_monotonicity_check,
    tracking_monitor,
)

__version__ = "0.1.0"
