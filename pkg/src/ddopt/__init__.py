"""Stochastic optimization under decision-dependent distributions.

The sampling distribution reacts to the decision vector; the algorithms here
(stochastic proximal gradient, its accelerated variant, model-based updates,
online reductions, lazy stagewise drivers, and restart schedules) all search
for the equilibrium decision, the point that is optimal for the distribution
it itself induces.  The package pairs every method with the exact benchmark
family and certification harnesses needed to verify its guarantees
numerically.
"""

from .core import (
    BallReg,
    BoxReg,
    L1Reg,
    NoCertificateError,
    ParameterError,
    Regularizer,
    ScheduleState,
    SquaredNormReg,
    UnsupportedOperationError,
    ZeroReg,
    averaging_update,
    derive_key,
    gamma_products,
    make_regularizer,
    prox,
    w1_empirical_1d,
)
from .problems import (
    DecisionProblem,
    GaussianLocationMap,
    LogisticRidgeLoss,
    ModelConstants,
    ProblemConstants,
    QuadraticLoss,
    StrategicResponseMap,
    certify_lipschitz,
    deviation_check,
    make_problem,
    quad1d,
    quad_nd,
    static_map,
    strategic_from_csv,
    strategic_logistic,
)
from .equilibrium import (
    EquilibriumCertificate,
    closed_form_equilibrium,
    equilibrium,
    fixed_point_equilibrium,
    gap_estimate,
)
from .algorithms import (
    ALGORITHMS,
    AsgState,
    ModelKind,
    RegimeWarning,
    StepSchedule,
    Trajectory,
    alpha_hat,
    asg_run,
    conceptual_prox_grad_step,
    conceptual_prox_point_step,
    conceptual_run,
    geometric_decay,
    mba_run,
    minibatch_restart,
    model_update,
    online_avg_run,
    repeated_minimization_step,
    restart_config,
    run_algorithm,
    sg_run,
    sg_run_batch,
    stagewise_asg_run,
    stagewise_mba_run,
    certified_step,
)
from .harness import (
    ExperimentConfig,
    RateFit,
    fit_rate,
    load_config,
    parse_config,
    regime_sweep,
    run_experiment,
    run_wrapped,
    theory_factor,
)

__version__ = "0.1.0"
