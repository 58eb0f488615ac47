"""Numerical laboratory for a single-block mixture-of-experts residual model.

Trains the model under multi-rate gradient flow (explicit Euler, hand-derived
gradients, no autodiff), records two-time order-parameter kernels, machine
checks the discrete Volterra identities that Euler trajectories satisfy
exactly, solves the closed single-site mean-field equations by damped
Monte-Carlo fixed point, and fits empirical concentration rates across sizes.
"""

from .errors import (
    CapabilityError,
    ConfigurationError,
    DivergenceError,
    KernelConditioningError,
    NumericOverflowError,
    StateError,
)
from .model import (
    Activations,
    Dataset,
    FieldState,
    InitScheme,
    LossHook,
    ModelDims,
    ParamState,
    backward,
    forward,
    init_params,
    loss_and_delta,
    make_activation,
    make_probe_dataset,
)
from .dynamics import (
    GradState,
    LearningRates,
    Trace,
    TrainConfig,
    bias_balance_step,
    euler_step,
    gate,
    grad_blocks,
    run_trajectory,
)
from .kernels import (
    GammaFields,
    LevelStates,
    OneTimeMixture,
    TwoTimeKernel,
    dbl_estimate,
    dbl_exact,
    expert_kernels,
    extract_states,
    gamma_fields,
    global_kernels,
    mixture_kernels,
)
from .volterra import ResidualReport, check_all, check_telescoping, check_volterra_field
from .meanfield import (
    DmftConfig,
    DmftKernels,
    SitePopulation,
    quantile_threshold,
    sample_expert_site,
    sample_within_site,
    solve_dmft,
)
from .scaling import (
    Parameterization,
    RateFit,
    SweepPlan,
    apply_parameterization,
    classify_limit,
    collapse_metric,
    concentration_fit,
    get_parameterization,
    run_sweep,
)

__version__ = "0.1.0"
