"""Variational data assimilation on chaotic toy systems, with a learned
non-Gaussian background prior next to the classical Gaussian one.

The package splits into: `dynamics` (Lorenz 63/96 plus RK4 and its
adjoint), `tinynn` (dense network kernels and AdamW), `vae` (training and
serialization of the error model), `background` (error sampling and the
covariance factor), `observation` (operators and simulated data), `cost`
(latent-space cost terms), `solver` (L-BFGS), `assimilation` (the three
analysis procedures), and `harness` (twin-experiment sweeps and metrics).
"""

__version__ = "0.1.0"

from .assimilation import (
    AssimilationResult,
    assimilate_naive,
    assimilate_traditional,
    assimilate_vae,
)
from .background import (
    BackgroundCovariance,
    ErrorSampleSet,
    TwinModelPair,
    estimate_covariance,
    generate_error_samples,
    load_samples,
    save_samples,
)
from .cost import (
    CostEval,
    CostSpec,
    bg_term_traditional,
    bg_term_vae,
    det_term,
    make_objective,
    obs_term_3d,
    obs_term_4d,
    total_cost,
)
from .dynamics import (
    IntegratorConfig,
    Lorenz63Params,
    Lorenz96Params,
    integrate,
    jacobian_lorenz63,
    jacobian_lorenz96,
    propagate,
    rhs_lorenz63,
    rhs_lorenz96,
    rk4_adjoint_step,
    rk4_step,
)
from .errors import (
    ConfigError,
    CostSingularError,
    FactorizationError,
    IntegrationDivergedError,
    ModelFormatError,
    TrainingDivergedError,
    UnsupportedOperatorError,
    VaevarError,
)
from .harness import (
    ExperimentConfig,
    ExperimentResult,
    MetricRow,
    PRESETS,
    excess_kurtosis,
    imp_metric,
    lorenz63_masks,
    lorenz63_rho_config,
    lorenz63_sigma_config,
    lorenz96_first_three_masks,
    lorenz96_forcing_config,
    mask_label,
    metrics_csv,
    rmse,
    run_experiment,
)
from .observation import (
    ObservationBatch,
    ObservationOperator,
    apply_operator,
    operator_jacobian,
    simulate_observations,
)
from .solver import LbfgsConfig, MinimizeReport, minimize
from .tinynn import (
    AdamWConfig,
    AdamWState,
    MlpParams,
    MlpShape,
    adamw_step,
    init_mlp,
    mlp_backward,
    mlp_forward,
    mlp_input_jacobian,
    silu,
)
from .vae import (
    VaeModel,
    decode,
    decoder_cloud,
    elbo_loss,
    encode,
    load_model,
    reconstruct,
    save_model,
    train_vae,
)
