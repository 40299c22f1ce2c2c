"""Dual-VAE concept learning and prediction lab."""

from .evalkit import (
    AlignmentReport,
    active_core_columns,
    align_latents,
    bayes_optimal_accuracy,
    evaluation_report,
    posterior_agreement,
    prediction_metrics,
)
from .interpret import (
    TraversalConfig,
    annotate_report,
    global_weights,
    local_weights,
    render_report,
    traverse,
)
from .model import (
    CLAPModel,
    DimMismatchError,
    GaussianPosterior,
    ModelDims,
    load_checkpoint,
    sample_posterior,
    save_checkpoint,
)
from .objectives import (
    ObjectiveConfig,
    clap_loss,
    elbo_cl,
    elbo_p,
    kl_diag_gaussians,
    kl_to_mixture,
    sparsity_count,
    sparsity_surrogate,
)
from .synthgen import (
    GenerativeSpec,
    InvalidSpecError,
    LabeledDataset,
    LinearMixing,
    InvertibleMLPMixing,
    ToyImageMixing,
    UnsupportedOracleError,
    demo_linear_spec,
    demo_toy_image_spec,
    exact_log_evidence,
    full_binary_label_space,
    render_toy_images,
    sample_dataset,
    validate_assumptions,
)
from .trainer import (
    DefaultSetup,
    TrainConfig,
    TrainingDivergedError,
    default_config,
    train,
)

__version__ = "0.1.0"
