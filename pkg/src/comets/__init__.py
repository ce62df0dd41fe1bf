"""Correlated multivariate market series: conditional WGAN, guided diffusion and evaluation."""

from .data import (
    ChannelKind,
    ChannelMeta,
    MultivariateSeries,
    PreprocessState,
    SyntheticDatasetSpec,
    apply_preprocess,
    fit_preprocess,
    generate,
    ingest_csv,
    invert_preprocess,
    read_series_csv,
    segment,
    write_series_csv,
)
from .diffusion import (
    DiffusionModel,
    DiffusionTrainConfig,
    EpsNetConfig,
    GuidanceConfig,
    NoiseSchedule,
    forward_sample,
    sample_guided,
    sample_unguided,
    train_diffusion,
)
from .gan import Critic, CriticConfig, GanModel, GanTrainConfig, Generator, GeneratorConfig, train_gan
from .generation import PerturbationSpec, RolloutConfig, apply_perturbation, reactivity_experiment, rollout
from .metrics import (
    CorrelationWindowSpec,
    cross_correlation_distance,
    discriminative_score,
    evaluate,
    pearson,
    stylized_facts_report,
    wasserstein_1d,
    windowed_correlations,
)

__version__ = "0.1.0"
