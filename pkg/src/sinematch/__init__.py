"""sinematch: semi-supervised image classification with a sinusoidal
confidence-threshold schedule, plus a minimal DDPM that manufactures the
synthetic unlabeled pool."""

from . import tensor
from .augment import AugmentationSpec, strong_augment, weak_augment
from .datagen import (
    CorticalParams,
    DatasetBundle,
    bayes_gap_check,
    make_bundle,
    render_sample,
)
from .diffusion import (
    DiffusionSchedule,
    SamplerConfig,
    ancestral_sample,
    diffusion_loss,
    invert_with_oracle,
    q_sample,
    train_denoiser,
)
from .models import (
    ClassifierConfig,
    DenoiserConfig,
    classifier_forward,
    denoiser_forward,
    init_classifier,
    init_denoiser,
    time_embedding,
)
from .optim import EmaParams, SgdState, init_sgd, sgd_step
from .rng import stream, substream
from .schedulers import (
    AdaptiveAscent,
    Fixed,
    IterationClock,
    LinearDecay,
    SinusoidalDecay,
    adaptive_update,
    envelope,
    threshold_at,
)
from .tensor import Tensor, backward, no_grad, trace, zero_grads
from .training import (
    PseudoLabelDecision,
    RunRecord,
    SslTrainer,
    TrainConfig,
    consistency_loss,
    evaluate,
    pseudo_label,
    train_run,
    train_step,
)

__version__ = "0.1.0"
