"""Image synthesis by feature matching and channel-covariance alignment.

The engine optimizes an image so that its convolutional features stay close
to a content image (preserving shape) while its per-layer channel covariances
match those of a style image (transferring second-order texture statistics).
Everything runs on numpy; weights come from a small binary container or from
seeded random initialization.
"""

from .net import (
    ActivationCache,
    LayerSpec,
    NetworkSpec,
    backward_input_grad,
    conv,
    forward,
    pool,
    receptive_field,
    relu,
    vgg16,
)
from .losses import (
    LossConfig,
    coral_loss,
    coral_loss_grad,
    covariance,
    default_config,
    feature_loss,
    feature_loss_grad,
    total_objective,
)
from .synthesis import (
    DivergenceError,
    SweepResult,
    SynthesisConfig,
    SynthesisTrace,
    TracePoint,
    init_image,
    sweep_lambda,
    synthesize,
)
from .dataio import (
    ManifestError,
    ManifestRecord,
    ManifestWriter,
    PreprocSpec,
    deprocess,
    load_image,
    preprocess,
    read_manifest,
    save_image,
    write_manifest,
)
from .weights import (
    WeightFormatError,
    load_weights,
    random_weights,
    write_weights,
)

__version__ = "0.1.0"

__all__ = [
    "ActivationCache",
    "DivergenceError",
    "LayerSpec",
    "LossConfig",
    "ManifestError",
    "ManifestRecord",
    "ManifestWriter",
    "NetworkSpec",
    "PreprocSpec",
    "SweepResult",
    "SynthesisConfig",
    "SynthesisTrace",
    "TracePoint",
    "WeightFormatError",
    "backward_input_grad",
    "conv",
    "coral_loss",
    "coral_loss_grad",
    "covariance",
    "default_config",
    "deprocess",
    "feature_loss",
    "feature_loss_grad",
    "forward",
    "init_image",
    "load_image",
    "load_weights",
    "pool",
    "preprocess",
    "random_weights",
    "read_manifest",
    "receptive_field",
    "relu",
    "save_image",
    "sweep_lambda",
    "synthesize",
    "total_objective",
    "vgg16",
    "write_manifest",
    "write_weights",
]
