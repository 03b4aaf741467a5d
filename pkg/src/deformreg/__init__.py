"""deformreg: unsupervised 2D deformable image registration.

Differentiable bilinear warping, multi-scale photometric/smoothness
losses, a small convolutional deformation-field predictor trained without
ground-truth deformations, a direct per-pair field optimizer, and the
evaluation tooling around them.
"""

from .errors import (
    ConfigError,
    DataFormatError,
    DeformregError,
    DivergenceError,
    ShapeError,
)
from .ndgrad import Tape, Tensor
from .warp import (
    DeformationField,
    Image2D,
    apply_to_landmarks,
    bilinear_warp,
    composition_residual,
    downsample_field,
    invert_field,
    sample_field_at,
    upsample_field,
    warp_mask,
)
from .pyramid import ImagePyramid, build_pyramid, pad_to_pyramid
from .losses import (
    LossConfig,
    LossReport,
    Reduction,
    ScaleInputs,
    SmoothVariant,
    epe_loss,
    overlap_loss,
    photometric_loss,
    smooth_e,
    smooth_n,
    total_loss,
)
from .regnet import ArchConfig, RegModel, deserialize, forward, init_model, serialize
from .engine import (
    AdamState,
    PairDataset,
    RegPair,
    TrainConfig,
    TrainMode,
    adam_step,
    load_checkpoint,
    optimize_field,
    register,
    save_checkpoint,
    train,
)
from .metrics import (
    LandmarkSet,
    MetricReport,
    SegMask,
    evaluate_dataset,
    evaluate_pair,
    jaccard,
    landmark_distance,
)
from .synth import DeformFamily, SynthSpec, generate_synthetic, load_dataset

__version__ = "0.1.0"
