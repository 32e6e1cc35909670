"""Gradient-inversion attack laboratory for federated learning.

Reconstructs private training inputs (video frames, feature matrices) from
per-sample gradients shared in a federated round, and quantifies when a
frozen feature extractor blocks the leak.
"""

from .attacks import (
    AmbiguityError,
    AttackConfig,
    AttackResult,
    InversionError,
    UnsolvableError,
    dlg_attack,
    gradient_match_loss,
    idlg_attack,
    idlg_label_recover,
    rgap_reconstruct,
)
from .autodiff import DimensionError, Tape, TapeError, Tensor, grad
from .harness import (
    CapsuleParseError,
    GradientCapsule,
    Participant,
    ProtocolError,
    compute_shared_gradient,
    deserialize_capsule,
    run_round,
    serialize_capsule,
)
from .media import (
    FeatureMatrix,
    FormatError,
    Frame,
    FrameSequence,
    load_feature_matrix,
    load_frame_dir,
    max_pool_features,
    preprocess,
    tensor_to_frame,
    upscale_bicubic,
    write_frame_dir,
)
from .metrics import QualityReport, psnr, score_sequences, ssim
from .models import (
    build_dlg_lenet,
    build_feature_classifier,
    build_frozen_extractor,
    build_moderate_classifier,
    build_simple_classifier,
    extract_features,
)
from .runner import (
    ConfigError,
    ExperimentConfig,
    StudyReport,
    emit_report,
    run_extractor_study,
    run_features_experiment,
    run_frames_experiment,
)

__version__ = "0.1.0"
