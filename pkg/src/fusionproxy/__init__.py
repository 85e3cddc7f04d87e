"""Distill stochastic fusion teachers into a fast single-pass student.

Pipeline: sample an ensemble of fused outputs per image pair from pluggable
teachers, compress it into pixel- and feature-space statistics cached on
disk, then train a lightweight dual-encoder network against those statistics
alone. Includes fusion quality metrics, a latency benchmark harness, and a
CLI (``fusionproxy cache | train | fuse | bench | eval``).
"""

from .bench import BenchReport, bench_model, benchmark
from .cache import CacheConfig, CachedPair, build_cache, load_manifest, load_norms, load_pair, verify_cache
from .images import (
    AffinePerturbation,
    FusedImage,
    ImagePair,
    PerturbationSpec,
    apply_affine,
    load_dataset,
    load_png,
    resample_bilinear,
    sample_perturbation,
    save_png,
)
from .losses import LossBreakdown, LossWeights, mfm_loss, pixel_loss, ssim, ssim_loss, total_loss
from .metrics import entropy, evaluate_dir, evaluate_pair, mutual_information, q_abf, spatial_frequency, ssim_value
from .panel import (
    Backbone,
    BackboneSpec,
    FeatureStats,
    PanelNormStats,
    StandinBackbone,
    build_panel,
    feature_stats,
    feature_target,
    feature_variance,
    fit_norm_stats,
    normalized_features,
    panel_hash,
    routing_entropy,
    routing_weights,
    standin_backbone,
)
from .student import (
    FusionHead,
    FusionStudent,
    StudentConfig,
    build_student,
    fuse_pair,
    load_checkpoint,
    parameter_count,
    save_checkpoint,
)
from .teachers import (
    EnsembleStats,
    SyntheticTeacher,
    Teacher,
    TeacherProfile,
    TeacherSampleSet,
    draw_ensemble,
    ensemble_mean,
    ensemble_stats,
    pixel_variance,
    pixel_weights,
    teacher_from_name,
)
from .training import (
    StepProbe,
    TrainConfig,
    Trainer,
    TrainLogRecord,
    crop_supervision,
    misalign_sweep,
    tau_sweep,
    train,
)

__version__ = "0.1.0"
