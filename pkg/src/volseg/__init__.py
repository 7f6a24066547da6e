"""Volumetric segmentation with a frozen 2D slice encoder and a trainable
lightweight 3D decoder.

Pipeline: a 3D volume is sliced along depth, each slice is embedded by a
frozen 2D encoder at stride 16, the per-slice embeddings are stacked into
an embedding volume, and a small 3D convolutional decoder (the only
trainable part) predicts a segmentation with deep supervision.
"""

from .config import (
    InferenceConfig,
    RunConfig,
    derive_decoder_config,
    load_run_config,
    parse_run_config,
    run_config_to_dict,
    save_run_config,
)
from .decoder import (
    Decoder3d,
    DecoderConfig,
    DecoderOutputs,
    ParameterCount,
    build_decoder,
    count_parameters,
    decoder_forward,
    initialize_weights,
)
from .encoder import (
    EmbeddingVolume,
    EncoderConfig,
    PretrainedViTEncoder,
    ToySliceEncoder,
    build_encoder,
    embedding_cache_get_or_compute,
    embedding_cache_key,
    encode_volume,
    initialize_encoder_checkpoint,
    interpolate_position_embeddings,
    save_encoder_checkpoint,
    sinusoidal_position_grid,
    split_into_slices,
    toy_encoder_forward,
)
from .errors import (
    CheckpointError,
    ConfigError,
    CoverageError,
    FormatError,
    ShapeError,
    TrainingDiverged,
    UnsupportedDtypeError,
)
from .inference import (
    WindowGrid,
    argmax_segmentation,
    compute_window_grid,
    gaussian_importance_map,
    sliding_window_predict,
)
from .losses import (
    LossConfig,
    LossTerms,
    combined_loss,
    cross_entropy_loss,
    deep_supervision_loss,
    deep_supervision_weights,
    soft_dice_loss,
)
from .metrics import (
    CaseMetrics,
    ClassMetrics,
    dice_coefficient,
    evaluate_volume,
    extract_boundary,
    hd95,
    hd95_bruteforce,
    summarize_cases,
    write_metrics_csv,
    write_metrics_json,
)
from .nifti import (
    read_nifti,
    read_nifti_labels,
    read_nifti_spacing,
    write_nifti,
    write_nifti_labels,
)
from .rvf import read_tensor_dir, rvf_read, rvf_write, write_tensor_dir
from .toydata import generate_toy_dataset
from .training import (
    GradientCheckReport,
    TrainConfig,
    TrainResult,
    audit_model_gradients,
    finite_difference_gradient_check,
    load_checkpoint,
    no_decay_parameter_names,
    poly_learning_rate,
    run_training,
    save_checkpoint,
    set_smooth_operating_point,
    sgd_update,
)
from .volume_io import (
    AugmentConfig,
    CaseEntry,
    DatasetManifest,
    LabelVolume,
    Volume,
    apply_augmentations,
    downsample_label_volume,
    load_manifest,
    mirror_axes,
    normalize_intensity,
    pad_to_size,
    sample_training_patch,
    save_manifest,
)

__version__ = "0.1.0"
