"""Missing-modality segmentation with Fourier prompt tuning."""

from missfpt._core import (
    AlignmentError,
    ConfigError,
    Error,
    IntegrityError,
    IoError,
    NumericError,
    ShapeError,
    SpecError,
    __version__,
    condition_labels,
    config_hash,
    count_missing_conditions,
    default_config,
    evaluate,
    fourier_prompt_forward,
    generate_dataset,
    generate_scene,
    gradcheck,
    parameter_counts,
    real_fft,
    real_fft_matrix,
    sample_switch_masks,
    train,
)

__all__ = [
    "AlignmentError",
    "ConfigError",
    "Error",
    "IntegrityError",
    "IoError",
    "NumericError",
    "ShapeError",
    "SpecError",
    "__version__",
    "condition_labels",
    "config_hash",
    "count_missing_conditions",
    "default_config",
    "evaluate",
    "fourier_prompt_forward",
    "generate_dataset",
    "generate_scene",
    "gradcheck",
    "parameter_counts",
    "real_fft",
    "real_fft_matrix",
    "sample_switch_masks",
    "train",
]
