"""Dataset ingestion, cleaning, splitting, rebalancing, augmentation and synthesis."""

from .samples import (
    DatasetError,
    ImageSample,
    load_dataset,
    quantize,
    read_image,
    read_mask,
    write_dataset,
    write_png,
)
from .sampling import (
    HAM_CATEGORIES,
    Removal,
    SplitSpec,
    dedup_clean,
    filter_melanoma_task,
    rebalance,
    stratified_sample,
    stratified_split,
)
from .synth import synth_generate
from .transforms import (
    AugmentConfig,
    AugmentParams,
    apply_augment,
    augment,
    augment_stream,
    resize_bilinear,
    resize_normalize,
    sample_augment_params,
    warp,
)

__all__ = [
    "AugmentConfig", "AugmentParams", "DatasetError", "HAM_CATEGORIES", "ImageSample", "Removal", "SplitSpec",
    "apply_augment", "augment", "augment_stream", "dedup_clean", "filter_melanoma_task", "load_dataset",
    "quantize", "read_image", "read_mask", "rebalance", "resize_bilinear", "resize_normalize",
    "sample_augment_params", "stratified_sample", "stratified_split", "synth_generate", "warp", "write_dataset", "write_png",
]
