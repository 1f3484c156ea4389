"""Lumbar vertebra panoptic segmentation pipeline."""

from .dataio import (
    AnnotationSet,
    LabelMask,
    PhantomConfig,
    SliceStack,
    VertebraAnnotation,
    VertebraLabel,
    generate_phantom,
    load_annotations,
    load_slice_stack,
    read_mask,
    write_mask,
)
from .errors import ConfigError, DataError, DivergenceError, SpineSegError
from .maskgen import (
    VertebraGeometry,
    derive_geometry,
    fill_annotation_gaps,
    interpolate_centroids,
    paint_mask,
    trace_vertebra_pixels,
)
from .net import AttentionUNet, ModelConfig, build_model, load_checkpoint, save_checkpoint
from .preprocess import PreprocessConfig, denoise, resize_and_normalize, resize_mask
from .train import TrainConfig, TrainHistory, combined_loss, instance_loss, semantic_loss, train
from .volume import Volume3D, extract_sagittal_slices, reconstruct_volume

__version__ = "0.1.0"
