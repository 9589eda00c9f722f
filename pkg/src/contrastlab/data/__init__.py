"""Synthetic domains, augmentations, corruptions and few-shot episodes."""

from .augment import AugmentationPolicy, augment, augment_batch, blur3x3
from .corrupt import CORRUPTION_TYPES, SEVERITY_TABLES, CorruptionSpec, corrupt, corrupt_images, identity_table
from .domains import (
    SHAPES,
    Dataset,
    DomainSpec,
    far_brightness_domain,
    far_texture_domain,
    generate_domain,
    near_domain,
    source_domain,
)
from .episodes import Episode, EpisodeSpec, sample_dataset_episode, sample_episode
from .io import export_dataset, read_array_file, read_manifest, write_array_file

__all__ = [
    "AugmentationPolicy",
    "CORRUPTION_TYPES",
    "CorruptionSpec",
    "Dataset",
    "DomainSpec",
    "Episode",
    "EpisodeSpec",
    "SEVERITY_TABLES",
    "SHAPES",
    "augment",
    "augment_batch",
    "blur3x3",
    "corrupt",
    "corrupt_images",
    "export_dataset",
    "far_brightness_domain",
    "far_texture_domain",
    "generate_domain",
    "identity_table",
    "near_domain",
    "read_array_file",
    "read_manifest",
    "sample_dataset_episode",
    "sample_episode",
    "source_domain",
    "write_array_file",
]
