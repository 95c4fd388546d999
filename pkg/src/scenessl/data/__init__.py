"""Manifest-driven dataset layer."""

from .images import CorruptImageError, load_image, load_images, read_listing, save_png
from .manifest import COLUMNS, SPLITS, ManifestRow, SampleManifest, remap_manifest
from .remap import PLACES8_CLASSES, PLACES8_SOURCES, RemapTable, build_remap_table, normalize_category
from .sources import OOD_SOURCES, PRETEXT_SOURCE_ORDER, compose_pretext, make_ood_manifest, source_report
from .splits import FoldPlan, largest_remainder, make_folds, stratified_split
from .toy import (
    OBJECT_SHAPES,
    ToyDataset,
    ToySceneSpec,
    generate_toy_objects,
    generate_toy_scenes,
    nearest_centroid_accuracy,
)

__all__ = [
    "COLUMNS", "CorruptImageError", "FoldPlan", "ManifestRow", "OBJECT_SHAPES", "OOD_SOURCES",
    "PLACES8_CLASSES", "PLACES8_SOURCES", "PRETEXT_SOURCE_ORDER", "RemapTable", "SPLITS",
    "SampleManifest", "ToyDataset", "ToySceneSpec", "build_remap_table", "compose_pretext",
    "generate_toy_objects", "generate_toy_scenes", "largest_remainder", "load_image", "load_images",
    "make_folds", "make_ood_manifest", "nearest_centroid_accuracy", "normalize_category",
    "read_listing", "remap_manifest", "save_png", "source_report", "stratified_split",
]
