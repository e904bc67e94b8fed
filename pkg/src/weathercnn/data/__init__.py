"""Synthetic event fields, patch extraction and the CPDS dataset container."""

from .dataset import (PatchDataset, apply_stats, build_synthetic_dataset, channel_stats,
                      normalize, split, threshold_baseline)
from .fields import FieldStack, synth_event_field
from .io import (channel_to_ppm, dataset_from_bytes, dataset_to_bytes, export_ppm,
                 read_dataset, write_dataset)
from .patches import BoundingBox, PatchRecord, Provenance, extract_patch

__all__ = [
    "BoundingBox", "FieldStack", "PatchDataset", "PatchRecord", "Provenance",
    "apply_stats", "build_synthetic_dataset", "channel_stats", "channel_to_ppm",
    "dataset_from_bytes", "dataset_to_bytes", "export_ppm", "extract_patch",
    "normalize", "read_dataset", "split", "synth_event_field", "threshold_baseline",
    "write_dataset",
]
