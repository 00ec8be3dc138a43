"""Hash-based sublinear retrieval of binary view descriptors.

Descriptors are one-hot quantized orientation grids; hash keys are learned
bit selections (RBS, PBS, TBS, TBV) that index per-scale tables queried by a
sliding-window detector.
"""

from hashview.descriptor import (
    BinaryDescriptor,
    DescriptorSet,
    QuantizedViewGrid,
    binarize,
    similarity,
    spread,
)
from hashview.errors import InvalidInputError, InvariantViolation
from hashview.index import BucketStats, HashTable, ScaleIndex, bucket_stats, build_table, retrieve
from hashview.keyselect import HashKey, ProximityConfig, Strategy, key_length, learn_key
from hashview.pipeline import (
    DetectionResult,
    RunMetrics,
    calibrate_thresholds,
    detect,
    exhaustive_detect,
    matching_ratio,
    slide_and_detect,
)
from hashview.synth import SceneInstance, ViewDatabase, compose_scene, synthetic_database

__version__ = "0.1.0"

__all__ = [
    "BinaryDescriptor",
    "BucketStats",
    "DescriptorSet",
    "DetectionResult",
    "HashKey",
    "HashTable",
    "InvalidInputError",
    "InvariantViolation",
    "ProximityConfig",
    "QuantizedViewGrid",
    "RunMetrics",
    "ScaleIndex",
    "SceneInstance",
    "Strategy",
    "ViewDatabase",
    "binarize",
    "bucket_stats",
    "build_table",
    "calibrate_thresholds",
    "compose_scene",
    "detect",
    "exhaustive_detect",
    "key_length",
    "learn_key",
    "matching_ratio",
    "retrieve",
    "similarity",
    "slide_and_detect",
    "spread",
    "synthetic_database",
]
