"""Moving-human detection in aerial video.

Horn-Schunck optical flow finds moving regions; each candidate patch is
then classified as human or not by a small CNN (soft-max or SVM head) or
a hierarchical extreme learning machine.
"""
from .errors import AerialDetError, ConfigError, DimensionError, FormatError, NumericError, StateError
from .imagecore import Blob, BoundingBox, iou
from .opticalflow import FlowField, HsConfig, MotionMaskConfig, horn_schunck
from .pipeline import DetectionResult, DetectorConfig, detect_moving_objects, process_video

__version__ = "0.1.0"

__all__ = [
    "AerialDetError", "ConfigError", "DimensionError", "FormatError", "NumericError", "StateError",
    "Blob", "BoundingBox", "iou", "FlowField", "HsConfig", "MotionMaskConfig", "horn_schunck",
    "DetectionResult", "DetectorConfig", "detect_moving_objects", "process_video",
]
