from .labels import Label, LABEL_PALETTE, SEMANTIC_LABELS
from .exceptions import (
    SemanticMapError,
    ValidationError,
    ParameterError,
    SequencingError,
    FormatError,
    DataError,
    ConfigurationError,
    DegenerateEvidenceError,
)
from .geometry_map import Pose, PointCloud, VoxelKey, OccupancyMap
from .semantic_fusion import CameraModel, SegmentationFrame, SemanticVoxelMap
from .refinement import RefineParams, refine
from .evaluation import ConfusionMatrix, MetricsReport, evaluate
from .frames import FrameData, FrameSource, InMemoryFrameSource

__all__ = [
    'Label',
    'LABEL_PALETTE',
    'SEMANTIC_LABELS',
    'SemanticMapError',
    'ValidationError',
    'ParameterError',
    'SequencingError',
    'FormatError',
    'DataError',
    'ConfigurationError',
    'DegenerateEvidenceError',
    'Pose',
    'PointCloud',
    'VoxelKey',
    'OccupancyMap',
    'CameraModel',
    'SegmentationFrame',
    'SemanticVoxelMap',
    'RefineParams',
    'refine',
    'ConfusionMatrix',
    'MetricsReport',
    'evaluate',
    'FrameData',
    'FrameSource',
    'InMemoryFrameSource',
]
