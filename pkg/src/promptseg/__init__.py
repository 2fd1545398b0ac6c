"""Zero-shot semantic segmentation from vision-language relevance maps."""
from .backends import BackendDescriptor, MockBackend, PromptSet, RelevanceMap, load_backend, mock_backend
from .cluster import ClusterConfig, segment
from .config import PipelineConfig
from .evaluation import best_match_miou, run_benchmark
from .fusion import MultiClassRelevance, PseudoLabelBatch, SegmentationMask, binarize, fuse, sample
from .tta import CropGridSpec, RefinedRelevance, aggregate_crops, calibrate, make_views, refine

__version__ = "0.1.0"

__all__ = [
    "BackendDescriptor", "ClusterConfig", "CropGridSpec", "MockBackend", "MultiClassRelevance",
    "PipelineConfig", "PromptSet", "PseudoLabelBatch", "RefinedRelevance", "RelevanceMap",
    "SegmentationMask", "aggregate_crops", "best_match_miou", "binarize", "calibrate", "fuse",
    "load_backend", "make_views", "mock_backend", "refine", "run_benchmark", "sample", "segment",
]
