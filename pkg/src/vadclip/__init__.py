"""Dual-branch weakly supervised video anomaly detection over precomputed
frame features, with coarse (frame scoring) and fine-grained (class-labelled
segment) outputs."""

from .adapter import AdapterConfig, LGTAdapter, build_adjacency
from .data import (
    DetectionSegment, FeatureSequence, LabelVocabulary, SyntheticSpec, VideoAnnotation, VideoDataset,
    generate_synthetic_dataset, read_feature_file, write_feature_file,
)
from .losses import LossConfig
from .metrics import EvaluationReport
from .model import ModelConfig, ModelOutput, VadCLIP
from .training import RunConfig, evaluate, gradcheck, train

__version__ = "0.1.0"
