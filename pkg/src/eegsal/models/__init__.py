from .classifier import (BRANCHES, FUSIONS, BranchClassifier, FusionClassifier, Output,
                         build_classifier, parse_models)
from .cnn import CNN, CapsNet, dynamic_routing
from .fusion import DomainHead, FusionHead, domain_forward, feature_fusion, lambda_schedule, output_fusion
from .hrnn import HRNN, saliency
from .layers import BatchNorm, Conv, Dense, GroupedGRU, Module

__all__ = [
    "BRANCHES", "FUSIONS", "BranchClassifier", "FusionClassifier", "Output", "build_classifier",
    "parse_models", "CNN", "CapsNet", "dynamic_routing", "DomainHead", "FusionHead", "domain_forward",
    "feature_fusion", "lambda_schedule", "output_fusion", "HRNN", "saliency", "BatchNorm", "Conv",
    "Dense", "GroupedGRU", "Module",
]
