"""Unsupervised rigid point-cloud registration with anchor-guided pseudo-label mining."""

from .compat import RansacEstimator, SC2Estimator, sc2_filter
from .correspondences import CorrespondenceSet, Label
from .features import FeatureField, ProjectionHead, extract_descriptors, match_features, project
from .fgcm import AnchorPair, PseudoLabel, feature_geometry_clustering, mine_pseudo_labels, run_mining
from .geometry import (
    DistanceBin,
    PointCloud,
    RigidTransform,
    SyntheticPairSpec,
    kabsch,
    make_synthetic_pair,
    voxel_downsample,
)
from .metrics import inlier_ratio, registration_recall, rre, rte

__version__ = "0.1.0"

__all__ = [
    "AnchorPair", "CorrespondenceSet", "DistanceBin", "FeatureField", "Label", "PointCloud",
    "ProjectionHead", "PseudoLabel", "RansacEstimator", "RigidTransform", "SC2Estimator",
    "SyntheticPairSpec", "extract_descriptors", "feature_geometry_clustering", "inlier_ratio",
    "kabsch", "make_synthetic_pair", "match_features", "mine_pseudo_labels", "project",
    "registration_recall", "rre", "rte", "run_mining", "sc2_filter", "voxel_downsample",
]
