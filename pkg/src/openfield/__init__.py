"""Open-vocabulary 3D feature fields at desk scale.

A voxel radiance field with an extra per-point embedding channel is
fitted to posed RGB(-D) frames and per-pixel feature maps, per-point
multi-view uncertainty drives novel camera view proposals, and point
clouds are segmented by query-embedding similarity.
"""

from .estimators import MultiViewFusion, OpenSetFieldEstimator

__all__ = ["MultiViewFusion", "OpenSetFieldEstimator"]

__version__ = "0.1.0"
