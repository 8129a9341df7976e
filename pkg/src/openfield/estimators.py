"""Scikit-learn style estimator facade over the functional core.

OpenSetFieldEstimator.fit consumes posed frames and trains the field;
transform returns embeddings sampled at 3D positions and predict returns
query-set class indices. MultiViewFusion.fit accumulates per-point
multi-view statistics. Both follow the get_params/set_params contract so
they compose with standard model-selection tooling without importing it.
"""

import inspect

import numpy as np

from . import train as train_mod
from .evaluation import QuerySet, assign_labels, score, segment_sample
from .field import FieldConfig, init_params, query_batch
from .fusion import fuse
from .train import TrainConfig


def check_positions(X) -> np.ndarray:
    """Validate an (N, 3) array of finite world positions."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != 3:
        raise ValueError(f"expected (n_points, 3) positions, got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("positions contain NaN/Inf")
    return X


def check_frames(frames, require_features: bool = False,
                 require_depth: bool = False):
    """Validate a non-empty list of PosedFrame inputs."""
    if not frames:
        raise ValueError("expected a non-empty list of posed frames")
    for i, fr in enumerate(frames):
        if not hasattr(fr, "camera") or not hasattr(fr, "rgb"):
            raise TypeError(f"frames[{i}] is not a PosedFrame")
        if require_features and fr.features is None:
            raise ValueError(f"frames[{i}] is missing a feature map")
        if require_depth and not np.any(fr.depth > 0):
            raise ValueError(f"frames[{i}] has no depth returns")
    return frames


class BaseEstimator:
    """Minimal get_params/set_params implementation.

    Subclass __init__ signatures define the parameter set, mirroring the
    scikit-learn convention that constructors only store arguments.
    """

    @classmethod
    def _param_names(cls):
        sig = inspect.signature(cls.__init__)
        return [p.name for p in sig.parameters.values()
                if p.name != "self" and p.kind != p.VAR_KEYWORD]

    def get_params(self, deep: bool = True) -> dict:
        return {name: getattr(self, name) for name in self._param_names()}

    def set_params(self, **params):
        valid = set(self._param_names())
        for key, value in params.items():
            if key not in valid:
                raise ValueError(
                    f"invalid parameter {key!r} for {type(self).__name__}")
            setattr(self, key, value)
        return self

    def __repr__(self):
        args = ", ".join(f"{k}={v!r}" for k, v in self.get_params().items())
        return f"{type(self).__name__}({args})"

    def _check_fitted(self, attr: str):
        if not hasattr(self, attr):
            raise RuntimeError(
                f"{type(self).__name__} instance is not fitted yet; "
                "call fit first")


class OpenSetFieldEstimator(BaseEstimator):
    """Fits the radiance-plus-feature field to posed frames.

    Parameters mirror the field and optimizer configuration; `queries`
    (a QuerySet) enables predict/score. After fit the trained lattices
    are available as `params_` and the loss log as `log_`.
    """

    def __init__(self, bbox_min=(0.0, 0.0, 0.0), bbox_max=(1.0, 1.0, 1.0),
                 density_resolution=(32, 32, 32),
                 feature_resolution=(24, 24, 24), feature_dim=16,
                 background_color=(0.0, 0.0, 0.0), iterations=1500,
                 batch_rays=1024, n_samples=128, learning_rate=1e-2,
                 lambda_open=1.0, lambda_depth=0.1, huber_beta=0.1,
                 border_margin=10, queries=None, random_state=0):
        self.bbox_min = bbox_min
        self.bbox_max = bbox_max
        self.density_resolution = density_resolution
        self.feature_resolution = feature_resolution
        self.feature_dim = feature_dim
        self.background_color = background_color
        self.iterations = iterations
        self.batch_rays = batch_rays
        self.n_samples = n_samples
        self.learning_rate = learning_rate
        self.lambda_open = lambda_open
        self.lambda_depth = lambda_depth
        self.huber_beta = huber_beta
        self.border_margin = border_margin
        self.queries = queries
        self.random_state = random_state

    def _field_config(self) -> FieldConfig:
        return FieldConfig(
            bbox_min=np.asarray(self.bbox_min, dtype=np.float64),
            bbox_max=np.asarray(self.bbox_max, dtype=np.float64),
            density_resolution=tuple(self.density_resolution),
            feature_resolution=tuple(self.feature_resolution),
            feature_dim=self.feature_dim,
            background_color=np.asarray(self.background_color,
                                        dtype=np.float64),
        )

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            lambda_open=self.lambda_open, lambda_depth=self.lambda_depth,
            border_margin=self.border_margin, batch_rays=self.batch_rays,
            iterations=self.iterations, learning_rate=self.learning_rate,
            huber_beta=self.huber_beta, n_samples=self.n_samples,
            seed=self.random_state)

    def fit(self, X, y=None):
        """Train the field on a list of PosedFrame inputs."""
        frames = check_frames(X)
        params = init_params(self._field_config(), seed=self.random_state)
        self.params_, self.log_ = train_mod.train(params, frames,
                                                  self._train_config())
        self.n_iter_ = len(self.log_)
        return self

    def transform(self, X) -> np.ndarray:
        """Field embeddings at (N, 3) positions."""
        self._check_fitted("params_")
        X = check_positions(X)
        _, _, feats = query_batch(self.params_, X)
        return feats

    def predict(self, X) -> np.ndarray:
        """Query-set class index for each (N, 3) position."""
        self._check_fitted("params_")
        if self.queries is None:
            raise ValueError("predict requires the `queries` parameter")
        predicted, _ = assign_labels(self.transform(X), self.queries)
        return predicted

    def score(self, X, y) -> float:
        """Mean IoU of predictions against ground-truth class indices."""
        result = score(self.predict(X), np.asarray(y, dtype=np.int64),
                       self.queries)
        return result.miou_all


class MultiViewFusion(BaseEstimator):
    """Accumulates per-point feature statistics across posed frames.

    fit(X, frames) projects every frame onto the (N, 3) positions X.
    Exposes count_, mean_, log_uncertainty_ arrays; transform returns the
    fused mean embedding per point.
    """

    def __init__(self, depth_tolerance=0.1, estimator="population"):
        self.depth_tolerance = depth_tolerance
        self.estimator = estimator

    def fit(self, X, frames):
        from .scenegen import LabeledPointCloud

        X = check_positions(X)
        check_frames(frames, require_features=True, require_depth=True)
        cloud = LabeledPointCloud(positions=X,
                                  class_ids=np.zeros(len(X), dtype=np.int64))
        self.stats_ = fuse(cloud, frames, self.depth_tolerance,
                           self.estimator)
        self.count_ = np.array([s.count for s in self.stats_])
        self.mean_ = np.array([s.mean for s in self.stats_])
        self.log_uncertainty_ = np.array(
            [s.log_uncertainty for s in self.stats_])
        return self

    def transform(self, X=None) -> np.ndarray:
        self._check_fitted("mean_")
        return self.mean_
