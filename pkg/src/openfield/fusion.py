"""Multi-view feature fusion onto a point cloud with streaming statistics.

Each cloud point accumulates the 2D features of every frame in which it
is visible (pinhole projection plus a depth-consistency test against the
frame's depth image). Mean and covariance are maintained in one pass
with Welford updates; the scalar uncertainty is the generalized variance
det(Sigma), kept in log space because determinants of high-dimensional
covariances under/overflow float64.
"""

import math
from dataclasses import dataclass, field as dc_field
from typing import Optional

import numpy as np

from .geometry import Camera, project_points

# Sentinel for points observed fewer than twice: maximally uncertain.
LOG_U_MAX = math.inf


@dataclass
class PointStats:
    """Streaming first/second moments of one point's observed features."""

    dim: int
    count: int = 0
    mean: np.ndarray = None
    m2: np.ndarray = None
    log_uncertainty: float = LOG_U_MAX
    underobserved: bool = True

    def __post_init__(self):
        if self.mean is None:
            self.mean = np.zeros(self.dim)
        if self.m2 is None:
            self.m2 = np.zeros((self.dim, self.dim))

    @property
    def uncertainty(self) -> float:
        """Generalized variance det(Sigma); 0 when log_uncertainty = -inf."""
        if self.log_uncertainty == -math.inf:
            return 0.0
        return math.exp(self.log_uncertainty)


@dataclass
class ErrorDiagnostic:
    errors: np.ndarray          # per-point Euclidean error
    gt_embeddings: np.ndarray
    pearson_r: float
    spearman_r: float
    n_valid: int


def welford_update(stats: PointStats, x: np.ndarray) -> PointStats:
    """Single-observation update of mean and co-moment matrix (in place)."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("observation contains NaN/Inf")
    stats.count += 1
    delta = x - stats.mean
    stats.mean += delta / stats.count
    delta2 = x - stats.mean
    stats.m2 += np.outer(delta, delta2)
    return stats


def finalize(stats: PointStats, estimator: str = "population"):
    """Covariance and generalized variance from accumulated moments.

    Returns (Sigma, u). With fewer than two observations the point is
    flagged underobserved and u is the +inf sentinel (maximal priority
    for view selection). Sigma is symmetrized and u is computed from
    eigenvalues clamped at zero, so u >= 0 always.
    """
    if estimator not in ("population", "sample"):
        raise ValueError(f"unknown estimator {estimator!r}")
    if stats.count < 2:
        stats.log_uncertainty = LOG_U_MAX
        stats.underobserved = True
        return np.zeros_like(stats.m2), math.inf

    n = stats.count if estimator == "population" else stats.count - 1
    cov = stats.m2 / n
    cov = (cov + cov.T) / 2.0
    eigvals = np.linalg.eigvalsh(cov)
    eigvals = np.maximum(eigvals, 0.0)
    if np.any(eigvals == 0.0):
        log_u = -math.inf
    else:
        log_u = float(np.sum(np.log(eigvals)))
    stats.log_uncertainty = log_u
    stats.underobserved = False
    u = 0.0 if log_u == -math.inf else math.exp(log_u)
    return cov, u


def project_point(p, frame, depth_tolerance: float):
    """Visibility of one world point in one frame.

    Returns (row, col) when the point projects inside the image, in front
    of the camera, and its z-depth agrees with the frame's depth image
    within depth_tolerance. Returns the strings "out_of_view" or
    "occluded" otherwise.
    """
    rows, cols, status = project_points_visible(
        np.asarray(p, dtype=np.float64)[None], frame, depth_tolerance)
    if status[0] == 0:
        return int(rows[0]), int(cols[0])
    return "occluded" if status[0] == 2 else "out_of_view"


def project_points_visible(points: np.ndarray, frame,
                           depth_tolerance: float):
    """Vectorized visibility test against a frame's depth plane.

    Returns (rows, cols, status) with status 0 = visible, 1 = out of
    view, 2 = occluded (depth mismatch).
    """
    cam: Camera = frame.camera
    u, v, z = project_points(cam, points)
    rows = np.rint(v).astype(np.int64)
    cols = np.rint(u).astype(np.int64)
    status = np.ones(len(points), dtype=np.int64)

    in_view = ((z > 0) & (rows >= 0) & (rows < cam.height)
               & (cols >= 0) & (cols < cam.width))
    rows_c = np.clip(rows, 0, cam.height - 1)
    cols_c = np.clip(cols, 0, cam.width - 1)
    depth_img = frame.depth[rows_c, cols_c]
    consistent = np.abs(z - depth_img) <= depth_tolerance
    status[in_view & consistent] = 0
    status[in_view & ~consistent] = 2
    return rows_c, cols_c, status


def fuse(cloud, frames: list, depth_tolerance: float,
         estimator: str = "population") -> list:
    """Per-point streaming statistics over all frames.

    Every frame must carry depth and features. The per-point update order
    is the given frame order, so results are reproducible; points visible
    in fewer than two frames keep the sentinel uncertainty.
    """
    for fr in frames:
        if fr.features is None:
            raise ValueError("fuse requires feature maps on every frame")

    n = len(cloud)
    dim = frames[0].features.dim if frames else 0
    count = np.zeros(n, dtype=np.int64)
    mean = np.zeros((n, dim))
    m2 = np.zeros((n, dim, dim))

    for fr in frames:
        rows, cols, status = project_points_visible(cloud.positions, fr,
                                                    depth_tolerance)
        vis = status == 0
        if not np.any(vis):
            continue
        x = fr.features.data[rows[vis], cols[vis]].astype(np.float64)
        count[vis] += 1
        delta = x - mean[vis]
        mean[vis] += delta / count[vis, None]
        delta2 = x - mean[vis]
        m2[vis] += np.einsum("ni,nj->nij", delta, delta2)

    stats_list = []
    for i in range(n):
        st = PointStats(dim=dim, count=int(count[i]), mean=mean[i],
                        m2=m2[i])
        finalize(st, estimator)
        stats_list.append(st)
    return stats_list


def pearson(x: np.ndarray, y: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    xc = x - x.mean()
    yc = y - y.mean()
    denom = math.sqrt(float(np.sum(xc * xc)) * float(np.sum(yc * yc)))
    if denom == 0.0:
        raise ValueError("correlation undefined for constant input")
    return float(np.sum(xc * yc) / denom)


def spearman(x: np.ndarray, y: np.ndarray) -> float:
    def ranks(a):
        order = np.argsort(a, kind="stable")
        r = np.empty(len(a))
        r[order] = np.arange(len(a))
        return r

    return pearson(ranks(np.asarray(x)), ranks(np.asarray(y)))


def error_and_correlation(stats_list: list, cloud, codebook
                          ) -> ErrorDiagnostic:
    """Per-point error against ground-truth embeddings plus correlation.

    The error is the Euclidean distance between each point's class
    embedding and its fused mean feature. Correlations are computed over
    points with at least two observations, pairing the error with the
    generalized variance.
    """
    gt = codebook.lookup(cloud.class_ids)
    means = np.array([st.mean for st in stats_list])
    errors = np.linalg.norm(gt - means, axis=1)

    valid = np.array([st.count >= 2 for st in stats_list])
    if valid.sum() < 2:
        raise ValueError("correlation needs at least two observed points")
    log_u = np.array([st.log_uncertainty for st in stats_list])
    # exp of very negative log-determinants flushes to zero, which is the
    # correct limit for the linear-scale correlation.
    with np.errstate(over="ignore"):
        u = np.exp(log_u[valid])
    u = np.where(np.isfinite(u), u, np.nanmax(u[np.isfinite(u)]) if
                 np.any(np.isfinite(u)) else 0.0)
    return ErrorDiagnostic(
        errors=errors,
        gt_embeddings=gt,
        pearson_r=pearson(u, errors[valid]),
        spearman_r=spearman(u, errors[valid]),
        n_valid=int(valid.sum()),
    )
