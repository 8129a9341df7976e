"""Volumetric rendering of color, depth, and features along rays.

Quadrature follows the standard emission-absorption model: with
s_k = sigma_k * delta_k, transmittance T_k = exp(-sum_{j<k} s_j) and
weight w_k = T_k * (1 - exp(-s_k)). Color composites over the scene
background; features get no background term; depth is the
opacity-normalized expected termination distance along the ray.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .field import FieldParams, query_batch
from .geometry import Camera, intersect_aabb, pixel_directions

DEPTH_EPS = 1e-8


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray  # unit norm
    near: float
    far: float
    pixel: Optional[tuple] = None  # (frame index, row, col) provenance

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.direction = np.asarray(self.direction, dtype=np.float64)
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-9:
            raise ValueError("ray direction must be unit norm")
        if not (0 <= self.near < self.far):
            raise ValueError("require 0 <= near < far")


@dataclass
class RenderedRay:
    color_hat: np.ndarray
    depth_hat: float
    feature_hat: np.ndarray
    weights: np.ndarray
    opacity: float


def generate_rays(camera: Camera, pixels, near: float = 0.05,
                  far: float = 100.0, frame_index: int = 0) -> list:
    """Pinhole rays through the given (row, col) pixel centers."""
    pixels = np.asarray(pixels)
    rows = pixels[:, 0]
    cols = pixels[:, 1]
    if (np.any(rows < 0) or np.any(rows >= camera.height)
            or np.any(cols < 0) or np.any(cols >= camera.width)):
        raise ValueError("pixel outside image bounds")
    dirs = pixel_directions(camera, rows, cols)
    return [Ray(origin=camera.position.copy(), direction=d, near=near,
                far=far, pixel=(frame_index, int(r), int(c)))
            for d, r, c in zip(dirs, rows, cols)]


def sample_segments(near: np.ndarray, far: np.ndarray, n_samples: int,
                    stratified: bool, rng=None):
    """Batched bin sampling over per-ray [near, far] intervals.

    Returns (t, delta), each (R, n_samples). Bins are uniform; stratified
    draws one uniform sample per bin, otherwise bin centers are used.
    delta_k = t_{k+1} - t_k with the final delta equal to the bin width,
    so deltas always sum to far - near.
    """
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    near = np.atleast_1d(np.asarray(near, dtype=np.float64))
    far = np.atleast_1d(np.asarray(far, dtype=np.float64))
    n_rays = len(near)
    width = (far - near)[:, None] / n_samples
    edges = near[:, None] + width * np.arange(n_samples)[None, :]
    if stratified:
        if rng is None:
            rng = np.random.default_rng(0)
        frac = rng.uniform(size=(n_rays, n_samples))
    else:
        frac = 0.5
    t = edges + frac * width
    delta = np.empty_like(t)
    delta[:, :-1] = t[:, 1:] - t[:, :-1]
    delta[:, -1] = width[:, 0]
    return t, delta


def sample_along_ray(ray: Ray, n_samples: int, stratified: bool = False,
                     seed: int = 0):
    """Single-ray wrapper around sample_segments; returns (t, delta)."""
    rng = np.random.default_rng(seed)
    t, delta = sample_segments(np.array([ray.near]), np.array([ray.far]),
                               n_samples, stratified, rng)
    return t[0], delta[0]


def composite_batch(sigma: np.ndarray, color: np.ndarray,
                    feature: np.ndarray, t: np.ndarray, delta: np.ndarray,
                    background: np.ndarray):
    """Emission-absorption quadrature over (R, K) sample batches.

    Returns a dict with color_hat (R, 3), depth_hat (R,), feature_hat
    (R, D), weights (R, K), opacity (R,) plus cached terms reused by
    composite_backward.
    """
    s = sigma * delta
    cum = np.cumsum(s, axis=1)
    transmittance = np.exp(-(cum - s))          # T_k, exclusive prefix
    absorb = np.exp(-s)
    weights = transmittance * (1.0 - absorb)
    opacity = weights.sum(axis=1)

    color_hat = np.einsum("rk,rkc->rc", weights, color)
    color_hat += (1.0 - opacity)[:, None] * background[None, :]
    feature_hat = np.einsum("rk,rkd->rd", weights, feature)
    denom = np.maximum(opacity, DEPTH_EPS)
    depth_hat = np.einsum("rk,rk->r", weights, t) / denom

    return {
        "color_hat": color_hat,
        "depth_hat": depth_hat,
        "feature_hat": feature_hat,
        "weights": weights,
        "opacity": opacity,
        "transmittance": transmittance,
        "absorb": absorb,
        "t": t,
        "delta": delta,
        "color": color,
        "feature": feature,
        "background": background,
    }


def composite_backward(out: dict, d_color: np.ndarray, d_depth: np.ndarray,
                       d_feature: np.ndarray,
                       feature_to_weights: bool = False):
    """Gradients of the composite outputs w.r.t. per-sample inputs.

    Args:
        out: the dict returned by composite_batch.
        d_color: (R, 3) upstream gradient on color_hat.
        d_depth: (R,) upstream gradient on depth_hat.
        d_feature: (R, D) upstream gradient on feature_hat.
        feature_to_weights: when False (the default) the feature branch
            does not propagate into the weights, severing its path to the
            density grid.

    Returns:
        (d_sigma (R, K), d_color_samples (R, K, 3), d_feature_samples
        (R, K, D)).
    """
    weights = out["weights"]
    opacity = out["opacity"]
    t = out["t"]
    delta = out["delta"]

    # Gradient w.r.t. each weight w_k.
    g = np.einsum("rc,rkc->rk", d_color, out["color"])
    g -= np.einsum("rc,c->r", d_color, out["background"])[:, None]
    if feature_to_weights:
        g += np.einsum("rd,rkd->rk", d_feature, out["feature"])

    denom = np.maximum(opacity, DEPTH_EPS)
    live = opacity > DEPTH_EPS
    d_depth_w = np.where(
        live[:, None],
        (t - out["depth_hat"][:, None]) / denom[:, None],
        t / DEPTH_EPS,
    )
    g += d_depth[:, None] * d_depth_w

    # d w_k / d s_k = T_k e_k ; d w_k / d s_j = -w_k for j < k.
    gw = g * weights
    suffix = np.cumsum(gw[:, ::-1], axis=1)[:, ::-1]       # sum_{k>=j}
    d_s = out["transmittance"] * out["absorb"] * g - (suffix - gw)
    d_sigma = d_s * delta

    d_color_samples = weights[:, :, None] * d_color[:, None, :]
    d_feature_samples = weights[:, :, None] * d_feature[:, None, :]
    return d_sigma, d_color_samples, d_feature_samples


def composite(field_outputs, samples, background) -> RenderedRay:
    """Single-ray compositing.

    Args:
        field_outputs: (sigma (K,), color (K, 3), feature (K, D)).
        samples: (t (K,), delta (K,)).
        background: RGB background color.
    """
    sigma, color, feature = field_outputs
    t, delta = samples
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma < 0):
        raise ValueError("sigma must be nonnegative")
    if np.any(np.asarray(delta) <= 0):
        raise ValueError("delta must be positive")
    out = composite_batch(sigma[None], np.asarray(color)[None],
                          np.asarray(feature)[None], np.asarray(t)[None],
                          np.asarray(delta)[None],
                          np.asarray(background, dtype=np.float64))
    return RenderedRay(
        color_hat=out["color_hat"][0],
        depth_hat=float(out["depth_hat"][0]),
        feature_hat=out["feature_hat"][0],
        weights=out["weights"][0],
        opacity=float(out["opacity"][0]),
    )


def clip_rays_to_bbox(origins: np.ndarray, dirs: np.ndarray, bbox_min,
                      bbox_max, near_min: float = 1e-3):
    """Per-ray [near, far] from the bbox intersection.

    Returns (near, far, valid); rays that miss the box get valid=False.
    """
    t_near, t_far = intersect_aabb(origins, dirs, bbox_min, bbox_max)
    near = np.maximum(t_near, near_min)
    valid = t_far > near
    far = np.maximum(t_far, near + 1e-6)
    return near, far, valid


def render_image(params: FieldParams, camera: Camera, n_samples: int = 128,
                 chunk: int = 8192):
    """Render color/depth/feature/opacity planes for a full camera view.

    Deterministic (bin-center sampling). Rays that miss the field bbox
    composite to pure background.
    """
    h, w = camera.height, camera.width
    rows, cols = np.mgrid[0:h, 0:w]
    rows = rows.ravel().astype(np.float64)
    cols = cols.ravel().astype(np.float64)
    dirs = pixel_directions(camera, rows, cols)
    origin = camera.position

    n_px = h * w
    d = params.feature_dim
    color_plane = np.tile(params.background_color, (n_px, 1))
    depth_plane = np.zeros(n_px)
    feature_plane = np.zeros((n_px, d))
    opacity_plane = np.zeros(n_px)

    for start in range(0, n_px, chunk):
        sl = slice(start, min(start + chunk, n_px))
        cd = dirs[sl]
        near, far, valid = clip_rays_to_bbox(
            np.broadcast_to(origin, cd.shape), cd,
            params.bbox_min, params.bbox_max)
        if not np.any(valid):
            continue
        cd = cd[valid]
        t, delta = sample_segments(near[valid], far[valid], n_samples,
                                   stratified=False)
        pts = origin[None, None, :] + t[:, :, None] * cd[:, None, :]
        r, k = t.shape
        sigma, color, feature = query_batch(params, pts.reshape(-1, 3))
        out = composite_batch(sigma.reshape(r, k),
                              color.reshape(r, k, 3),
                              feature.reshape(r, k, d),
                              t, delta, params.background_color)
        idx = np.arange(sl.start, sl.stop)[valid]
        color_plane[idx] = out["color_hat"]
        depth_plane[idx] = out["depth_hat"]
        feature_plane[idx] = out["feature_hat"]
        opacity_plane[idx] = out["opacity"]

    return {
        "color": color_plane.reshape(h, w, 3),
        "depth": depth_plane.reshape(h, w),
        "feature": feature_plane.reshape(h, w, d),
        "opacity": opacity_plane.reshape(h, w),
    }
