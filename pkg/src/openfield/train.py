"""Field optimization against posed frames.

Three objectives drive the fit: squared RGB error, Huber depth error on
rays with a valid depth return, and negative cosine similarity between
rendered and target features. The feature objective is cut off from the
compositing weights, so it can never move the density (or color) grids;
rays are never drawn within a configurable margin of the image border,
where 2D feature maps are unreliable.
"""

import math
from dataclasses import dataclass, field as dc_field
from typing import Optional

import numpy as np

from .field import (FieldParams, GradientBuffers, query_backward_batch,
                    query_batch)
from .geometry import pixel_directions, ray_depth_scale
from .render import clip_rays_to_bbox, composite_backward, composite_batch

_NORM_EPS = 1e-12


@dataclass
class TrainConfig:
    lambda_open: float = 1.0
    lambda_depth: float = 0.1
    border_margin: int = 10
    batch_rays: int = 1024
    iterations: int = 1500
    learning_rate: float = 1e-2
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    huber_beta: float = 0.1
    n_samples: int = 128
    stratified: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.batch_rays < 1 or self.iterations < 1:
            raise ValueError("batch_rays and iterations must be >= 1")
        if self.huber_beta <= 0:
            raise ValueError("huber_beta must be positive")
        if self.lambda_open < 0 or self.lambda_depth < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class RayTarget:
    color_gt: np.ndarray
    depth_gt: Optional[float] = None
    feature_gt: Optional[np.ndarray] = None


@dataclass
class LossBreakdown:
    l_rgb: float
    l_depth: float
    l_open: float
    total: float
    n_rgb: int
    n_depth: int
    n_open: int
    n_starved: int = 0


class TrainingDiverged(RuntimeError):
    """Raised when a gradient or loss turns non-finite."""


@dataclass
class PixelBatch:
    """Array view of one training batch: pixels plus per-ray targets."""

    frame_idx: np.ndarray   # (B,)
    rows: np.ndarray        # (B,)
    cols: np.ndarray        # (B,)
    origins: np.ndarray     # (B, 3)
    directions: np.ndarray  # (B, 3) unit
    color_gt: np.ndarray    # (B, 3)
    depth_gt: np.ndarray    # (B,) distance along the ray, NaN if absent
    feature_gt: Optional[np.ndarray]  # (B, D) or None
    has_feature: np.ndarray  # (B,) bool


def sample_pixel_batch(frames: list, config: TrainConfig, rng) -> PixelBatch:
    """Draw rays uniformly over (frame, row, col) outside the border margin.

    Depth targets are converted from z-depth to distance along the ray so
    they compare directly against the rendered expected termination
    distance; pixels with no depth return (0) get NaN.
    """
    if not frames:
        raise ValueError("no frames to sample from")
    m = config.border_margin
    for fr in frames:
        if fr.camera.height <= 2 * m or fr.camera.width <= 2 * m:
            raise ValueError(
                f"image {fr.camera.width}x{fr.camera.height} too small for "
                f"border margin {m}")

    b = config.batch_rays
    frame_idx = rng.integers(0, len(frames), size=b)
    heights = np.array([fr.camera.height for fr in frames])
    widths = np.array([fr.camera.width for fr in frames])
    rows = m + rng.integers(0, heights[frame_idx] - 2 * m, size=b)
    cols = m + rng.integers(0, widths[frame_idx] - 2 * m, size=b)

    origins = np.zeros((b, 3))
    directions = np.zeros((b, 3))
    color_gt = np.zeros((b, 3))
    depth_gt = np.full(b, np.nan)
    feat_dim = None
    for fr in frames:
        if fr.features is not None:
            feat_dim = fr.features.dim
            break
    feature_gt = (np.zeros((b, feat_dim)) if feat_dim is not None else None)
    has_feature = np.zeros(b, dtype=bool)

    for i, fr in enumerate(frames):
        mask = frame_idx == i
        if not np.any(mask):
            continue
        rr, cc = rows[mask], cols[mask]
        origins[mask] = fr.camera.position
        directions[mask] = pixel_directions(fr.camera, rr, cc)
        color_gt[mask] = fr.rgb[rr, cc]
        z = fr.depth[rr, cc]
        scale = ray_depth_scale(fr.camera, rr, cc)
        depth_gt[mask] = np.where(z > 0, z * scale, np.nan)
        if fr.features is not None:
            feature_gt[mask] = fr.features.data[rr, cc]
            has_feature[mask] = True

    return PixelBatch(frame_idx=frame_idx, rows=rows, cols=cols,
                      origins=origins, directions=directions,
                      color_gt=color_gt, depth_gt=depth_gt,
                      feature_gt=feature_gt, has_feature=has_feature)


def sample_ray_batch(frames: list, config: TrainConfig, rng):
    """Spec-level sampler: list of (Ray, RayTarget) pairs."""
    from .render import Ray

    batch = sample_pixel_batch(frames, config, rng)
    out = []
    for i in range(len(batch.rows)):
        ray = Ray(origin=batch.origins[i], direction=batch.directions[i],
                  near=1e-3, far=1e6,
                  pixel=(int(batch.frame_idx[i]), int(batch.rows[i]),
                         int(batch.cols[i])))
        target = RayTarget(
            color_gt=batch.color_gt[i],
            depth_gt=(None if math.isnan(batch.depth_gt[i])
                      else float(batch.depth_gt[i])),
            feature_gt=(batch.feature_gt[i] if batch.has_feature[i]
                        else None),
        )
        out.append((ray, target))
    return out


def huber(e: np.ndarray, beta: float) -> np.ndarray:
    e = np.abs(e)
    return np.where(e <= beta, 0.5 * e * e / beta, e - 0.5 * beta)


def huber_grad(e: np.ndarray, beta: float) -> np.ndarray:
    return np.where(np.abs(e) <= beta, e / beta, np.sign(e))


def loss_rgb(color_gt: np.ndarray, color_hat: np.ndarray) -> float:
    """Mean squared color error over the batch."""
    return float(np.mean(np.sum((color_gt - color_hat) ** 2, axis=1)))


def loss_depth(depth_gt: np.ndarray, depth_hat: np.ndarray,
               beta: float) -> float:
    """Mean Huber depth error over rays with a depth target (NaN = absent)."""
    mask = ~np.isnan(depth_gt)
    if not np.any(mask):
        return 0.0
    return float(np.mean(huber(depth_gt[mask] - depth_hat[mask], beta)))


def loss_open(feature_gt: np.ndarray, feature_hat: np.ndarray,
              mask: Optional[np.ndarray] = None):
    """Mean negative cosine similarity over rays with a feature target.

    Rays whose target or rendered feature has near-zero norm contribute 0
    and are reported as starved.
    """
    if mask is None:
        mask = np.ones(len(feature_gt), dtype=bool)
    n = int(mask.sum())
    if n == 0:
        return 0.0, 0
    gt = feature_gt[mask]
    hat = feature_hat[mask]
    gt_norm = np.linalg.norm(gt, axis=1)
    hat_norm = np.linalg.norm(hat, axis=1)
    ok = (gt_norm > _NORM_EPS) & (hat_norm > _NORM_EPS)
    cos = np.zeros(n)
    cos[ok] = np.einsum("rd,rd->r", gt[ok] / gt_norm[ok, None],
                        hat[ok] / hat_norm[ok, None])
    starved = int((~ok).sum())
    return float(np.mean(-cos)), starved


def compute_gradients(params: FieldParams, batch: PixelBatch,
                      config: TrainConfig, rng,
                      include_rgb: bool = True,
                      include_depth: bool = True,
                      include_open: bool = True):
    """Forward/backward over one batch.

    Returns (grads, LossBreakdown). The open-set term only ever writes to
    the feature grid: its upstream gradient is dropped at the compositing
    weights, which is the single cut point severing it from density.
    """
    near, far, valid = clip_rays_to_bbox(batch.origins, batch.directions,
                                         params.bbox_min, params.bbox_max)
    # Rays missing the bbox still take part in the losses (they render
    # pure background) but generate no gradients.
    near = np.where(valid, near, 1.0)
    far = np.where(valid, far, 2.0)

    from .render import sample_segments

    t, delta = sample_segments(near, far, config.n_samples,
                               config.stratified, rng)
    pts = batch.origins[:, None, :] + t[:, :, None] * batch.directions[:, None, :]
    r, k = t.shape
    (sigma, color, feature), caches = query_batch(
        params, pts.reshape(-1, 3), with_cache=True)
    d = params.feature_dim
    sigma = np.where(valid[:, None], sigma.reshape(r, k), 0.0)
    out = composite_batch(sigma, color.reshape(r, k, 3),
                          feature.reshape(r, k, d), t, delta,
                          params.background_color)

    l_rgb = loss_rgb(batch.color_gt, out["color_hat"])
    l_depth = loss_depth(batch.depth_gt, out["depth_hat"], config.huber_beta)
    feat_mask = batch.has_feature
    if batch.feature_gt is not None:
        l_open, n_starved = loss_open(batch.feature_gt, out["feature_hat"],
                                      feat_mask)
    else:
        l_open, n_starved = 0.0, 0

    n_depth = int((~np.isnan(batch.depth_gt)).sum())
    n_open = int(feat_mask.sum())
    breakdown = LossBreakdown(
        l_rgb=l_rgb, l_depth=l_depth, l_open=l_open,
        total=l_rgb + config.lambda_open * l_open
        + config.lambda_depth * l_depth,
        n_rgb=r, n_depth=n_depth, n_open=n_open, n_starved=n_starved)

    d_color_hat = np.zeros((r, 3))
    if include_rgb:
        d_color_hat = 2.0 * (out["color_hat"] - batch.color_gt) / r

    d_depth_hat = np.zeros(r)
    if include_depth and config.lambda_depth > 0 and n_depth > 0:
        mask = ~np.isnan(batch.depth_gt)
        err = batch.depth_gt[mask] - out["depth_hat"][mask]
        d_depth_hat[mask] = (-config.lambda_depth
                             * huber_grad(err, config.huber_beta) / n_depth)

    d_feature_hat = np.zeros((r, d))
    if (include_open and config.lambda_open > 0
            and batch.feature_gt is not None and n_open > 0):
        gt = batch.feature_gt
        gt_norm = np.linalg.norm(gt, axis=1)
        hat_norm = np.linalg.norm(out["feature_hat"], axis=1)
        ok = feat_mask & (gt_norm > _NORM_EPS) & (hat_norm > _NORM_EPS)
        if np.any(ok):
            u = gt[ok] / gt_norm[ok, None]
            v = out["feature_hat"][ok] / hat_norm[ok, None]
            uv = np.einsum("rd,rd->r", u, v)
            # d(-u.v_hat)/d feature_hat = -(u - (u.v)v) / ||feature_hat||
            d_feature_hat[ok] = (-(u - uv[:, None] * v)
                                 / hat_norm[ok, None]
                                 * config.lambda_open / n_open)

    d_sigma, d_color_s, d_feature_s = composite_backward(
        out, d_color_hat, d_depth_hat, d_feature_hat,
        feature_to_weights=False)

    d_sigma = np.where(valid[:, None], d_sigma, 0.0)
    d_color_s = np.where(valid[:, None, None], d_color_s, 0.0)
    d_feature_s = np.where(valid[:, None, None], d_feature_s, 0.0)

    grads = GradientBuffers.zeros_like(params)
    query_backward_batch(params, caches, d_sigma.reshape(-1),
                         d_color_s.reshape(-1, 3),
                         d_feature_s.reshape(-1, d), grads)
    if not grads.all_finite() or not math.isfinite(breakdown.total):
        raise TrainingDiverged(
            f"non-finite gradient or loss (l_rgb={l_rgb}, l_depth={l_depth}, "
            f"l_open={l_open})")
    return grads, breakdown


@dataclass
class AdamState:
    step: int = 0
    m: dict = dc_field(default_factory=dict)
    v: dict = dc_field(default_factory=dict)

    @classmethod
    def for_params(cls, params: FieldParams) -> "AdamState":
        state = cls()
        for name, grid in params.grids().items():
            state.m[name] = np.zeros_like(grid)
            state.v[name] = np.zeros_like(grid)
        return state


def adam_update(params: FieldParams, grads: GradientBuffers,
                state: AdamState, config: TrainConfig):
    state.step += 1
    b1, b2 = config.adam_beta1, config.adam_beta2
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for name, grid in params.grids().items():
        g = grads.grids()[name]
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        grid -= config.learning_rate * m_hat / (np.sqrt(v_hat) + config.adam_eps)


def backward_step(params: FieldParams, frames: list, config: TrainConfig,
                  rng, state: AdamState):
    """One optimization step: sample batch, gradients, Adam update.

    Mutates params and state in place; returns the LossBreakdown.
    """
    batch = sample_pixel_batch(frames, config, rng)
    grads, breakdown = compute_gradients(params, batch, config, rng)
    adam_update(params, grads, state, config)
    return breakdown


def train(params: FieldParams, frames: list, config: TrainConfig):
    """Run config.iterations steps; returns (params, per-step log)."""
    if not frames:
        raise ValueError("training requires at least one frame")
    params = params.copy()
    state = AdamState.for_params(params)
    rng = np.random.default_rng(config.seed)
    log = []
    for _ in range(config.iterations):
        log.append(backward_step(params, frames, config, rng, state))
    return params, log


def write_training_log(path, log):
    lines = ["iter,l_rgb,l_depth,l_open,total"]
    for i, row in enumerate(log):
        lines.append(f"{i},{row.l_rgb!r},{row.l_depth!r},"
                     f"{row.l_open!r},{row.total!r}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
