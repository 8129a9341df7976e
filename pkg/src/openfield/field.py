"""Trilinearly interpolated voxel grids mapping position to
(density, color, feature), with closed-form gradients.

Raw lattice values pass through softplus (density), sigmoid (color), or
identity (feature) after interpolation, so density stays nonnegative and
color stays in [0, 1] for any parameter values. Queries outside the bbox
are fully transparent. The query signature accepts a view direction for
interface compatibility but the field is Lambertian and ignores it.
"""

from dataclasses import dataclass, field as dc_field
from typing import Optional

import numpy as np


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inverse(y):
    # log(expm1(y)), stable for small y.
    return np.log(np.expm1(y))


def sigmoid(x):
    out = np.empty_like(np.asarray(x, dtype=np.float64))
    x = np.asarray(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class FieldConfig:
    bbox_min: np.ndarray
    bbox_max: np.ndarray
    density_resolution: tuple = (32, 32, 32)
    color_resolution: Optional[tuple] = None       # defaults to density res
    feature_resolution: tuple = (24, 24, 24)
    feature_dim: int = 16
    background_color: np.ndarray = dc_field(
        default_factory=lambda: np.full(3, 0.5))
    init_density: float = 0.01
    feature_init_std: float = 1e-2

    def __post_init__(self):
        self.bbox_min = np.asarray(self.bbox_min, dtype=np.float64)
        self.bbox_max = np.asarray(self.bbox_max, dtype=np.float64)
        self.background_color = np.asarray(self.background_color,
                                           dtype=np.float64)
        if self.color_resolution is None:
            self.color_resolution = tuple(self.density_resolution)
        for res in (self.density_resolution, self.color_resolution,
                    self.feature_resolution):
            if any(r < 2 for r in res):
                raise ValueError("grid resolutions must be >= 2 per axis")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be >= 1")


@dataclass
class FieldParams:
    """All trainable lattices plus the bbox they are anchored to."""

    bbox_min: np.ndarray
    bbox_max: np.ndarray
    density: np.ndarray   # (nx, ny, nz) raw logits
    color: np.ndarray     # (nx, ny, nz, 3) raw logits
    feature: np.ndarray   # (mx, my, mz, D) raw values
    background_color: np.ndarray

    @property
    def feature_dim(self) -> int:
        return self.feature.shape[3]

    def voxel_size(self) -> np.ndarray:
        """Average cell edge lengths of the density lattice."""
        res = np.array(self.density.shape[:3])
        return (self.bbox_max - self.bbox_min) / (res - 1)

    def copy(self) -> "FieldParams":
        return FieldParams(
            bbox_min=self.bbox_min.copy(),
            bbox_max=self.bbox_max.copy(),
            density=self.density.copy(),
            color=self.color.copy(),
            feature=self.feature.copy(),
            background_color=self.background_color.copy(),
        )

    def grids(self) -> dict:
        return {"density": self.density, "color": self.color,
                "feature": self.feature}


@dataclass
class FieldOutput:
    sigma: float
    color: np.ndarray
    feature: np.ndarray


def init_params(config: FieldConfig, seed: int = 0) -> FieldParams:
    """Near-transparent start: sigma ~ init_density, mid-gray color,
    small random features."""
    rng = np.random.default_rng(seed)
    density = np.full(tuple(config.density_resolution),
                      softplus_inverse(config.init_density))
    color = np.zeros(tuple(config.color_resolution) + (3,))
    feature = rng.normal(0.0, config.feature_init_std,
                         size=tuple(config.feature_resolution)
                         + (config.feature_dim,))
    return FieldParams(
        bbox_min=config.bbox_min.copy(),
        bbox_max=config.bbox_max.copy(),
        density=density,
        color=color,
        feature=feature,
        background_color=config.background_color.copy(),
    )


class InterpCache:
    """Corner indices/weights from a forward interpolation pass.

    flat_idx and weights are (N, 8); raw is the interpolated raw value
    (N, C), needed for activation derivatives in the backward pass.
    """

    __slots__ = ("flat_idx", "weights", "raw", "inside", "grid_shape")

    def __init__(self, flat_idx, weights, raw, inside, grid_shape):
        self.flat_idx = flat_idx
        self.weights = weights
        self.raw = raw
        self.inside = inside
        self.grid_shape = grid_shape


def _interp_setup(res, bbox_min, bbox_max, x: np.ndarray):
    """Corner indices, trilinear weights, and inside mask for one lattice."""
    nx, ny, nz = res
    resf = np.array([nx, ny, nz], dtype=np.float64)

    u = (x - bbox_min) / (bbox_max - bbox_min)
    inside = ((u[:, 0] >= 0.0) & (u[:, 0] <= 1.0)
              & (u[:, 1] >= 0.0) & (u[:, 1] <= 1.0)
              & (u[:, 2] >= 0.0) & (u[:, 2] <= 1.0))
    g = np.clip(u, 0.0, 1.0) * (resf - 1.0)
    i0 = np.minimum(g.astype(np.int64), np.array([nx - 2, ny - 2, nz - 2]))
    f = g - i0

    fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
    gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
    n = len(x)
    weights = np.empty((n, 8))
    # Corner k in binary b2 b1 b0 = offset along x, y, z.
    weights[:, 0] = gx * gy * gz
    weights[:, 1] = gx * gy * fz
    weights[:, 2] = gx * fy * gz
    weights[:, 3] = gx * fy * fz
    weights[:, 4] = fx * gy * gz
    weights[:, 5] = fx * gy * fz
    weights[:, 6] = fx * fy * gz
    weights[:, 7] = fx * fy * fz

    base = (i0[:, 0] * ny + i0[:, 1]) * nz + i0[:, 2]
    idx = np.empty((n, 8), dtype=np.int64)
    idx[:, 0] = base
    idx[:, 1] = base + 1
    idx[:, 2] = base + nz
    idx[:, 3] = base + nz + 1
    idx[:, 4] = base + ny * nz
    idx[:, 5] = base + ny * nz + 1
    idx[:, 6] = base + ny * nz + nz
    idx[:, 7] = base + ny * nz + nz + 1
    return idx, weights, inside


def _interp_grid(grid: np.ndarray, bbox_min, bbox_max, x: np.ndarray,
                 setup=None):
    """Trilinear interpolation of (nx, ny, nz, C) at points (N, 3)."""
    if grid.ndim == 3:
        grid = grid[..., None]
    c = grid.shape[3]
    if setup is None:
        setup = _interp_setup(grid.shape[:3], bbox_min, bbox_max, x)
    idx, weights, inside = setup

    flat = grid.reshape(-1, c)
    if c == 1:
        raw = np.einsum("nk,nk->n", weights, np.take(flat[:, 0], idx))[:, None]
    else:
        raw = np.einsum("nk,nkc->nc", weights, flat[idx])
    raw[~inside] = 0.0
    return raw, InterpCache(idx, weights, raw, inside, grid.shape)


def query_batch(params: FieldParams, x: np.ndarray, directions=None,
                with_cache: bool = False):
    """Evaluate the field at points (N, 3).

    Returns (sigma (N,), color (N, 3), feature (N, D)) and, when
    with_cache is set, the per-grid interpolation caches needed for
    query_backward_batch. `directions` is accepted and ignored.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    setup_d = _interp_setup(params.density.shape[:3], params.bbox_min,
                            params.bbox_max, x)
    setup_c = (setup_d if params.color.shape[:3] == params.density.shape[:3]
               else None)
    raw_d, cache_d = _interp_grid(params.density, params.bbox_min,
                                  params.bbox_max, x, setup_d)
    raw_c, cache_c = _interp_grid(params.color, params.bbox_min,
                                  params.bbox_max, x, setup_c)
    raw_f, cache_f = _interp_grid(params.feature, params.bbox_min,
                                  params.bbox_max, x)

    inside = cache_d.inside
    sigma = np.where(inside, softplus(raw_d[:, 0]), 0.0)
    color = np.where(inside[:, None], sigmoid(raw_c),
                     params.background_color[None, :])
    feature = np.where(inside[:, None], raw_f, 0.0)

    if with_cache:
        return (sigma, color, feature), {"density": cache_d,
                                         "color": cache_c,
                                         "feature": cache_f}
    return sigma, color, feature


def query(params: FieldParams, x, direction=None) -> FieldOutput:
    """Single-point field evaluation."""
    sigma, color, feature = query_batch(params, np.asarray(x)[None], direction)
    return FieldOutput(sigma=float(sigma[0]), color=color[0],
                       feature=feature[0])


@dataclass
class GradientBuffers:
    """Accumulators shaped like the trainable grids."""

    density: np.ndarray
    color: np.ndarray
    feature: np.ndarray

    @classmethod
    def zeros_like(cls, params: FieldParams) -> "GradientBuffers":
        return cls(density=np.zeros_like(params.density),
                   color=np.zeros_like(params.color),
                   feature=np.zeros_like(params.feature))

    def grids(self) -> dict:
        return {"density": self.density, "color": self.color,
                "feature": self.feature}

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(g)) for g in self.grids().values())


def _scatter_grid(grad_grid: np.ndarray, cache: InterpCache,
                  upstream_raw: np.ndarray):
    """Accumulate d(loss)/d(raw lattice values) into grad_grid.

    upstream_raw is (N, C): gradient w.r.t. the interpolated raw value.
    Outside-bbox points contribute nothing.
    """
    if grad_grid.ndim == 3:
        flat = grad_grid.reshape(-1, 1)
    else:
        flat = grad_grid.reshape(-1, grad_grid.shape[-1])
    n_cells, c = flat.shape
    up = upstream_raw * cache.inside[:, None]
    idx = cache.flat_idx.ravel()
    for ch in range(c):
        contrib = cache.weights * up[:, ch, None]  # (N, 8)
        flat[:, ch] += np.bincount(idx, weights=contrib.ravel(),
                                   minlength=n_cells)


def query_backward_batch(params: FieldParams, caches: dict,
                         d_sigma: np.ndarray, d_color: np.ndarray,
                         d_feature: np.ndarray, grads: GradientBuffers):
    """Chain upstream gradients at query points back onto the lattices.

    d_sigma (N,), d_color (N, 3), d_feature (N, D) are derivatives of the
    loss w.r.t. the activated outputs; activation derivatives and
    trilinear weights are applied here.
    """
    cache_d = caches["density"]
    cache_c = caches["color"]
    cache_f = caches["feature"]

    # d sigma / d raw = softplus'(raw) = sigmoid(raw)
    up_d = d_sigma[:, None] * sigmoid(cache_d.raw)
    _scatter_grid(grads.density, cache_d, up_d)

    s = sigmoid(cache_c.raw)
    up_c = d_color * s * (1.0 - s)
    _scatter_grid(grads.color, cache_c, up_c)

    _scatter_grid(grads.feature, cache_f, d_feature)


def query_backward(params: FieldParams, x, d_sigma: float, d_color,
                   d_feature, grads: Optional[GradientBuffers] = None
                   ) -> GradientBuffers:
    """Single-point backward pass; accumulates into (or creates) buffers."""
    if grads is None:
        grads = GradientBuffers.zeros_like(params)
    x = np.asarray(x, dtype=np.float64)[None]
    _, caches = query_batch(params, x, with_cache=True)
    query_backward_batch(params, caches,
                         np.array([d_sigma], dtype=np.float64),
                         np.asarray(d_color, dtype=np.float64)[None],
                         np.asarray(d_feature, dtype=np.float64)[None],
                         grads)
    return grads
