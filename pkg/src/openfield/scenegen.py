"""Synthetic labeled scenes and an analytic ray-tracing oracle.

Scenes are unions of axis-aligned boxes and spheres with flat per-class
albedo. Ground-truth posed views (RGB, z-depth, semantics), stub
open-set feature maps, and surface-sampled labeled point clouds are all
exact functions of the scene and a seed, which makes every downstream
stage testable without external datasets or encoder models.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .geometry import Camera, lookat_pose, pixel_directions
from .seeding import derive_rng

_HIT_EPS = 1e-9

BACKGROUND_CLASS = -1


@dataclass
class Primitive:
    """One solid: an axis-aligned box or a sphere.

    Box `extents` are full side lengths; `radius` applies to spheres.
    """

    shape: str  # "box" | "sphere"
    center: np.ndarray
    class_id: int
    albedo: np.ndarray
    extents: Optional[np.ndarray] = None
    radius: Optional[float] = None

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.albedo = np.asarray(self.albedo, dtype=np.float64)
        if self.shape not in ("box", "sphere"):
            raise ValueError(f"unknown primitive shape {self.shape!r}")
        if self.shape == "box":
            if self.extents is None:
                raise ValueError("box primitive requires extents")
            self.extents = np.asarray(self.extents, dtype=np.float64)
            if np.any(self.extents <= 0):
                raise ValueError("box extents must be strictly positive")
        else:
            if self.radius is None or self.radius <= 0:
                raise ValueError("sphere radius must be strictly positive")
        if self.class_id < 0:
            raise ValueError("class_id must be >= 0")
        if np.any(self.albedo < 0) or np.any(self.albedo > 1):
            raise ValueError("albedo must lie in [0, 1]^3")

    def surface_area(self) -> float:
        if self.shape == "box":
            a, b, c = self.extents
            return 2.0 * (a * b + b * c + c * a)
        return 4.0 * np.pi * self.radius ** 2

    def aabb(self):
        if self.shape == "box":
            half = self.extents / 2.0
        else:
            half = np.full(3, self.radius)
        return self.center - half, self.center + half

    def contains(self, points: np.ndarray) -> np.ndarray:
        """Boolean mask of points inside (or on) the solid."""
        points = np.atleast_2d(points)
        if self.shape == "box":
            half = self.extents / 2.0
            return np.all(np.abs(points - self.center) <= half, axis=1)
        return np.linalg.norm(points - self.center, axis=1) <= self.radius


@dataclass
class SceneSpec:
    bbox_min: np.ndarray
    bbox_max: np.ndarray
    primitives: list
    background_color: np.ndarray = field(
        default_factory=lambda: np.zeros(3))
    seed: int = 0

    def __post_init__(self):
        self.bbox_min = np.asarray(self.bbox_min, dtype=np.float64)
        self.bbox_max = np.asarray(self.bbox_max, dtype=np.float64)
        self.background_color = np.asarray(self.background_color,
                                           dtype=np.float64)


@dataclass
class Scene:
    """Validated, immutable scene compiled from a SceneSpec."""

    bbox_min: np.ndarray
    bbox_max: np.ndarray
    primitives: list
    background_color: np.ndarray
    seed: int
    n_classes: int

    @property
    def centroid(self) -> np.ndarray:
        """Surface-area-weighted centroid of the primitives."""
        areas = np.array([p.surface_area() for p in self.primitives])
        centers = np.array([p.center for p in self.primitives])
        return areas @ centers / areas.sum()

    @property
    def bbox_center(self) -> np.ndarray:
        return (self.bbox_min + self.bbox_max) / 2.0

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.bbox_max - self.bbox_min))

    def containing_primitive(self, points: np.ndarray) -> np.ndarray:
        """Index of the first primitive containing each point, -1 if none."""
        points = np.atleast_2d(points)
        owner = np.full(len(points), -1, dtype=np.int64)
        for i, prim in enumerate(self.primitives):
            mask = (owner < 0) & prim.contains(points)
            owner[mask] = i
        return owner


@dataclass
class FeatureMap:
    """Dense per-pixel embedding plane (H, W, D)."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ValueError("feature map data must be (H, W, D)")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("feature map contains NaN/Inf")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def dim(self) -> int:
        return self.data.shape[2]


@dataclass
class PosedFrame:
    """One training view: camera plus aligned image planes."""

    camera: Camera
    rgb: np.ndarray        # (H, W, 3) in [0, 1]
    depth: np.ndarray      # (H, W) z-depth, 0 = no return
    semantics: np.ndarray  # (H, W) class ids, -1 = background
    features: Optional[FeatureMap] = None

    def __post_init__(self):
        self.rgb = np.asarray(self.rgb, dtype=np.float64)
        self.depth = np.asarray(self.depth, dtype=np.float64)
        self.semantics = np.asarray(self.semantics, dtype=np.int64)
        shape = (self.camera.height, self.camera.width)
        if self.rgb.shape != shape + (3,):
            raise ValueError("rgb plane does not match camera size")
        if self.depth.shape != shape or self.semantics.shape != shape:
            raise ValueError("depth/semantics planes do not match camera size")
        if not np.all(np.isfinite(self.depth)) or np.any(self.depth < 0):
            raise ValueError("depth must be finite and nonnegative")
        if self.features is not None:
            fm = self.features
            if (fm.height, fm.width) != shape:
                raise ValueError("feature map does not match camera size")


@dataclass
class Codebook:
    """Unit-norm class embeddings standing in for text-encoder outputs."""

    embeddings: np.ndarray            # (n_classes, D)
    background_embedding: np.ndarray  # (D,)

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        self.background_embedding = np.asarray(self.background_embedding,
                                               dtype=np.float64)
        norms = np.linalg.norm(self.embeddings, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValueError("codebook embeddings must be unit norm")
        if abs(np.linalg.norm(self.background_embedding) - 1.0) > 1e-6:
            raise ValueError("background embedding must be unit norm")
        gram = self.embeddings @ self.embeddings.T
        off = gram - np.eye(len(self.embeddings))
        if np.any(off > 1.0 - 1e-6):
            raise ValueError("codebook embeddings must be pairwise distinct")

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    @property
    def n_classes(self) -> int:
        return self.embeddings.shape[0]

    def lookup(self, class_ids: np.ndarray) -> np.ndarray:
        """Embeddings for class ids; -1 maps to the background embedding."""
        class_ids = np.asarray(class_ids)
        table = np.vstack([self.embeddings, self.background_embedding])
        return table[np.where(class_ids < 0, self.n_classes, class_ids)]


@dataclass
class NoiseModel:
    """Stub-encoder corruption: per-channel noise and border scrambling."""

    sigma: float = 0.0
    border_corrupt: int = 0
    seed: int = 0


@dataclass
class LabeledPointCloud:
    positions: np.ndarray  # (N, 3)
    class_ids: np.ndarray  # (N,)
    colors: Optional[np.ndarray] = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.class_ids = np.asarray(self.class_ids, dtype=np.int64)
        if len(self.positions) == 0:
            raise ValueError("point cloud must contain at least one point")
        if len(self.positions) != len(self.class_ids):
            raise ValueError("positions and class_ids length mismatch")
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.float64)

    def __len__(self) -> int:
        return len(self.positions)


def generate_scene(spec: SceneSpec) -> Scene:
    """Validate a spec into a Scene. Pure function of the spec."""
    if len(spec.primitives) < 1:
        raise ValueError("scene requires at least one primitive")
    if np.any(spec.bbox_min >= spec.bbox_max):
        raise ValueError("bbox_min must be strictly below bbox_max")
    if np.any(spec.background_color < 0) or np.any(spec.background_color > 1):
        raise ValueError("background color must lie in [0, 1]^3")

    for prim in spec.primitives:
        lo, hi = prim.aabb()
        if np.any(lo < spec.bbox_min - 1e-12) or np.any(hi > spec.bbox_max + 1e-12):
            raise ValueError(
                f"primitive (class {prim.class_id}) extends outside the scene bbox")

    class_ids = sorted({p.class_id for p in spec.primitives})
    if class_ids != list(range(len(class_ids))):
        raise ValueError(f"class ids must be contiguous from 0, got {class_ids}")

    return Scene(
        bbox_min=spec.bbox_min.copy(),
        bbox_max=spec.bbox_max.copy(),
        primitives=list(spec.primitives),
        background_color=spec.background_color.copy(),
        seed=spec.seed,
        n_classes=len(class_ids),
    )


def _intersect_sphere(prim, origins, directions):
    oc = origins - prim.center
    b = np.einsum("ij,ij->i", directions, oc)
    c = np.einsum("ij,ij->i", oc, oc) - prim.radius ** 2
    disc = b * b - c
    hit = disc >= 0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    t_near = -b - sq
    t_far = -b + sq
    t = np.where(t_near > _HIT_EPS, t_near, t_far)
    t = np.where(hit & (t > _HIT_EPS), t, np.inf)
    return t


def _intersect_box(prim, origins, directions):
    lo, hi = prim.aabb()
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / directions
        t0 = (lo - origins) * inv
        t1 = (hi - origins) * inv
    tn = np.nanmax(np.fmin(t0, t1), axis=1)
    tf = np.nanmin(np.fmax(t0, t1), axis=1)
    t = np.where(tn > _HIT_EPS, tn, tf)
    miss = (tf < tn) | (t <= _HIT_EPS)
    return np.where(miss, np.inf, t)


def trace_rays(scene: Scene, origins: np.ndarray, directions: np.ndarray):
    """Nearest-hit trace for a batch of rays.

    Args:
        origins: (N, 3); directions: (N, 3), unit norm.

    Returns:
        (t, prim_index): hit distance along each ray (inf on miss) and the
        index of the nearest primitive (-1 on miss).
    """
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    directions = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    best_t = np.full(len(origins), np.inf)
    best_prim = np.full(len(origins), -1, dtype=np.int64)
    for i, prim in enumerate(scene.primitives):
        if prim.shape == "sphere":
            t = _intersect_sphere(prim, origins, directions)
        else:
            t = _intersect_box(prim, origins, directions)
        closer = t < best_t
        best_t[closer] = t[closer]
        best_prim[closer] = i
    return best_t, best_prim


def trace_ray(scene: Scene, origin, direction):
    """Single-ray oracle: returns (distance, class_id, albedo) or None on miss.

    `direction` must be unit norm.
    """
    direction = np.asarray(direction, dtype=np.float64)
    if abs(np.linalg.norm(direction) - 1.0) > 1e-6:
        raise ValueError("trace_ray requires a unit direction")
    t, prim_idx = trace_rays(scene, np.asarray(origin)[None], direction[None])
    if prim_idx[0] < 0:
        return None
    prim = scene.primitives[prim_idx[0]]
    return float(t[0]), prim.class_id, prim.albedo.copy()


def render_views(scene: Scene, cameras: list) -> list:
    """Ray-trace ground-truth frames (flat shading, z-depth, class ids)."""
    frames = []
    for camera in cameras:
        rows, cols = np.mgrid[0:camera.height, 0:camera.width]
        rows = rows.ravel().astype(np.float64)
        cols = cols.ravel().astype(np.float64)
        dirs = pixel_directions(camera, rows, cols)
        origins = np.broadcast_to(camera.position, dirs.shape)
        t, prim_idx = trace_rays(scene, origins, dirs)

        hit = prim_idx >= 0
        rgb = np.tile(scene.background_color, (len(t), 1))
        depth = np.zeros(len(t))
        semantics = np.full(len(t), BACKGROUND_CLASS, dtype=np.int64)

        albedos = np.array([p.albedo for p in scene.primitives])
        class_ids = np.array([p.class_id for p in scene.primitives])
        rgb[hit] = albedos[prim_idx[hit]]
        semantics[hit] = class_ids[prim_idx[hit]]
        # z-depth: ray parameter times the forward component of the direction.
        cos = dirs @ (-camera.pose[:3, 2])
        depth[hit] = t[hit] * cos[hit]

        shape = (camera.height, camera.width)
        frames.append(PosedFrame(
            camera=camera,
            rgb=rgb.reshape(shape + (3,)),
            depth=depth.reshape(shape),
            semantics=semantics.reshape(shape),
        ))
    return frames


def _default_intrinsics(width: int, height: int, focal_scale: float = 1.0):
    # 90 degree horizontal field of view at focal_scale 1.
    fx = focal_scale * width / 2.0
    return dict(fx=fx, fy=fx, cx=width / 2.0, cy=height / 2.0,
                width=width, height=height)


def make_trajectory(scene: Scene, n_views: int, kind: str = "orbit",
                    seed: int = 0, width: int = 128, height: int = 96,
                    radius: Optional[float] = None,
                    elevation: Optional[float] = None,
                    focal_scale: float = 1.0,
                    max_retries: int = 200) -> list:
    """Camera trajectories guaranteed to sit outside solid geometry.

    kind="orbit": evenly spaced ring around the bbox center, all looking
    at the centroid. kind="random_interior": uniform positions inside the
    bbox (outside all primitives) with random look targets.
    """
    if n_views < 1:
        raise ValueError("n_views must be >= 1")
    intr = _default_intrinsics(width, height, focal_scale)
    center = scene.centroid
    rng = derive_rng(seed, "trajectory")

    cameras = []
    if kind == "orbit":
        r = radius if radius is not None else 0.55 * scene.diagonal
        z = elevation if elevation is not None else (
            center[2] + 0.18 * (scene.bbox_max[2] - scene.bbox_min[2]))
        for attempt in range(max_retries):
            angles = 2.0 * np.pi * np.arange(n_views) / n_views
            eyes = np.stack([
                center[0] + r * np.cos(angles),
                center[1] + r * np.sin(angles),
                np.full(n_views, z),
            ], axis=1)
            if np.all(scene.containing_primitive(eyes) < 0):
                cameras = [Camera(pose=lookat_pose(eye, center), **intr)
                           for eye in eyes]
                break
            r *= 1.2
        else:
            raise RuntimeError("could not place orbit cameras outside geometry")
    elif kind == "random_interior":
        span = scene.bbox_max - scene.bbox_min
        tries = 0
        while len(cameras) < n_views:
            if tries > max_retries * n_views:
                raise RuntimeError(
                    "could not place random interior cameras outside geometry")
            tries += 1
            eye = scene.bbox_min + rng.uniform(size=3) * span
            if scene.containing_primitive(eye[None])[0] >= 0:
                continue
            target = scene.bbox_min + rng.uniform(size=3) * span
            if np.linalg.norm(target - eye) < 1e-6:
                continue
            cameras.append(Camera(pose=lookat_pose(eye, target), **intr))
    else:
        raise ValueError(f"unknown trajectory kind {kind!r}")
    return cameras


def make_codebook(n_classes: int, dim: int, seed: int = 0,
                  max_cosine: float = 0.5, max_tries: int = 10000) -> Codebook:
    """Random unit embeddings with pairwise cosine below `max_cosine`.

    The background embedding participates in the separation constraint so
    background pixels are argmax-decodable too.
    """
    if n_classes < 1 or dim < 1:
        raise ValueError("need n_classes >= 1 and dim >= 1")
    rng = np.random.default_rng(seed)
    rows = []
    tries = 0
    while len(rows) < n_classes + 1:
        if tries > max_tries:
            raise RuntimeError(
                f"could not draw {n_classes + 1} embeddings with pairwise "
                f"cosine < {max_cosine} in dimension {dim}")
        tries += 1
        v = rng.normal(size=dim)
        v /= np.linalg.norm(v)
        if all(np.dot(v, r) < max_cosine for r in rows):
            rows.append(v)
    return Codebook(embeddings=np.array(rows[:-1]),
                    background_embedding=rows[-1])


def encode_features(semantics: np.ndarray, codebook: Codebook,
                    noise: NoiseModel) -> FeatureMap:
    """Stub per-pixel encoder: class embedding + Gaussian noise, renormalized.

    Pixels within `noise.border_corrupt` of any image edge are replaced by
    random unit vectors, mimicking encoder artifacts near borders.
    """
    semantics = np.asarray(semantics)
    valid = (semantics >= -1) & (semantics < codebook.n_classes)
    if not np.all(valid):
        bad = np.unique(semantics[~valid])
        raise ValueError(f"semantics contain unknown class ids {bad.tolist()}")

    h, w = semantics.shape
    data = codebook.lookup(semantics).astype(np.float64)

    rng = np.random.default_rng(noise.seed)
    if noise.sigma > 0:
        data = data + rng.normal(0.0, noise.sigma, size=data.shape)
        data /= np.linalg.norm(data, axis=2, keepdims=True)

    b = noise.border_corrupt
    if b > 0:
        border = np.zeros((h, w), dtype=bool)
        border[:b, :] = True
        border[-b:, :] = True
        border[:, :b] = True
        border[:, -b:] = True
        n_border = int(border.sum())
        rand = rng.normal(size=(n_border, codebook.dim))
        rand /= np.linalg.norm(rand, axis=1, keepdims=True)
        data[border] = rand
    return FeatureMap(data=data)


def _sample_box_surface(prim, n, rng):
    ex, ey, ez = prim.extents
    face_areas = np.array([ey * ez, ey * ez, ex * ez, ex * ez, ex * ey, ex * ey])
    face = rng.choice(6, size=n, p=face_areas / face_areas.sum())
    u = rng.uniform(-0.5, 0.5, size=n)
    v = rng.uniform(-0.5, 0.5, size=n)
    pts = np.zeros((n, 3))
    axis = face // 2          # fixed axis of the face
    sign = np.where(face % 2 == 0, -0.5, 0.5)
    half = prim.extents
    for a in range(3):
        m = axis == a
        others = [i for i in range(3) if i != a]
        pts[m, a] = sign[m] * half[a]
        pts[m, others[0]] = u[m] * half[others[0]]
        pts[m, others[1]] = v[m] * half[others[1]]
    return pts + prim.center


def sample_point_cloud(scene: Scene, n: int, seed: int = 0) -> LabeledPointCloud:
    """Uniform surface samples across all primitives, area-weighted."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = derive_rng(seed, "pointcloud")
    areas = np.array([p.surface_area() for p in scene.primitives])
    owner = rng.choice(len(scene.primitives), size=n, p=areas / areas.sum())

    positions = np.zeros((n, 3))
    for i, prim in enumerate(scene.primitives):
        mask = owner == i
        k = int(mask.sum())
        if k == 0:
            continue
        if prim.shape == "sphere":
            d = rng.normal(size=(k, 3))
            d /= np.linalg.norm(d, axis=1, keepdims=True)
            positions[mask] = prim.center + prim.radius * d
        else:
            positions[mask] = _sample_box_surface(prim, k, rng)

    class_ids = np.array([scene.primitives[i].class_id for i in owner])
    colors = np.array([scene.primitives[i].albedo for i in owner])
    return LabeledPointCloud(positions=positions, class_ids=class_ids,
                             colors=colors)
