"""Reference synthetic benchmarks used by the ablation harness and the
acceptance suite.

Three fixed constructions:

* pocket scene: a floor, an open-topped walled pocket, a hidden object
  inside the pocket that no orbit camera can see, and two freestanding
  objects. Exercises occlusion recovery through proposed views.
* three-class scene: floor plus two floating objects, fully visible from
  the orbit; with noise-free features this should segment almost
  perfectly end to end.
* heterogeneous-noise scene: five classes whose stub features carry
  per-class noise levels, for the uncertainty/error correlation check.
"""

from dataclasses import dataclass

import numpy as np

from .scenegen import (Codebook, NoiseModel, Primitive, Scene, SceneSpec,
                       encode_features, generate_scene, make_codebook,
                       make_trajectory, render_views, sample_point_cloud)
from .seeding import derive_seed


def room_shell(bbox_min, bbox_max, wall_height: float,
               thickness: float = 0.2, class_id: int = 0,
               albedo=(0.5, 0.5, 0.45), floor_thickness: float = 0.15,
               tiles: int = 3) -> list:
    """Thin tiled floor spanning the full footprint plus segmented walls.

    A closed shell means almost every training ray terminates on labeled
    geometry instead of escaping to the background, mirroring indoor
    capture. Floor tiles and wall segments carry alternating albedo so
    photometric edges pin the geometry even without depth supervision;
    everything shares one class id. The floor stays thinner than a
    feature voxel so its unseen underside shares interpolation cells
    with the supervised top.
    """
    x0, y0, _ = bbox_min
    x1, y1, _ = bbox_max
    ft = floor_thickness
    wh = wall_height
    albedo = np.asarray(albedo, dtype=np.float64)

    def shade(i, strength=0.12):
        delta = strength if i % 2 == 0 else -strength
        tint = np.array([delta, delta * 0.6, delta * 0.8])
        return np.clip(albedo + tint, 0.02, 0.98)

    shell = []
    tx = (x1 - x0) / tiles
    ty = (y1 - y0) / tiles
    for i in range(tiles):
        for j in range(tiles):
            shell.append(Primitive(
                shape="box",
                center=(x0 + (i + 0.5) * tx, y0 + (j + 0.5) * ty, ft / 2),
                extents=(tx, ty, ft), class_id=class_id,
                albedo=shade(i + j)))

    wall_z = ft + (wh - ft) / 2
    wall_ez = wh - ft
    walls = [
        # (fixed axis, fixed coordinate, run axis)
        (1, y0 + thickness / 2, 0),
        (1, y1 - thickness / 2, 0),
        (0, x0 + thickness / 2, 1),
        (0, x1 - thickness / 2, 1),
    ]
    for w, (fixed_axis, fixed_coord, run_axis) in enumerate(walls):
        run0 = (x0, y0)[run_axis]
        run1 = (x1, y1)[run_axis]
        seg = (run1 - run0) / tiles
        for k in range(tiles):
            center = [0.0, 0.0, wall_z]
            extents = [0.0, 0.0, wall_ez]
            center[fixed_axis] = fixed_coord
            extents[fixed_axis] = thickness
            center[run_axis] = run0 + (k + 0.5) * seg
            extents[run_axis] = seg
            shell.append(Primitive(shape="box", center=tuple(center),
                                   extents=tuple(extents),
                                   class_id=class_id,
                                   albedo=shade(w + k, strength=0.1)))
    return shell


def pocket_scene_spec(seed: int = 0) -> SceneSpec:
    """Closed room with a walled pocket hiding one object class.

    The pocket is open-topped but taller than its contents, and every
    orbit camera sits low enough that no sight line clears the pocket
    walls, so class 2 is unobserved until cameras are placed above it.
    """
    prims = room_shell((0.0, 0.0, 0.0), (8.0, 8.0, 5.0), wall_height=1.3,
                       albedo=(0.45, 0.45, 0.42), tiles=5)
    prims += [
        # Pocket walls (class 1), open top, cavity roughly 1.15 wide.
        Primitive(shape="box", center=(6.3, 7.05, 1.25),
                  extents=(1.9, 0.35, 2.2), class_id=1,
                  albedo=(0.75, 0.3, 0.2)),
        Primitive(shape="box", center=(6.3, 5.55, 1.25),
                  extents=(1.9, 0.35, 2.2), class_id=1,
                  albedo=(0.75, 0.3, 0.2)),
        Primitive(shape="box", center=(5.55, 6.3, 1.25),
                  extents=(0.35, 1.2, 2.2), class_id=1,
                  albedo=(0.75, 0.3, 0.2)),
        Primitive(shape="box", center=(7.05, 6.3, 1.25),
                  extents=(0.35, 1.2, 2.2), class_id=1,
                  albedo=(0.75, 0.3, 0.2)),
        # Hidden object inside the pocket, well below the wall tops.
        Primitive(shape="box", center=(6.3, 6.3, 0.5),
                  extents=(0.7, 0.7, 0.7), class_id=2,
                  albedo=(0.15, 0.8, 0.25)),
        # Freestanding objects visible from the orbit.
        Primitive(shape="sphere", center=(2.2, 2.2, 1.1), radius=0.6,
                  class_id=3, albedo=(0.2, 0.35, 0.85)),
        Primitive(shape="box", center=(2.5, 6.0, 1.0),
                  extents=(1.0, 0.8, 1.0), class_id=4,
                  albedo=(0.9, 0.8, 0.2)),
    ]
    return SceneSpec(bbox_min=(0.0, 0.0, 0.0), bbox_max=(8.0, 8.0, 5.0),
                     primitives=prims, background_color=(0.0, 0.0, 0.0),
                     seed=seed)


def three_class_scene_spec(seed: int = 0) -> SceneSpec:
    prims = room_shell((0.0, 0.0, 0.0), (6.0, 6.0, 4.0), wall_height=1.2,
                       thickness=0.15)
    prims += [
        Primitive(shape="sphere", center=(2.0, 2.2, 1.7), radius=0.7,
                  class_id=1, albedo=(0.85, 0.2, 0.2)),
        Primitive(shape="box", center=(4.2, 3.8, 1.6),
                  extents=(1.1, 1.1, 1.1), class_id=2,
                  albedo=(0.2, 0.3, 0.85)),
    ]
    return SceneSpec(bbox_min=(0.0, 0.0, 0.0), bbox_max=(6.0, 6.0, 4.0),
                     primitives=prims, background_color=(0.0, 0.0, 0.0),
                     seed=seed)


def heteronoise_scene_spec(seed: int = 0) -> SceneSpec:
    """Two half-floor slabs plus four objects, six classes total.

    Designed so the low- and high-noise regions carry similar surface
    area: the per-point uncertainty signal is then balanced across the
    cloud instead of being swamped by one dominant class.
    """
    prims = [
        # Slabs are separated and all objects float: no contact lines, so
        # projected features mix only at depth-separated silhouettes that
        # the visibility test filters out.
        Primitive(shape="box", center=(1.35, 3.0, 0.075),
                  extents=(2.7, 6.0, 0.15), class_id=0,
                  albedo=(0.5, 0.5, 0.45)),
        Primitive(shape="box", center=(4.65, 3.0, 0.075),
                  extents=(2.7, 6.0, 0.15), class_id=1,
                  albedo=(0.6, 0.55, 0.5)),
        Primitive(shape="sphere", center=(1.6, 1.7, 1.55), radius=0.65,
                  class_id=2, albedo=(0.85, 0.2, 0.2)),
        Primitive(shape="box", center=(4.4, 1.8, 1.4),
                  extents=(1.0, 1.0, 1.0), class_id=3,
                  albedo=(0.2, 0.3, 0.85)),
        Primitive(shape="sphere", center=(4.3, 4.4, 1.5), radius=0.6,
                  class_id=4, albedo=(0.9, 0.8, 0.2)),
        Primitive(shape="box", center=(1.7, 4.4, 1.45),
                  extents=(0.9, 1.1, 1.1), class_id=5,
                  albedo=(0.3, 0.75, 0.3)),
    ]
    return SceneSpec(bbox_min=(0.0, 0.0, 0.0), bbox_max=(6.0, 6.0, 4.0),
                     primitives=prims, background_color=(0.0, 0.0, 0.0),
                     seed=seed)


def encode_frames(frames: list, codebook: Codebook, noise: NoiseModel):
    """Attach stub feature maps to frames, one noise stream per frame."""
    for i, frame in enumerate(frames):
        frame_noise = NoiseModel(
            sigma=noise.sigma, border_corrupt=noise.border_corrupt,
            seed=derive_seed(noise.seed, "frame-noise", i) % (2 ** 32))
        frame.features = encode_features(frame.semantics, codebook,
                                         frame_noise)
    return frames


def encode_frames_per_class(frames: list, codebook: Codebook,
                            sigma_by_class: dict, border_corrupt: int,
                            seed: int):
    """Per-region noise: compose per-class encodings pixelwise.

    sigma_by_class maps class id (and optionally -1 for background) to a
    noise level; every class present in a frame must be covered.
    """
    sigmas = sorted(set(sigma_by_class.values()))
    for i, frame in enumerate(frames):
        present = np.unique(frame.semantics)
        missing = [int(c) for c in present if int(c) not in sigma_by_class]
        if missing:
            raise ValueError(f"no noise level for classes {missing}")
        data = None
        for j, sigma in enumerate(sigmas):
            noise = NoiseModel(
                sigma=sigma, border_corrupt=0,
                seed=derive_seed(seed, f"frame-noise-{j}", i) % (2 ** 32))
            encoded = encode_features(frame.semantics, codebook, noise).data
            mask = np.isin(frame.semantics,
                           [c for c, s in sigma_by_class.items() if s == sigma])
            data = encoded if data is None else np.where(mask[:, :, None],
                                                         encoded, data)
        if border_corrupt > 0:
            rng = np.random.default_rng(
                derive_seed(seed, "border", i) % (2 ** 32))
            b = border_corrupt
            border = np.zeros(frame.semantics.shape, dtype=bool)
            border[:b, :] = True
            border[-b:, :] = True
            border[:, :b] = True
            border[:, -b:] = True
            rand = rng.normal(size=(int(border.sum()), codebook.dim))
            rand /= np.linalg.norm(rand, axis=1, keepdims=True)
            data[border] = rand
        from .scenegen import FeatureMap

        frame.features = FeatureMap(data=data)
    return frames


@dataclass
class BenchmarkData:
    scene: Scene
    frames: list
    cloud: object
    codebook: Codebook
    cameras: list


def outward_ring(scene: Scene, n: int, radius: float, z: float,
                 target_radius: float, target_z: float, width: int,
                 height: int, focal_scale: float = 1.0) -> list:
    """Cameras on an interior ring facing outward at the room shell.

    Complements centroid-facing orbits: wall faces, corners, and the
    floor rim get fronto-parallel coverage, the way a handheld capture
    sweeps the perimeter of a room.
    """
    from .geometry import Camera, lookat_pose
    from .scenegen import _default_intrinsics

    intr = _default_intrinsics(width, height, focal_scale)
    center = scene.centroid
    cams = []
    for k in range(n):
        base = 2.0 * np.pi * k / n
        # Nudge around the nominal angle until the position is free.
        for delta_deg in (0, 8, -8, 16, -16, 24, -24, 32, -32):
            th = base + np.deg2rad(delta_deg)
            direction = np.array([np.cos(th), np.sin(th), 0.0])
            eye = center + radius * direction
            eye[2] = z
            if scene.containing_primitive(eye[None])[0] < 0:
                break
        else:
            raise RuntimeError("outward ring camera inside geometry")
        target = center + target_radius * direction
        target[2] = target_z
        cams.append(Camera(pose=lookat_pose(eye, target), **intr))
    return cams


def build_pocket_benchmark(seed: int = 0, n_views: int = 28,
                           width: int = 128, height: int = 96,
                           n_points: int = 4000, feature_dim: int = 8,
                           sigma: float = 0.12, border_corrupt: int = 8
                           ) -> BenchmarkData:
    scene = generate_scene(pocket_scene_spec(seed))
    # High ring looks over the room walls but cannot see into the pocket;
    # an outward sweep and a low inside ring cover walls and undersides;
    # close-ups linger on the visible objects and the pocket exterior the
    # way a handheld capture would. None of these can see into the pocket.
    n_hi = max(1, n_views - 2 * (n_views // 4) - n_views // 6)
    n_out = max(1, n_views // 4)
    n_lo = max(1, n_views // 6)
    n_under = max(1, n_views - n_hi - n_out - n_lo)
    cameras = (
        make_trajectory(scene, n_hi, kind="orbit", seed=seed, width=width,
                        height=height, radius=5.2, elevation=3.4,
                        focal_scale=1.2)
        + outward_ring(scene, n_out, radius=1.3, z=1.5, target_radius=3.9,
                       target_z=0.35, width=width, height=height)
        + make_trajectory(scene, n_lo, kind="orbit", seed=seed + 1,
                          width=width, height=height, radius=1.3,
                          elevation=0.9)
        # Under-ring inside the room, looking outward and slightly up:
        # covers the floating objects' undersides. Too low to see over
        # any pocket wall.
        + outward_ring(scene, n_under, radius=1.2, z=0.35,
                       target_radius=2.8, target_z=0.55, width=width,
                       height=height)
        + object_views(scene, [(2.2, 2.2, 1.1), (2.5, 6.0, 1.0),
                               (6.3, 6.3, 1.6)],
                       width=width, height=height, distance=2.0)
    )
    frames = render_views(scene, cameras)
    codebook = make_codebook(scene.n_classes, feature_dim,
                             seed=derive_seed(seed, "codebook"),
                             max_cosine=0.25, max_tries=100000)
    encode_frames(frames, codebook,
                  NoiseModel(sigma=sigma, border_corrupt=border_corrupt,
                             seed=derive_seed(seed, "noise") % (2 ** 32)))
    cloud = sample_point_cloud(scene, n_points, seed=derive_seed(seed, "cloud"))
    return BenchmarkData(scene=scene, frames=frames, cloud=cloud,
                         codebook=codebook, cameras=cameras)


def object_views(scene: Scene, targets: list, width: int, height: int,
                 distance: float = 1.6, z: float = None) -> list:
    """Close-up cameras aimed at specific world points from spread azimuths."""
    from .geometry import Camera, lookat_pose
    from .scenegen import _default_intrinsics

    intr = _default_intrinsics(width, height)
    cams = []
    for i, target in enumerate(targets):
        target = np.asarray(target, dtype=np.float64)
        for j, az in enumerate((40.0, 160.0, 280.0)):
            th = np.deg2rad(az + 17.0 * i)
            eye = target + distance * np.array([np.cos(th), np.sin(th), 0.6])
            if z is not None:
                eye[2] = z
            if scene.containing_primitive(eye[None])[0] >= 0:
                continue
            cams.append(Camera(pose=lookat_pose(eye, target), **intr))
    return cams


def build_three_class_benchmark(seed: int = 0, n_views: int = 16,
                                width: int = 128, height: int = 96,
                                n_points: int = 3000, feature_dim: int = 8
                                ) -> BenchmarkData:
    scene = generate_scene(three_class_scene_spec(seed))
    # Overhead orbit for global coverage, an outward sweep for walls and
    # corners, a low inward ring for undersides, and close-ups of each
    # object, the way a handheld capture lingers on the content.
    n_hi = max(1, n_views - n_views // 3 - n_views // 4)
    n_out = max(1, n_views // 3)
    n_lo = max(1, n_views - n_hi - n_out)
    cameras = (
        make_trajectory(scene, n_hi, kind="orbit", seed=seed, width=width,
                        height=height, radius=4.6, elevation=3.0,
                        focal_scale=1.2)
        + outward_ring(scene, n_out, radius=1.5, z=0.95, target_radius=2.9,
                       target_z=0.3, width=width, height=height)
        + make_trajectory(scene, n_lo, kind="orbit", seed=seed + 1,
                          width=width, height=height, radius=2.0,
                          elevation=0.9)
        + object_views(scene, [(2.0, 2.2, 1.7), (4.2, 3.8, 1.6)],
                       width=width, height=height, distance=1.9)
    )
    frames = render_views(scene, cameras)
    codebook = make_codebook(scene.n_classes, feature_dim,
                             seed=derive_seed(seed, "codebook"))
    encode_frames(frames, codebook, NoiseModel(sigma=0.0, border_corrupt=0,
                                               seed=0))
    cloud = sample_point_cloud(scene, n_points, seed=derive_seed(seed, "cloud"))
    return BenchmarkData(scene=scene, frames=frames, cloud=cloud,
                         codebook=codebook, cameras=cameras)


def build_heteronoise_benchmark(seed: int = 0, n_views: int = 60,
                                width: int = 96, height: int = 72,
                                n_points: int = 2500, feature_dim: int = 4,
                                sigma_low: float = 0.02,
                                sigma_high: float = 0.3) -> BenchmarkData:
    """Per-class feature noise alternates between two levels.

    The dimension stays small and the view count high so per-point
    covariances are comfortably full rank.
    """
    scene = generate_scene(heteronoise_scene_spec(seed))
    n_hi = n_views // 2
    n_mid = n_views // 4
    n_lo = n_views - n_hi - n_mid
    cameras = (
        make_trajectory(scene, n_hi, kind="orbit", seed=seed,
                        width=width, height=height, radius=4.6,
                        elevation=2.8)
        + make_trajectory(scene, n_mid, kind="orbit", seed=seed + 1,
                          width=width, height=height, radius=3.4,
                          elevation=1.4)
        # Under-ring: floating-object undersides and slab side faces.
        + make_trajectory(scene, n_lo, kind="orbit", seed=seed + 2,
                          width=width, height=height, radius=3.8,
                          elevation=0.72)
    )
    frames = render_views(scene, cameras)
    codebook = make_codebook(scene.n_classes, feature_dim,
                             seed=derive_seed(seed, "codebook"))
    sigma_by_class = {-1: sigma_low}
    for c in range(scene.n_classes):
        sigma_by_class[c] = sigma_high if c % 2 == 1 else sigma_low
    encode_frames_per_class(frames, codebook, sigma_by_class,
                            border_corrupt=0,
                            seed=derive_seed(seed, "noise"))
    cloud = sample_point_cloud(scene, n_points, seed=derive_seed(seed, "cloud"))
    return BenchmarkData(scene=scene, frames=frames, cloud=cloud,
                         codebook=codebook, cameras=cameras)
