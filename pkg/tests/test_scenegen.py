import numpy as np
import pytest

from openfield.scenegen import (Codebook, NoiseModel, Primitive, SceneSpec,
                                encode_features, generate_scene,
                                make_codebook, make_trajectory,
                                render_views, sample_point_cloud, trace_ray,
                                trace_rays)


class TestGenerateScene:
    def test_single_unit_box(self):
        spec = SceneSpec(bbox_min=(-1, -1, -1), bbox_max=(1, 1, 1),
                         primitives=[Primitive(shape="box", center=(0, 0, 0),
                                               extents=(1, 1, 1), class_id=0,
                                               albedo=(0.2, 0.4, 0.6))])
        scene = generate_scene(spec)
        assert len(scene.primitives) == 1
        assert scene.n_classes == 1
        lo, hi = scene.primitives[0].aabb()
        assert np.all(lo >= scene.bbox_min) and np.all(hi <= scene.bbox_max)

    def test_determinism(self, unit_sphere_scene):
        spec = SceneSpec(
            bbox_min=(-2, -2, -6), bbox_max=(2, 2, 2),
            primitives=[Primitive(shape="sphere", center=(0, 0, 0),
                                  radius=1.0, class_id=0,
                                  albedo=(1, 0, 0))])
        a = generate_scene(spec)
        b = generate_scene(spec)
        assert np.array_equal(a.bbox_min, b.bbox_min)
        assert np.array_equal(a.primitives[0].center, b.primitives[0].center)

    def test_zero_radius_rejected(self):
        with pytest.raises(ValueError):
            Primitive(shape="sphere", center=(0, 0, 0), radius=0.0,
                      class_id=0, albedo=(1, 1, 1))

    def test_noncontiguous_class_ids_rejected(self):
        spec = SceneSpec(bbox_min=(-1, -1, -1), bbox_max=(1, 1, 1),
                         primitives=[Primitive(shape="sphere",
                                               center=(0, 0, 0), radius=0.5,
                                               class_id=1,
                                               albedo=(1, 0, 0))])
        with pytest.raises(ValueError):
            generate_scene(spec)

    def test_primitive_outside_bbox_rejected(self):
        spec = SceneSpec(bbox_min=(-1, -1, -1), bbox_max=(1, 1, 1),
                         primitives=[Primitive(shape="sphere",
                                               center=(0.9, 0, 0), radius=0.5,
                                               class_id=0,
                                               albedo=(1, 0, 0))])
        with pytest.raises(ValueError):
            generate_scene(spec)


class TestTraceRay:
    def test_analytic_sphere_distance(self, unit_sphere_scene):
        hit = trace_ray(unit_sphere_scene, (0, 0, -5), (0, 0, 1))
        assert hit is not None
        dist, class_id, albedo = hit
        assert dist == pytest.approx(4.0, abs=1e-12)
        assert class_id == 0

    def test_miss_returns_none(self, unit_sphere_scene):
        assert trace_ray(unit_sphere_scene, (0, 0, -5), (0, 0, -1)) is None

    def test_non_unit_direction_rejected(self, unit_sphere_scene):
        with pytest.raises(ValueError):
            trace_ray(unit_sphere_scene, (0, 0, -5), (0, 0, 2))

    def test_against_dense_marching_oracle(self, two_box_scene):
        # Brute-force: march the ray at 1e-4 steps and find the first point
        # inside any primitive; trace distance must agree within 1e-3.
        rng = np.random.default_rng(42)
        step = 1e-4
        checked = 0
        for _ in range(12):
            origin = np.array([rng.uniform(0.2, 3.8), rng.uniform(0.2, 3.8),
                               rng.uniform(2.2, 2.9)])
            target = np.array([rng.uniform(1.0, 3.0), rng.uniform(1.0, 3.0),
                               rng.uniform(0.0, 1.4)])
            direction = target - origin
            direction /= np.linalg.norm(direction)
            ts = np.arange(step, 6.0, step)
            points = origin[None, :] + ts[:, None] * direction[None, :]
            inside = two_box_scene.containing_primitive(points) >= 0
            hit = trace_ray(two_box_scene, origin, direction)
            if not np.any(inside):
                if hit is not None:
                    assert hit[0] > ts[-1] - 1e-3
                continue
            t_march = ts[np.argmax(inside)]
            assert hit is not None
            assert abs(hit[0] - t_march) < 1e-3
            checked += 1
        assert checked >= 5


class TestRenderViews:
    def test_background_only_frame(self, unit_sphere_scene):
        cam = make_trajectory(unit_sphere_scene, 1, kind="orbit",
                              width=32, height=24, radius=3.0,
                              elevation=0.0)[0]
        # Re-aim the camera away from everything.
        from openfield.geometry import Camera, lookat_pose

        away = Camera(pose=lookat_pose(cam.position,
                                       cam.position + np.array([0, 0, 50.0])),
                      fx=cam.fx, fy=cam.fy, cx=cam.cx, cy=cam.cy,
                      width=cam.width, height=cam.height)
        frame = render_views(unit_sphere_scene, [away])[0]
        assert np.all(frame.depth == 0.0)
        assert np.all(frame.semantics == -1)
        assert np.allclose(frame.rgb, unit_sphere_scene.background_color)

    def test_center_pixel_class(self, unit_sphere_scene):
        from openfield.geometry import Camera, lookat_pose

        cam = Camera(pose=lookat_pose((0, 0, -4), (0, 0, 0), (0, 1, 0)),
                     fx=24.0, fy=24.0, cx=16.0, cy=12.0, width=32, height=24)
        frame = render_views(unit_sphere_scene, [cam])[0]
        assert frame.semantics[12, 16] == 0
        assert frame.depth[12, 16] == pytest.approx(3.0, abs=1e-9)

    def test_depth_matches_per_pixel_trace(self, two_box_scene):
        from openfield.geometry import Camera, lookat_pose, pixel_directions

        cam = Camera(pose=lookat_pose((2.0, -0.5, 2.2), (2.0, 2.0, 0.8)),
                     fx=20.0, fy=20.0, cx=12.0, cy=9.0, width=24, height=18)
        frame = render_views(two_box_scene, [cam])[0]
        forward = cam.forward
        for row in range(0, 18, 3):
            for col in range(0, 24, 3):
                d = pixel_directions(cam, np.array([row]), np.array([col]))[0]
                hit = trace_ray(two_box_scene, cam.position, d)
                if hit is None:
                    assert frame.depth[row, col] == 0.0
                    assert frame.semantics[row, col] == -1
                else:
                    expected = hit[0] * float(d @ forward)
                    assert frame.depth[row, col] == pytest.approx(expected,
                                                                  abs=1e-12)
                    assert frame.semantics[row, col] == hit[1]


class TestMakeTrajectory:
    def test_orbit_spacing_and_lookat(self, two_box_scene):
        cams = make_trajectory(two_box_scene, 4, kind="orbit", seed=0)
        centroid = two_box_scene.centroid
        positions = np.array([c.position for c in cams])
        # 90 degree spacing: consecutive position vectors are orthogonal
        # around the centroid axis.
        rel = positions[:, :2] - centroid[None, :2]
        for i in range(4):
            a = rel[i] / np.linalg.norm(rel[i])
            b = rel[(i + 1) % 4] / np.linalg.norm(rel[(i + 1) % 4])
            assert abs(a @ b) < 1e-9
        for cam in cams:
            to_centroid = centroid - cam.position
            to_centroid /= np.linalg.norm(to_centroid)
            np.testing.assert_allclose(cam.forward, to_centroid, atol=1e-9)

    def test_same_seed_identical(self, two_box_scene):
        a = make_trajectory(two_box_scene, 5, kind="random_interior", seed=9)
        b = make_trajectory(two_box_scene, 5, kind="random_interior", seed=9)
        for ca, cb in zip(a, b):
            np.testing.assert_array_equal(ca.pose, cb.pose)

    def test_positions_outside_primitives(self, two_box_scene):
        for kind in ("orbit", "random_interior"):
            cams = make_trajectory(two_box_scene, 20, kind=kind, seed=3)
            eyes = np.array([c.position for c in cams])
            assert np.all(two_box_scene.containing_primitive(eyes) < 0)

    def test_n_views_validated(self, two_box_scene):
        with pytest.raises(ValueError):
            make_trajectory(two_box_scene, 0)


class TestCodebook:
    def test_unit_norm_and_separation(self):
        cb = make_codebook(6, 12, seed=0)
        norms = np.linalg.norm(cb.embeddings, axis=1)
        np.testing.assert_allclose(norms, 1.0, atol=1e-9)
        gram = cb.embeddings @ cb.embeddings.T
        off_diag = gram[~np.eye(6, dtype=bool)]
        assert np.all(off_diag < 0.5)

    def test_lookup_background(self):
        cb = make_codebook(3, 8, seed=1)
        out = cb.lookup(np.array([[0, -1], [2, 1]]))
        np.testing.assert_array_equal(out[0, 1], cb.background_embedding)
        np.testing.assert_array_equal(out[1, 0], cb.embeddings[2])

    def test_validation_rejects_duplicates(self):
        v = np.zeros(4)
        v[0] = 1.0
        with pytest.raises(ValueError):
            Codebook(embeddings=np.array([v, v]),
                     background_embedding=np.array([0, 1, 0, 0.0]))


class TestEncodeFeatures:
    def test_zero_noise_is_exact(self):
        cb = make_codebook(3, 8, seed=2)
        sem = np.array([[0, 1], [2, -1]])
        fm = encode_features(sem, cb, NoiseModel(sigma=0.0, border_corrupt=0))
        np.testing.assert_array_equal(fm.data[0, 0], cb.embeddings[0])
        np.testing.assert_array_equal(fm.data[1, 1], cb.background_embedding)

    def test_unknown_class_rejected(self):
        cb = make_codebook(2, 8, seed=2)
        with pytest.raises(ValueError):
            encode_features(np.array([[5]]), cb, NoiseModel())

    def test_noisy_features_stay_nearest_to_true_class(self):
        # Monte-Carlo over 1e4 pixels: mean cosine to the true class beats
        # the cosine to every other class.
        cb = make_codebook(4, 16, seed=3)
        sem = np.full((100, 100), 1)
        fm = encode_features(sem, cb, NoiseModel(sigma=0.1, border_corrupt=0,
                                                 seed=4))
        flat = fm.data.reshape(-1, 16)
        sims = flat @ cb.embeddings.T
        means = sims.mean(axis=0)
        assert np.argmax(means) == 1
        assert means[1] > np.max(np.delete(means, 1))

    def test_unit_norm_invariant(self):
        cb = make_codebook(3, 8, seed=5)
        sem = np.zeros((20, 30), dtype=int)
        fm = encode_features(sem, cb, NoiseModel(sigma=0.3, border_corrupt=4,
                                                 seed=6))
        norms = np.linalg.norm(fm.data, axis=2)
        np.testing.assert_allclose(norms, 1.0, atol=1e-5)

    def test_border_corruption(self):
        cb = make_codebook(2, 16, seed=7)
        sem = np.zeros((40, 40), dtype=int)
        fm = encode_features(sem, cb, NoiseModel(sigma=0.0, border_corrupt=10,
                                                 seed=8))
        corner = fm.data[0, 0]
        assert not np.allclose(corner, cb.embeddings[0], atol=1e-3)
        # Interior pixels untouched.
        np.testing.assert_array_equal(fm.data[20, 20], cb.embeddings[0])


class TestSamplePointCloud:
    def test_sphere_points_on_surface(self, unit_sphere_scene):
        cloud = sample_point_cloud(unit_sphere_scene, 1000, seed=0)
        dist = np.linalg.norm(cloud.positions, axis=1)
        np.testing.assert_allclose(dist, 1.0, atol=1e-6)
        assert np.all(cloud.class_ids == 0)

    def test_area_proportional_histogram(self, two_box_scene):
        # Analytic surface areas give the expected class mix.
        cloud = sample_point_cloud(two_box_scene, 100000, seed=1)
        areas = np.zeros(2)
        for prim in two_box_scene.primitives:
            areas[prim.class_id] += prim.surface_area()
        expected = areas / areas.sum()
        counts = np.bincount(cloud.class_ids, minlength=2) / len(cloud)
        np.testing.assert_allclose(counts, expected, rtol=0.05)

    def test_determinism(self, two_box_scene):
        a = sample_point_cloud(two_box_scene, 500, seed=3)
        b = sample_point_cloud(two_box_scene, 500, seed=3)
        np.testing.assert_array_equal(a.positions, b.positions)
        np.testing.assert_array_equal(a.class_ids, b.class_ids)

    def test_inside_bbox(self, two_box_scene):
        cloud = sample_point_cloud(two_box_scene, 2000, seed=4)
        assert np.all(cloud.positions >= two_box_scene.bbox_min - 1e-9)
        assert np.all(cloud.positions <= two_box_scene.bbox_max + 1e-9)
