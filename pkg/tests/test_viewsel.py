import math

import numpy as np
import pytest

from openfield.field import FieldConfig, init_params
from openfield.fusion import PointStats
from openfield.scenegen import (LabeledPointCloud, NoiseModel, make_codebook)
from openfield.viewsel import (REJECTION_INSIDE, REJECTION_OCCLUDED,
                               ViewSelConfig, lookat, normalize_uncertainty,
                               propose_views, realize_views, sample_targets)


class TestNormalizeUncertainty:
    def test_rank_map(self):
        out = normalize_uncertainty(np.array([-3.0, 0.0, 5.0]))
        np.testing.assert_allclose(out, [0.0, 0.5, 1.0])

    def test_ties_broken_by_index(self):
        out = normalize_uncertainty(np.zeros(3))
        np.testing.assert_allclose(out, [0.0, 0.5, 1.0])

    def test_invalid_points_get_max_priority(self):
        log_u = np.array([0.0, math.inf, -2.0])
        valid = np.array([True, False, True])
        out = normalize_uncertainty(log_u, valid)
        assert out[1] == 1.0
        np.testing.assert_allclose(out[[2, 0]], [0.0, 1.0])

    def test_single_valid_point(self):
        out = normalize_uncertainty(np.array([3.0]))
        assert out[0] == 1.0

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(0)
        log_u = rng.normal(size=40)
        base = normalize_uncertainty(log_u)
        for transform in (np.exp, lambda v: 3.0 * v + 7.0,
                          lambda v: v ** 3):
            np.testing.assert_array_equal(
                normalize_uncertainty(transform(log_u)), base)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            normalize_uncertainty(np.array([]))


class TestSampleTargets:
    def _cloud(self, n):
        return LabeledPointCloud(positions=np.zeros((n, 3)),
                                 class_ids=np.zeros(n, dtype=int))

    def test_only_certain_point_selected(self):
        u = np.zeros(10)
        u[4] = 1.0
        rng = np.random.default_rng(1)
        picks = sample_targets(self._cloud(10), u, 20, rng)
        assert len(picks) == 20
        assert set(picks) == {4}

    def test_all_zero_returns_empty(self):
        rng = np.random.default_rng(2)
        picks = sample_targets(self._cloud(5), np.zeros(5), 3, rng)
        assert picks == []

    def test_acceptance_frequency_proportional(self):
        # Monte-Carlo: per-point acceptance frequency tracks u within 3
        # sigma of the binomial noise.
        u = np.array([0.1, 0.3, 0.5, 0.9])
        rng = np.random.default_rng(3)
        picks = sample_targets(self._cloud(4), u, 100000, rng,
                               retry_factor=10)
        picks = np.asarray(picks)
        n_draws = 100000 * 10 if len(picks) < 100000 else None
        # Count acceptances per point; expected ratio follows u directly.
        counts = np.bincount(picks, minlength=4).astype(float)
        ratios = counts / counts.sum()
        expected = u / u.sum()
        sigma = np.sqrt(expected * (1 - expected) / counts.sum())
        assert np.all(np.abs(ratios - expected) < 3 * sigma + 1e-3)

    def test_invalid_u_rejected(self):
        rng = np.random.default_rng(4)
        with pytest.raises(ValueError):
            sample_targets(self._cloud(2), np.array([0.5, 1.5]), 1, rng)


class TestLookat:
    def test_canonical(self):
        pose = lookat((0, 0, 0), (0, 0, -1), (0, 1, 0))
        np.testing.assert_allclose(pose[:3, 0], [1, 0, 0], atol=1e-12)
        np.testing.assert_allclose(pose[:3, 1], [0, 1, 0], atol=1e-12)
        np.testing.assert_allclose(-pose[:3, 2], [0, 0, -1], atol=1e-12)

    def test_orthonormality_random(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            eye = rng.normal(size=3) * 3
            target = rng.normal(size=3) * 3
            if np.linalg.norm(target - eye) < 1e-6:
                continue
            rot = lookat(eye, target)[:3, :3]
            np.testing.assert_allclose(rot @ rot.T, np.eye(3), atol=1e-12)
            assert np.linalg.det(rot) == pytest.approx(1.0, abs=1e-9)

    def test_target_on_forward_axis(self):
        eye = np.array([1.0, -2.0, 0.5])
        target = np.array([4.0, 2.0, 1.5])
        pose = lookat(eye, target)
        t_cam = pose[:3, :3].T @ (target - eye)
        dist = np.linalg.norm(target - eye)
        np.testing.assert_allclose(t_cam, [0, 0, -dist], atol=1e-9)


def slab_field():
    """Hand-built field: an opaque wall at x in [0.9, 1.3]."""
    config = FieldConfig(bbox_min=np.zeros(3),
                         bbox_max=np.array([2.0, 2.0, 2.0]),
                         density_resolution=(21, 11, 11),
                         feature_resolution=(4, 4, 4), feature_dim=4,
                         background_color=np.zeros(3))
    params = init_params(config, seed=0)
    params.density[:] = -20.0
    # Lattice planes x index 9..13 span x in [0.9, 1.3].
    params.density[9:14, :, :] = 80.0
    return params


def stats_for(cloud, log_u):
    stats = []
    for value in log_u:
        st = PointStats(dim=4, count=10, mean=np.zeros(4))
        st.log_uncertainty = value
        st.underobserved = False
        stats.append(st)
    return stats


class TestProposeViews:
    def test_free_space_targets_accepted(self):
        params = slab_field()
        cloud = LabeledPointCloud(
            positions=np.array([[0.4, 1.0, 1.0], [0.5, 0.6, 1.2]]),
            class_ids=np.zeros(2, dtype=int))
        config = ViewSelConfig(offset_distance=0.2,
                               position_noise_std=0.005, n_proposals=8,
                               density_threshold=5.0,
                               transmittance_threshold=0.5, seed=0)
        proposals = propose_views(params, cloud,
                                  stats_for(cloud, [0.0, 1.0]), config)
        assert len(proposals) == 8
        accepted = [p for p in proposals if p.accepted]
        assert len(accepted) >= 6
        for p in accepted:
            rot = p.pose[:3, :3]
            np.testing.assert_allclose(rot @ rot.T, np.eye(3), atol=1e-10)
            assert np.linalg.det(rot) == pytest.approx(1.0, abs=1e-9)

    def test_position_inside_geometry_rejected(self):
        params = slab_field()
        # Target right at the wall front face: offset placements that land
        # inside the dense slab must be rejected.
        cloud = LabeledPointCloud(positions=np.array([[1.1, 1.0, 1.0]]),
                                  class_ids=np.zeros(1, dtype=int))
        config = ViewSelConfig(offset_distance=0.1,
                               position_noise_std=0.01, n_proposals=24,
                               density_threshold=5.0,
                               transmittance_threshold=0.5, seed=1)
        proposals = propose_views(params, cloud, stats_for(cloud, [0.0]),
                                  config)
        reasons = {p.rejection for p in proposals}
        assert REJECTION_INSIDE in reasons

    def test_occluded_target_rejected(self):
        params = slab_field()
        # Camera positions on the far side of the wall from the target.
        cloud = LabeledPointCloud(positions=np.array([[0.4, 1.0, 1.0]]),
                                  class_ids=np.zeros(1, dtype=int))
        config = ViewSelConfig(offset_distance=1.2,
                               position_noise_std=0.01, n_proposals=40,
                               density_threshold=5.0,
                               transmittance_threshold=0.5, seed=2)
        proposals = propose_views(params, cloud, stats_for(cloud, [0.0]),
                                  config)
        occluded = [p for p in proposals
                    if p.rejection == REJECTION_OCCLUDED]
        assert occluded
        for p in occluded:
            # The straight segment to the target crosses the dense slab.
            from openfield.geometry import intersect_aabb

            seg = p.target - p.position
            length = np.linalg.norm(seg)
            t0, t1 = intersect_aabb(p.position[None], (seg / length)[None],
                                    (0.9, 0.0, 0.0), (1.3, 2.0, 2.0))
            assert t0[0] < t1[0] and t0[0] < length and t1[0] > 0

    def test_threshold_relaxation_is_monotone(self):
        params = slab_field()
        rng_positions = np.random.default_rng(7).uniform(
            0.2, 1.8, size=(30, 3))
        cloud = LabeledPointCloud(positions=rng_positions,
                                  class_ids=np.zeros(30, dtype=int))
        stats = stats_for(cloud, np.linspace(-3, 3, 30))

        def accepted_keys(density_threshold):
            config = ViewSelConfig(offset_distance=0.3,
                                   position_noise_std=0.02,
                                   n_proposals=20,
                                   density_threshold=density_threshold,
                                   transmittance_threshold=0.3, seed=5)
            proposals = propose_views(params, cloud, stats, config)
            return {i for i, p in enumerate(proposals) if p.accepted}

        strict = accepted_keys(1.0)
        relaxed = accepted_keys(100.0)
        assert strict <= relaxed


class TestRealizeViews:
    def test_zero_proposals_empty(self, two_box_scene):
        codebook = make_codebook(two_box_scene.n_classes, 4, seed=0)
        frames = realize_views(two_box_scene, [], codebook, NoiseModel(),
                               dict(fx=16, fy=16, cx=16, cy=12, width=32,
                                    height=24))
        assert frames == []

    def test_occluded_object_appears_in_new_frame(self, two_box_scene):
        # A pose aimed straight down at the small box: its class shows up.
        from openfield.viewsel import ViewProposal

        codebook = make_codebook(two_box_scene.n_classes, 4, seed=1)
        target = np.array([2.0, 2.0, 1.4])
        eye = np.array([2.0, 2.0, 2.6])
        proposal = ViewProposal(target=target, position=eye,
                                pose=lookat(eye, target, (0, 1, 0)),
                                source_point=0, accepted=True)
        frames = realize_views(two_box_scene, [proposal], codebook,
                               NoiseModel(sigma=0.05, seed=3),
                               dict(fx=16.0, fy=16.0, cx=16.0, cy=12.0,
                                    width=32, height=24))
        assert len(frames) == 1
        assert 1 in np.unique(frames[0].semantics)
        assert frames[0].features is not None
        norms = np.linalg.norm(frames[0].features.data, axis=2)
        np.testing.assert_allclose(norms, 1.0, atol=1e-5)
