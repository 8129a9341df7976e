"""Uncertainty-guided novel camera view proposal.

Cloud points are ranked by fused uncertainty; targets are drawn by
rejection (accept index i when a uniform draw falls below its normalized
uncertainty), a camera position is placed at a small random offset from
each target, and a candidate is kept only if the field is free at the
camera position and the target is actually reachable along the
connecting segment. Accepted proposals are realized by rendering
ground-truth views at the proposed poses and encoding stub features,
which stands in for running a 2D encoder on field-rendered images.
"""

import csv
from dataclasses import dataclass, field as dc_field
from typing import Optional

import numpy as np

from .field import FieldParams, query_batch
from .geometry import Camera, lookat_pose
from .scenegen import NoiseModel, encode_features, render_views
from .seeding import derive_rng

REJECTION_NONE = "none"
REJECTION_INSIDE = "inside_geometry"
REJECTION_OCCLUDED = "occluded_target"


@dataclass
class ViewSelConfig:
    offset_distance: float          # world units from target to camera
    position_noise_std: float
    n_proposals: int = 16
    density_threshold: float = 5.0
    transmittance_threshold: float = 0.5
    up_hint: np.ndarray = dc_field(
        default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    target_standoff: float = 0.0    # stop the occlusion ray short of t
    occlusion_samples: int = 64
    check_transmittance: bool = True
    seed: int = 0

    def __post_init__(self):
        self.up_hint = np.asarray(self.up_hint, dtype=np.float64)
        if self.offset_distance <= 0:
            raise ValueError("offset_distance must be positive")
        if self.density_threshold <= 0 or not (
                0 < self.transmittance_threshold < 1):
            raise ValueError("invalid rejection thresholds")


@dataclass
class ViewProposal:
    target: np.ndarray
    position: np.ndarray
    pose: Optional[np.ndarray]
    source_point: int
    accepted: bool
    rejection: str = REJECTION_NONE


def normalize_uncertainty(log_u: np.ndarray,
                          valid_mask: Optional[np.ndarray] = None
                          ) -> np.ndarray:
    """Empirical-rank normalization of log uncertainties to [0, 1].

    Invalid points (never or singly observed) get 1, the highest
    priority. Ties are broken by index via a stable sort, so equal inputs
    still span [0, 1]. Any monotone transform of the input leaves the
    output unchanged.
    """
    log_u = np.asarray(log_u, dtype=np.float64)
    if log_u.size == 0:
        raise ValueError("normalize_uncertainty needs at least one point")
    if valid_mask is None:
        valid_mask = np.isfinite(log_u) | (log_u == -np.inf)
    out = np.ones(len(log_u))
    idx = np.nonzero(valid_mask)[0]
    n_valid = len(idx)
    if n_valid == 0:
        return out
    if n_valid == 1:
        out[idx] = 1.0
        return out
    order = np.argsort(log_u[idx], kind="stable")
    ranks = np.empty(n_valid)
    ranks[order] = np.arange(n_valid)
    out[idx] = ranks / (n_valid - 1)
    return out


def sample_targets(cloud, u_norm: np.ndarray, n_wanted: int, rng,
                   retry_factor: int = 100):
    """Rejection-sample point indices with acceptance probability u_norm.

    Draws a uniform index and x ~ U[0, 1], accepting when x < u_norm[i].
    Stops after n_wanted acceptances or retry_factor * n_wanted draws,
    returning whatever was accepted by then.
    """
    u_norm = np.asarray(u_norm, dtype=np.float64)
    if np.any(u_norm < 0) or np.any(u_norm > 1):
        raise ValueError("u_norm must lie in [0, 1]")
    accepted = []
    for _ in range(retry_factor * n_wanted):
        if len(accepted) >= n_wanted:
            break
        i = int(rng.integers(0, len(u_norm)))
        if rng.uniform() < u_norm[i]:
            accepted.append(i)
    return accepted


def lookat(eye, target, up_hint=(0.0, 0.0, 1.0)) -> np.ndarray:
    """4x4 camera-to-world pose with -z aimed from eye at target."""
    return lookat_pose(eye, target, up_hint)


def _segment_transmittance(params: FieldParams, start: np.ndarray,
                           end: np.ndarray, n_samples: int) -> float:
    """Beer-Lambert transmittance of the field along a straight segment."""
    seg = end - start
    length = float(np.linalg.norm(seg))
    if length <= 0:
        return 1.0
    frac = (np.arange(n_samples) + 0.5) / n_samples
    pts = start[None, :] + frac[:, None] * seg[None, :]
    sigma, _, _ = query_batch(params, pts)
    return float(np.exp(-np.sum(sigma) * length / n_samples))


def propose_views(params: FieldParams, cloud, stats_list: list,
                  config: ViewSelConfig, rng=None) -> list:
    """Generate candidate camera poses aimed at high-uncertainty points.

    Each target gets its own derived random stream, so relaxing a
    rejection threshold can only extend existing candidate positions,
    never reshuffle them.
    """
    log_u = np.array([st.log_uncertainty for st in stats_list])
    valid = np.array([st.count >= 2 for st in stats_list])
    u_norm = normalize_uncertainty(log_u, valid)

    base_rng = rng if rng is not None else derive_rng(config.seed, "viewsel")
    targets = sample_targets(cloud, u_norm, config.n_proposals, base_rng)

    proposals = []
    for order, point_idx in enumerate(targets):
        t_rng = derive_rng(config.seed, "viewsel-target", order)
        target = cloud.positions[point_idx]
        direction = t_rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        position = (target + config.offset_distance * direction
                    + t_rng.normal(0.0, config.position_noise_std, size=3))

        sigma, _, _ = query_batch(params, position[None])
        if sigma[0] > config.density_threshold:
            proposals.append(ViewProposal(
                target=target, position=position, pose=None,
                source_point=point_idx, accepted=False,
                rejection=REJECTION_INSIDE))
            continue

        if config.check_transmittance:
            end = target
            gap = np.linalg.norm(target - position)
            if config.target_standoff > 0 and gap > config.target_standoff:
                end = target + (position - target) * (
                    config.target_standoff / gap)
            trans = _segment_transmittance(params, position, end,
                                           config.occlusion_samples)
            if trans < config.transmittance_threshold:
                proposals.append(ViewProposal(
                    target=target, position=position, pose=None,
                    source_point=point_idx, accepted=False,
                    rejection=REJECTION_OCCLUDED))
                continue

        pose = lookat(position, target, config.up_hint)
        proposals.append(ViewProposal(
            target=target, position=position, pose=pose,
            source_point=point_idx, accepted=True))
    return proposals


def realize_views(scene, proposals: list, codebook, noise: NoiseModel,
                  intrinsics: dict) -> list:
    """Render ground-truth frames at accepted proposal poses.

    This is the desk-scale stand-in for rendering from the field and
    running the 2D encoder on the result: the oracle renders semantics at
    the same pose and the stub encoder converts them to features. Each
    frame gets an independent noise stream derived from noise.seed.
    """
    accepted = [p for p in proposals if p.accepted]
    if not accepted:
        return []
    cameras = [Camera(pose=p.pose, **intrinsics) for p in accepted]
    frames = render_views(scene, cameras)
    for i, frame in enumerate(frames):
        frame_noise = NoiseModel(
            sigma=noise.sigma, border_corrupt=noise.border_corrupt,
            seed=int(derive_rng(noise.seed, "novel-frame", i).integers(2**32)))
        frame.features = encode_features(frame.semantics, codebook,
                                         frame_noise)
    return frames


def write_proposals(path, proposals: list):
    """CSV dump: target, position, accepted flag, reason, 16 pose floats."""
    header = (["tx", "ty", "tz", "px", "py", "pz", "accepted", "rejection"]
              + [f"pose{i}" for i in range(16)])
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for p in proposals:
            pose = (p.pose.ravel() if p.pose is not None else np.zeros(16))
            writer.writerow(
                [repr(float(v)) for v in p.target]
                + [repr(float(v)) for v in p.position]
                + [int(p.accepted), p.rejection]
                + [repr(float(v)) for v in pose])
