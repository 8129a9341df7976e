"""Pipeline orchestration: staged commands over an output directory.

Each stage writes its artifacts plus a manifest entry (path and content
hash); downstream stages verify the hashes of everything they consume,
so a stale or hand-edited artifact fails loudly. Config is one JSON
document with per-command sections; unknown keys are rejected.
"""

import csv
import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import formats
from .evaluation import (build_query_set, query_set_from_codebook,
                         relevancy_map, score, segment_render_project,
                         segment_sample, write_result_csv)
from .field import FieldConfig, init_params
from .fusion import error_and_correlation, fuse
from .scenegen import (Codebook, LabeledPointCloud, NoiseModel,
                       generate_scene, make_codebook, make_trajectory,
                       render_views, sample_point_cloud)
from .seeding import derive_seed
from .train import TrainConfig, train, write_training_log
from .viewsel import ViewSelConfig, propose_views, realize_views, write_proposals
from .benchmarks import encode_frames

MANIFEST_NAME = "manifest.json"


class ConfigError(ValueError):
    """Invalid or inconsistent pipeline configuration."""


class MissingArtifact(RuntimeError):
    """An upstream stage has not produced a required artifact."""


@dataclass
class GenerateConfig:
    n_views: int = 200
    trajectory: str = "orbit"
    width: int = 128
    height: int = 96
    orbit_radius: float = None
    orbit_elevation: float = None
    n_points: int = 4000
    feature_dim: int = 16
    noise_sigma: float = 0.1
    border_corrupt: int = 10


@dataclass
class TrainSection:
    density_resolution: tuple = (40, 40, 28)
    feature_resolution: tuple = (32, 32, 24)
    lambda_open: float = 1.0
    lambda_depth: float = 0.1
    border_margin: int = 10
    batch_rays: int = 1024
    iterations: int = 1500
    learning_rate: float = 5e-2
    huber_beta: float = 0.1
    n_samples: int = 64
    include_novel: bool = False


@dataclass
class FuseSection:
    depth_tolerance: float = None   # default: 2x mean voxel width
    estimator: str = "population"
    dump_covariance: bool = False
    include_novel: bool = False


@dataclass
class ProposeSection:
    n_proposals: int = 48
    offset_distance: float = None       # default: 15% of bbox diagonal
    position_noise_std: float = None    # default: 2% of bbox diagonal
    density_threshold: float = 5.0
    transmittance_threshold: float = 0.5
    check_transmittance: bool = True
    realize: bool = True


@dataclass
class EvalSection:
    mode: str = "render_project"
    depth_tolerance: float = None
    include_novel: bool = True
    include_absent: bool = False


@dataclass
class QuerySection:
    label: str = None
    embedding_file: str = None
    cameras: tuple = (0,)
    threshold: float = 0.5


@dataclass
class AblateSection:
    repetitions: int = 3
    min_novel_gain: float = 0.02
    n_views: int = 48
    width: int = 96
    height: int = 72
    n_points: int = 4000
    feature_dim: int = 8
    noise_sigma: float = 0.04
    border_corrupt: int = 8
    density_resolution: tuple = (40, 40, 26)
    feature_resolution: tuple = (32, 32, 20)
    iterations: int = 600
    batch_rays: int = 1024
    n_samples: int = 56
    learning_rate: float = 5e-2
    lambda_open: float = 1.0
    lambda_depth: float = 0.1
    n_proposals: int = 24


@dataclass
class PipelineConfig:
    scene_spec: str = None
    output_dir: str = "out"
    seed: int = 0
    deterministic: bool = False
    generate: GenerateConfig = dc_field(default_factory=GenerateConfig)
    train: TrainSection = dc_field(default_factory=TrainSection)
    fuse: FuseSection = dc_field(default_factory=FuseSection)
    propose: ProposeSection = dc_field(default_factory=ProposeSection)
    eval: EvalSection = dc_field(default_factory=EvalSection)
    query: QuerySection = dc_field(default_factory=QuerySection)
    ablate: AblateSection = dc_field(default_factory=AblateSection)


_SECTION_TYPES = {
    "generate": GenerateConfig,
    "train": TrainSection,
    "fuse": FuseSection,
    "propose": ProposeSection,
    "eval": EvalSection,
    "query": QuerySection,
    "ablate": AblateSection,
}


def _build_section(cls, doc: dict, where: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(doc) - names
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    kwargs = {}
    for key, value in doc.items():
        if isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    return cls(**kwargs)


def load_config(path) -> PipelineConfig:
    with open(path) as f:
        doc = json.load(f)
    return config_from_dict(doc)


def config_from_dict(doc: dict) -> PipelineConfig:
    top_names = {f.name for f in dataclasses.fields(PipelineConfig)}
    unknown = set(doc) - top_names
    if unknown:
        raise ConfigError(f"unknown top-level config keys: {sorted(unknown)}")
    cfg = PipelineConfig()
    for key, value in doc.items():
        if key in _SECTION_TYPES:
            setattr(cfg, key, _build_section(_SECTION_TYPES[key], value,
                                             where=key))
        else:
            setattr(cfg, key, value)
    return cfg


# ---------------------------------------------------------------------------
# Manifest

def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _manifest_path(out_dir) -> str:
    return os.path.join(out_dir, MANIFEST_NAME)


def load_manifest(out_dir) -> dict:
    path = _manifest_path(out_dir)
    if not os.path.exists(path):
        return {"artifacts": {}}
    with open(path) as f:
        return json.load(f)


def record_artifacts(out_dir, stage: str, paths: list):
    manifest = load_manifest(out_dir)
    for path in paths:
        rel = os.path.relpath(path, out_dir)
        manifest["artifacts"][rel] = {
            "stage": stage,
            "sha256": _sha256(path),
        }
    with open(_manifest_path(out_dir), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def require_artifact(out_dir, rel: str, stage_hint: str) -> str:
    """Resolve an artifact path, verifying existence and content hash."""
    manifest = load_manifest(out_dir)
    entry = manifest["artifacts"].get(rel)
    path = os.path.join(out_dir, rel)
    if entry is None or not os.path.exists(path):
        raise MissingArtifact(
            f"missing artifact {rel!r}: run the {stage_hint!r} stage first")
    actual = _sha256(path)
    if actual != entry["sha256"]:
        raise MissingArtifact(
            f"artifact {rel!r} does not match its manifest hash; rerun "
            f"the {entry['stage']!r} stage")
    return path


# ---------------------------------------------------------------------------
# Stages

def _float_list(values):
    return [float(v) for v in values]


def stage_generate(cfg: PipelineConfig) -> list:
    """Scene, trajectory, frames, features, cloud, codebook to disk."""
    if cfg.scene_spec is None:
        raise ConfigError("config.scene_spec is required")
    if not os.path.exists(cfg.scene_spec):
        raise ConfigError(f"scene spec file not found: {cfg.scene_spec}")
    spec = formats.read_scene_spec(cfg.scene_spec)
    scene = generate_scene(spec)
    g = cfg.generate

    os.makedirs(cfg.output_dir, exist_ok=True)
    cameras = make_trajectory(
        scene, g.n_views, kind=g.trajectory, seed=derive_seed(cfg.seed, "traj"),
        width=g.width, height=g.height, radius=g.orbit_radius,
        elevation=g.orbit_elevation)
    frames = render_views(scene, cameras)
    codebook = make_codebook(scene.n_classes, g.feature_dim,
                             seed=derive_seed(cfg.seed, "codebook"))
    encode_frames(frames, codebook,
                  NoiseModel(sigma=g.noise_sigma,
                             border_corrupt=g.border_corrupt,
                             seed=derive_seed(cfg.seed, "noise") % (2 ** 32)))
    cloud = sample_point_cloud(scene, g.n_points,
                               seed=derive_seed(cfg.seed, "cloud"))

    out = cfg.output_dir
    paths = []
    spec_path = os.path.join(out, "scene.json")
    formats.write_scene_spec(spec_path, spec)
    paths.append(spec_path)

    poses_path = os.path.join(out, "poses.txt")
    formats.write_poses(poses_path, cameras)
    paths.append(poses_path)

    frames_dir = os.path.join(out, "frames")
    os.makedirs(frames_dir, exist_ok=True)
    for i, fr in enumerate(frames):
        rgb_path = os.path.join(frames_dir, f"rgb_{i:04d}.ppm")
        formats.write_ppm(rgb_path, fr.rgb)
        depth_path = os.path.join(frames_dir, f"depth_{i:04d}.ofmp")
        formats.write_ofmp(depth_path, fr.depth, half_precision=False)
        sem_path = os.path.join(frames_dir, f"sem_{i:04d}.ofmp")
        formats.write_ofmp(sem_path, fr.semantics.astype(np.float32),
                           half_precision=False)
        feat_path = os.path.join(frames_dir, f"feat_{i:04d}.ofmp")
        formats.write_ofmp(feat_path, fr.features.data)
        paths.extend([rgb_path, depth_path, sem_path, feat_path])

    cloud_path = os.path.join(out, "cloud.ply")
    formats.write_ply(cloud_path, cloud)
    paths.append(cloud_path)

    codebook_path = os.path.join(out, "codebook.ofmp")
    formats.write_ofmp(
        codebook_path,
        np.vstack([codebook.embeddings,
                   codebook.background_embedding[None]])[None],
        half_precision=False)
    paths.append(codebook_path)

    record_artifacts(cfg.output_dir, "generate", paths)
    return paths


def load_codebook(out_dir) -> Codebook:
    path = require_artifact(out_dir, "codebook.ofmp", "generate")
    rows = formats.read_ofmp(path)[0].astype(np.float64)
    # Rows may have drifted off unit norm through f32 storage.
    rows /= np.linalg.norm(rows, axis=1, keepdims=True)
    return Codebook(embeddings=rows[:-1], background_embedding=rows[-1])


def load_frames(out_dir, novel: bool = False) -> list:
    from .scenegen import FeatureMap, PosedFrame

    prefix = "novel" if novel else "frames"
    poses_rel = "novel_poses.txt" if novel else "poses.txt"
    stage = "propose" if novel else "generate"
    cameras = formats.read_poses(require_artifact(out_dir, poses_rel, stage))
    frames = []
    for i, cam in enumerate(cameras):
        rgb = formats.read_ppm(
            require_artifact(out_dir, f"{prefix}/rgb_{i:04d}.ppm", stage))
        depth = formats.read_ofmp(
            require_artifact(out_dir, f"{prefix}/depth_{i:04d}.ofmp", stage)
        )[:, :, 0].astype(np.float64)
        sem = formats.read_ofmp(
            require_artifact(out_dir, f"{prefix}/sem_{i:04d}.ofmp", stage)
        )[:, :, 0].astype(np.int64)
        feat = formats.read_ofmp(
            require_artifact(out_dir, f"{prefix}/feat_{i:04d}.ofmp", stage))
        frames.append(PosedFrame(camera=cam, rgb=rgb, depth=depth,
                                 semantics=sem,
                                 features=FeatureMap(data=feat)))
    return frames


def _scene_and_bbox(cfg):
    spec = formats.read_scene_spec(
        require_artifact(cfg.output_dir, "scene.json", "generate"))
    return generate_scene(spec)


def _field_config(cfg, scene) -> FieldConfig:
    t = cfg.train
    codebook = load_codebook(cfg.output_dir)
    return FieldConfig(
        bbox_min=scene.bbox_min, bbox_max=scene.bbox_max,
        density_resolution=tuple(t.density_resolution),
        feature_resolution=tuple(t.feature_resolution),
        feature_dim=codebook.dim,
        background_color=scene.background_color)


def stage_train(cfg: PipelineConfig) -> list:
    scene = _scene_and_bbox(cfg)
    frames = load_frames(cfg.output_dir)
    if cfg.train.include_novel:
        frames = frames + load_frames(cfg.output_dir, novel=True)
    t = cfg.train
    params = init_params(_field_config(cfg, scene),
                         seed=derive_seed(cfg.seed, "field-init"))
    tconf = TrainConfig(
        lambda_open=t.lambda_open, lambda_depth=t.lambda_depth,
        border_margin=t.border_margin, batch_rays=t.batch_rays,
        iterations=t.iterations, learning_rate=t.learning_rate,
        huber_beta=t.huber_beta, n_samples=t.n_samples,
        seed=derive_seed(cfg.seed, "train"))
    trained, log = train(params, frames, tconf)

    ckpt = os.path.join(cfg.output_dir, "field.ofld")
    formats.write_checkpoint(ckpt, trained)
    log_path = os.path.join(cfg.output_dir, "train_log.csv")
    write_training_log(log_path, log)
    record_artifacts(cfg.output_dir, "train", [ckpt, log_path])
    return [ckpt, log_path]


def _default_depth_tolerance(cfg, scene) -> float:
    res = np.array(cfg.train.density_resolution, dtype=np.float64)
    voxel = (scene.bbox_max - scene.bbox_min) / (res - 1)
    return 2.0 * float(np.mean(voxel))


def stage_fuse(cfg: PipelineConfig) -> list:
    scene = _scene_and_bbox(cfg)
    cloud = formats.read_ply(
        require_artifact(cfg.output_dir, "cloud.ply", "generate"))
    frames = load_frames(cfg.output_dir)
    if cfg.fuse.include_novel:
        frames = frames + load_frames(cfg.output_dir, novel=True)
    tol = cfg.fuse.depth_tolerance or _default_depth_tolerance(cfg, scene)
    stats = fuse(cloud, frames, tol, cfg.fuse.estimator)

    stats_path = os.path.join(cfg.output_dir, "stats.bin")
    formats.write_stats(stats_path, stats,
                        dump_covariance=cfg.fuse.dump_covariance)
    paths = [stats_path]

    codebook = load_codebook(cfg.output_dir)
    diag = error_and_correlation(stats, cloud, codebook)
    diag_path = os.path.join(cfg.output_dir, "fusion_diagnostics.csv")
    with open(diag_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["metric", "value"])
        writer.writerow(["pearson_r", repr(diag.pearson_r)])
        writer.writerow(["spearman_r", repr(diag.spearman_r)])
        writer.writerow(["n_valid", diag.n_valid])
    paths.append(diag_path)
    record_artifacts(cfg.output_dir, "fuse", paths)
    return paths


def stage_propose(cfg: PipelineConfig) -> list:
    from .fusion import PointStats

    scene = _scene_and_bbox(cfg)
    params = formats.read_checkpoint(
        require_artifact(cfg.output_dir, "field.ofld", "train"))
    cloud = formats.read_ply(
        require_artifact(cfg.output_dir, "cloud.ply", "generate"))
    raw = formats.read_stats(
        require_artifact(cfg.output_dir, "stats.bin", "fuse"))
    stats = []
    for i in range(len(raw["count"])):
        st = PointStats(dim=raw["mean"].shape[1], count=int(raw["count"][i]),
                        mean=raw["mean"][i])
        st.log_uncertainty = float(raw["log_u"][i])
        st.underobserved = raw["count"][i] < 2
        stats.append(st)

    p = cfg.propose
    diag = scene.diagonal
    vconf = ViewSelConfig(
        offset_distance=p.offset_distance or 0.15 * diag,
        position_noise_std=(p.position_noise_std
                            if p.position_noise_std is not None
                            else 0.02 * diag),
        n_proposals=p.n_proposals,
        density_threshold=p.density_threshold,
        transmittance_threshold=p.transmittance_threshold,
        check_transmittance=p.check_transmittance,
        target_standoff=2.0 * float(np.mean(params.voxel_size())),
        seed=derive_seed(cfg.seed, "viewsel"))
    proposals = propose_views(params, cloud, stats, vconf)

    out = cfg.output_dir
    prop_path = os.path.join(out, "proposals.csv")
    write_proposals(prop_path, proposals)
    paths = [prop_path]

    if p.realize:
        codebook = load_codebook(out)
        g = cfg.generate
        cameras = formats.read_poses(
            require_artifact(out, "poses.txt", "generate"))
        intr = dict(fx=cameras[0].fx, fy=cameras[0].fy, cx=cameras[0].cx,
                    cy=cameras[0].cy, width=cameras[0].width,
                    height=cameras[0].height)
        novel = realize_views(
            scene, proposals, codebook,
            NoiseModel(sigma=g.noise_sigma, border_corrupt=g.border_corrupt,
                       seed=derive_seed(cfg.seed, "novel-noise") % (2 ** 32)),
            intr)
        novel_dir = os.path.join(out, "novel")
        os.makedirs(novel_dir, exist_ok=True)
        for i, fr in enumerate(novel):
            rgb_path = os.path.join(novel_dir, f"rgb_{i:04d}.ppm")
            formats.write_ppm(rgb_path, fr.rgb)
            depth_path = os.path.join(novel_dir, f"depth_{i:04d}.ofmp")
            formats.write_ofmp(depth_path, fr.depth, half_precision=False)
            sem_path = os.path.join(novel_dir, f"sem_{i:04d}.ofmp")
            formats.write_ofmp(sem_path, fr.semantics.astype(np.float32),
                               half_precision=False)
            feat_path = os.path.join(novel_dir, f"feat_{i:04d}.ofmp")
            formats.write_ofmp(feat_path, fr.features.data)
            paths.extend([rgb_path, depth_path, sem_path, feat_path])
        novel_poses = os.path.join(out, "novel_poses.txt")
        formats.write_poses(novel_poses, [fr.camera for fr in novel])
        paths.append(novel_poses)

    record_artifacts(out, "propose", paths)
    return paths


def stage_eval(cfg: PipelineConfig, mode: str = None) -> list:
    scene = _scene_and_bbox(cfg)
    params = formats.read_checkpoint(
        require_artifact(cfg.output_dir, "field.ofld", "train"))
    cloud = formats.read_ply(
        require_artifact(cfg.output_dir, "cloud.ply", "generate"))
    codebook = load_codebook(cfg.output_dir)
    counts = np.bincount(cloud.class_ids, minlength=codebook.n_classes)
    queries = query_set_from_codebook(codebook, gt_class_counts=counts)

    mode = mode or cfg.eval.mode
    if mode == "sample":
        predicted, info = segment_sample(params, cloud, queries)
    elif mode == "render_project":
        cameras = formats.read_poses(
            require_artifact(cfg.output_dir, "poses.txt", "generate"))
        if cfg.eval.include_novel:
            manifest = load_manifest(cfg.output_dir)
            if "novel_poses.txt" in manifest["artifacts"]:
                cameras = cameras + formats.read_poses(
                    require_artifact(cfg.output_dir, "novel_poses.txt",
                                     "propose"))
        tol = (cfg.eval.depth_tolerance
               or _default_depth_tolerance(cfg, scene))
        predicted, info = segment_render_project(
            params, cameras, cloud, queries, tol,
            n_samples=cfg.train.n_samples)
    else:
        raise ConfigError(f"unknown eval mode {mode!r}")

    result = score(predicted, cloud.class_ids, queries,
                   include_absent=cfg.eval.include_absent)
    out = cfg.output_dir
    csv_path = os.path.join(out, f"results_{mode}.csv")
    write_result_csv(csv_path, result, queries)
    pred_cloud = LabeledPointCloud(positions=cloud.positions,
                                   class_ids=predicted,
                                   colors=cloud.colors)
    ply_path = os.path.join(out, f"predicted_{mode}.ply")
    formats.write_ply(ply_path, pred_cloud)
    record_artifacts(out, "eval", [csv_path, ply_path])
    return [csv_path, ply_path]


def stage_query(cfg: PipelineConfig) -> list:
    params = formats.read_checkpoint(
        require_artifact(cfg.output_dir, "field.ofld", "train"))
    codebook = load_codebook(cfg.output_dir)
    q = cfg.query
    if q.embedding_file:
        emb = formats.read_ofmp(q.embedding_file)[0, 0].astype(np.float64)
    elif q.label:
        try:
            class_id = int(q.label.split("_")[-1])
        except ValueError:
            raise ConfigError(f"cannot parse class id from label {q.label!r}")
        if not (0 <= class_id < codebook.n_classes):
            raise ConfigError(f"label {q.label!r} outside codebook range")
        emb = codebook.embeddings[class_id]
    else:
        raise ConfigError("query requires a label or an embedding file")

    cameras = formats.read_poses(
        require_artifact(cfg.output_dir, "poses.txt", "generate"))
    paths = []
    for cam_idx in q.cameras:
        if not (0 <= cam_idx < len(cameras)):
            raise ConfigError(f"camera index {cam_idx} out of range")
        image, _ = relevancy_map(params, cameras[cam_idx], emb,
                                 threshold=q.threshold,
                                 n_samples=cfg.train.n_samples)
        path = os.path.join(cfg.output_dir,
                            f"relevancy_cam{cam_idx:03d}.ppm")
        formats.write_ppm(path, image)
        paths.append(path)
    record_artifacts(cfg.output_dir, "query", paths)
    return paths
