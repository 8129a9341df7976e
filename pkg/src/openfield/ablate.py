"""Ablation harness over the pocket benchmark.

Five pipeline variants on the same scene and seeds:

1. sampled        - RGB + feature training, point features sampled in 3D
2. render_project - same field, features rendered then projected
3. depth          - adds depth supervision, render-and-project
4. novel_views    - adds realized proposal views on top of 3
5. random_views   - control: proposal views replaced by random interior
                    cameras (same budget)

Each repetition re-derives every random stream from the repetition seed;
reported numbers are means over repetitions. The harness also emits
pass/fail flags for the expected ordering, the novel-view gain, and the
random-view control.
"""

import csv
import os
from dataclasses import dataclass, field as dc_field

import numpy as np

from .benchmarks import BenchmarkData, build_pocket_benchmark
from .evaluation import (query_set_from_codebook, score,
                         segment_render_project, segment_sample)
from .field import FieldConfig, init_params
from .fusion import fuse
from .scenegen import NoiseModel, make_trajectory, render_views
from .seeding import derive_seed
from .train import TrainConfig, train
from .viewsel import ViewSelConfig, propose_views, realize_views

VARIANTS = ("sampled", "render_project", "depth", "novel_views",
            "random_views")


@dataclass
class AblationConfig:
    seed: int = 0
    repetitions: int = 3
    n_views: int = 40
    width: int = 96
    height: int = 72
    n_points: int = 4000
    feature_dim: int = 8
    noise_sigma: float = 0.04
    border_corrupt: int = 8
    density_resolution: tuple = (40, 40, 26)
    feature_resolution: tuple = (32, 32, 20)
    iterations: int = 700
    batch_rays: int = 1024
    n_samples: int = 56
    learning_rate: float = 5e-2
    lambda_open: float = 1.0
    lambda_depth: float = 0.1
    n_proposals: int = 24
    min_novel_gain: float = 0.02


@dataclass
class AblationReport:
    miou: dict
    macc: dict
    per_rep: list
    checks: dict
    n_novel: list = dc_field(default_factory=list)


def _train_field(bench: BenchmarkData, cfg: AblationConfig, frames,
                 lambda_depth: float, seed: int):
    scene = bench.scene
    fconf = FieldConfig(
        bbox_min=scene.bbox_min, bbox_max=scene.bbox_max,
        density_resolution=cfg.density_resolution,
        feature_resolution=cfg.feature_resolution,
        feature_dim=cfg.feature_dim,
        background_color=scene.background_color)
    params = init_params(fconf, seed=derive_seed(seed, "init"))
    tconf = TrainConfig(
        lambda_open=cfg.lambda_open, lambda_depth=lambda_depth,
        iterations=cfg.iterations, batch_rays=cfg.batch_rays,
        n_samples=cfg.n_samples, learning_rate=cfg.learning_rate,
        seed=derive_seed(seed, "train"))
    trained, _ = train(params, frames, tconf)
    return trained


def _miou(bench, params, queries, mode: str, cameras=None,
          n_samples: int = 56):
    if mode == "sample":
        predicted, _ = segment_sample(params, bench.cloud, queries)
    else:
        tol = 2.0 * float(np.mean(params.voxel_size()))
        predicted, _ = segment_render_project(
            params, cameras, bench.cloud, queries, tol, n_samples=n_samples)
    result = score(predicted, bench.cloud.class_ids, queries)
    return result.miou_all, result.macc_all


def run_ablation(cfg: AblationConfig, progress=None) -> AblationReport:
    per_rep = []
    n_novel_per_rep = []
    for rep in range(cfg.repetitions):
        rep_seed = derive_seed(cfg.seed, "rep", rep)
        bench = build_pocket_benchmark(
            seed=rep_seed, n_views=cfg.n_views, width=cfg.width,
            height=cfg.height, n_points=cfg.n_points,
            feature_dim=cfg.feature_dim, sigma=cfg.noise_sigma,
            border_corrupt=cfg.border_corrupt)
        counts = np.bincount(bench.cloud.class_ids,
                             minlength=bench.codebook.n_classes)
        queries = query_set_from_codebook(bench.codebook,
                                          gt_class_counts=counts)
        scores = {}

        # Variants 1 + 2 share one RGB+open training run.
        base = _train_field(bench, cfg, bench.frames, lambda_depth=0.0,
                            seed=derive_seed(rep_seed, "base"))
        scores["sampled"] = _miou(bench, base, queries, "sample")
        scores["render_project"] = _miou(bench, base, queries, "rp",
                                         cameras=bench.cameras,
                                         n_samples=cfg.n_samples)
        if progress:
            progress(f"rep {rep}: sampled={scores['sampled'][0]:.3f} "
                     f"render_project={scores['render_project'][0]:.3f}")

        # Variant 3: depth supervision.
        depth_field = _train_field(bench, cfg, bench.frames,
                                   lambda_depth=cfg.lambda_depth,
                                   seed=derive_seed(rep_seed, "depth"))
        scores["depth"] = _miou(bench, depth_field, queries, "rp",
                                cameras=bench.cameras,
                                n_samples=cfg.n_samples)
        if progress:
            progress(f"rep {rep}: depth={scores['depth'][0]:.3f}")

        # Variant 4: proposals from fused uncertainty on variant 3's field.
        tol = 2.0 * float(np.mean(depth_field.voxel_size()))
        stats = fuse(bench.cloud, bench.frames, tol)
        diag = bench.scene.diagonal
        vconf = ViewSelConfig(
            offset_distance=0.15 * diag, position_noise_std=0.02 * diag,
            n_proposals=cfg.n_proposals,
            target_standoff=2.0 * float(np.mean(depth_field.voxel_size())),
            seed=derive_seed(rep_seed, "viewsel"))
        proposals = propose_views(depth_field, bench.cloud, stats, vconf)
        cam0 = bench.cameras[0]
        intr = dict(fx=cam0.fx, fy=cam0.fy, cx=cam0.cx, cy=cam0.cy,
                    width=cam0.width, height=cam0.height)
        novel = realize_views(
            bench.scene, proposals, bench.codebook,
            NoiseModel(sigma=cfg.noise_sigma,
                       border_corrupt=cfg.border_corrupt,
                       seed=derive_seed(rep_seed, "novel-noise") % (2 ** 32)),
            intr)
        n_novel_per_rep.append(len(novel))
        novel_field = _train_field(bench, cfg, bench.frames + novel,
                                   lambda_depth=cfg.lambda_depth,
                                   seed=derive_seed(rep_seed, "novel"))
        scores["novel_views"] = _miou(
            bench, novel_field, queries, "rp",
            cameras=bench.cameras + [fr.camera for fr in novel],
            n_samples=cfg.n_samples)
        if progress:
            progress(f"rep {rep}: novel_views={scores['novel_views'][0]:.3f} "
                     f"({len(novel)} novel frames)")

        # Variant 5 control: same budget of random interior cameras.
        n_random = max(1, len(novel))
        random_cams = make_trajectory(
            bench.scene, n_random, kind="random_interior",
            seed=derive_seed(rep_seed, "random-cams"),
            width=cfg.width, height=cfg.height)
        random_frames = render_views(bench.scene, random_cams)
        from .benchmarks import encode_frames

        encode_frames(random_frames, bench.codebook,
                      NoiseModel(sigma=cfg.noise_sigma,
                                 border_corrupt=cfg.border_corrupt,
                                 seed=derive_seed(rep_seed, "random-noise")
                                 % (2 ** 32)))
        random_field = _train_field(bench, cfg,
                                    bench.frames + random_frames,
                                    lambda_depth=cfg.lambda_depth,
                                    seed=derive_seed(rep_seed, "random"))
        scores["random_views"] = _miou(
            bench, random_field, queries, "rp",
            cameras=bench.cameras + random_cams, n_samples=cfg.n_samples)
        if progress:
            progress(f"rep {rep}: random_views={scores['random_views'][0]:.3f}")
        per_rep.append(scores)

    miou = {v: float(np.mean([r[v][0] for r in per_rep])) for v in VARIANTS}
    macc = {v: float(np.mean([r[v][1] for r in per_rep])) for v in VARIANTS}
    checks = {
        "ordering_1_2": miou["sampled"] <= miou["render_project"],
        "ordering_2_3": miou["render_project"] <= miou["depth"],
        "ordering_3_4": miou["depth"] <= miou["novel_views"],
        "novel_gain": (miou["novel_views"] - miou["depth"]
                       >= cfg.min_novel_gain),
        "random_below_depth": miou["random_views"] < miou["depth"],
    }
    return AblationReport(miou=miou, macc=macc, per_rep=per_rep,
                          checks=checks, n_novel=n_novel_per_rep)


def write_ablation_report(out_dir, report: AblationReport):
    table_path = os.path.join(out_dir, "ablation.csv")
    with open(table_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["variant", "miou", "macc"])
        for v in VARIANTS:
            writer.writerow([v, repr(report.miou[v]), repr(report.macc[v])])

    checks_path = os.path.join(out_dir, "ablation_checks.csv")
    with open(checks_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["check", "status"])
        for name, ok in report.checks.items():
            writer.writerow([name, "pass" if ok else "fail"])

    detail_path = os.path.join(out_dir, "ablation_reps.csv")
    with open(detail_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["rep", "variant", "miou", "macc"])
        for rep, scores in enumerate(report.per_rep):
            for v in VARIANTS:
                writer.writerow([rep, v, repr(scores[v][0]),
                                 repr(scores[v][1])])
    return [table_path, checks_path, detail_path]
