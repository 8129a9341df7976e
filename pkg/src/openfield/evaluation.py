"""Open-vocabulary 3D segmentation and scoring.

Points are labeled by maximum cosine similarity against a query-embedding
matrix, either by sampling the feature field directly at each 3D
position or by rendering feature images and projecting them back onto
the cloud (averaging multi-view contributions). Scores are per-class IoU
and accuracy with head/common/tail aggregates.
"""

import csv
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .field import FieldParams, query_batch
from .render import render_image

_NORM_EPS = 1e-12

SUBSET_NAMES = ("head", "common", "tail")


@dataclass
class QuerySet:
    labels: list
    embeddings: np.ndarray   # (L, D), rows unit norm
    subsets: dict            # subset name -> array of label indices

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        norms = np.linalg.norm(self.embeddings, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValueError("query embeddings must be unit norm")
        all_idx = np.concatenate([np.asarray(v, dtype=np.int64)
                                  for v in self.subsets.values()])
        if sorted(all_idx.tolist()) != list(range(len(self.labels))):
            raise ValueError("subsets must partition the label set")


@dataclass
class SegmentationResult:
    predicted: np.ndarray
    per_class_iou: np.ndarray   # NaN where the class is absent everywhere
    per_class_acc: np.ndarray
    miou_all: float
    macc_all: float
    miou_head: float
    macc_head: float
    miou_common: float
    macc_common: float
    miou_tail: float
    macc_tail: float


def build_query_set(labels: list, embeddings: np.ndarray,
                    gt_class_counts: np.ndarray,
                    renormalize: bool = True) -> QuerySet:
    """Assemble a query set and split labels into head/common/tail.

    Subsets are assigned by descending ground-truth point count and split
    into three groups as equal as possible (earlier groups take the
    remainder). Non-unit embedding rows are renormalized.
    """
    if len(labels) == 0:
        raise ValueError("labels must be non-empty")
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if embeddings.shape[0] != len(labels):
        raise ValueError("one embedding row per label required")
    norms = np.linalg.norm(embeddings, axis=1)
    if np.any(norms < _NORM_EPS):
        raise ValueError("zero-norm query embedding")
    if renormalize and np.any(np.abs(norms - 1.0) > 1e-6):
        embeddings = embeddings / norms[:, None]

    order = np.argsort(-np.asarray(gt_class_counts), kind="stable")
    groups = np.array_split(order, 3)
    subsets = {name: np.sort(g) for name, g in zip(SUBSET_NAMES, groups)}
    return QuerySet(labels=list(labels), embeddings=embeddings,
                    subsets=subsets)


def query_set_from_codebook(codebook, labels: Optional[list] = None,
                            gt_class_counts: Optional[np.ndarray] = None
                            ) -> QuerySet:
    if labels is None:
        labels = [f"class_{i}" for i in range(codebook.n_classes)]
    if gt_class_counts is None:
        gt_class_counts = np.arange(len(labels), 0, -1)
    return build_query_set(labels, codebook.embeddings, gt_class_counts)


def assign_labels(point_features: np.ndarray, queries: QuerySet):
    """Argmax cosine-similarity assignment.

    Zero-norm features deterministically fall back to class 0 and are
    reported via the returned mask. Ties resolve to the lowest index.
    """
    feats = np.asarray(point_features, dtype=np.float64)
    norms = np.linalg.norm(feats, axis=1)
    degenerate = norms < _NORM_EPS
    safe = np.where(degenerate[:, None], 1.0, norms[:, None])
    sims = (feats / safe) @ queries.embeddings.T
    predicted = np.argmax(sims, axis=1)
    predicted[degenerate] = 0
    return predicted, degenerate


def segment_sample(params: FieldParams, cloud, queries: QuerySet):
    """Mode 1: sample the feature field directly at each point position."""
    _, _, feats = query_batch(params, cloud.positions)
    predicted, degenerate = assign_labels(feats, queries)
    return predicted, {"features": feats, "degenerate": degenerate,
                       "unobserved": np.zeros(len(cloud), dtype=bool)}


def segment_render_project(params: FieldParams, cameras: list, cloud,
                           queries: QuerySet, depth_tolerance: float,
                           n_samples: int = 128):
    """Mode 2: render feature images, project them onto the cloud, average.

    A point collects a rendered feature from every camera whose rendered
    depth agrees with the point's distance; unobserved points fall back
    to direct sampling and are flagged.
    """
    from .geometry import project_points

    if not cameras:
        raise ValueError("render-project needs at least one camera")
    n = len(cloud)
    d = params.feature_dim
    acc = np.zeros((n, d))
    hits = np.zeros(n, dtype=np.int64)

    for cam in cameras:
        planes = render_image(params, cam, n_samples=n_samples)
        u, v, z = project_points(cam, cloud.positions)
        rows = np.rint(v).astype(np.int64)
        cols = np.rint(u).astype(np.int64)
        in_view = ((z > 0) & (rows >= 0) & (rows < cam.height)
                   & (cols >= 0) & (cols < cam.width))
        rows = np.clip(rows, 0, cam.height - 1)
        cols = np.clip(cols, 0, cam.width - 1)
        dist = np.linalg.norm(cloud.positions - cam.position, axis=1)
        visible = in_view & (np.abs(dist - planes["depth"][rows, cols])
                             <= depth_tolerance)
        acc[visible] += planes["feature"][rows[visible], cols[visible]]
        hits[visible] += 1

    unobserved = hits == 0
    feats = np.zeros((n, d))
    feats[~unobserved] = acc[~unobserved] / hits[~unobserved, None]
    if np.any(unobserved):
        _, _, sampled = query_batch(params, cloud.positions[unobserved])
        feats[unobserved] = sampled
    predicted, degenerate = assign_labels(feats, queries)
    return predicted, {"features": feats, "degenerate": degenerate,
                       "unobserved": unobserved, "hits": hits}


def score(predicted: np.ndarray, gt: np.ndarray, queries: QuerySet,
          include_absent: bool = False) -> SegmentationResult:
    """Per-class IoU/accuracy and subset means.

    Classes absent from both ground truth and prediction are excluded
    from the means (NaN per-class entries) unless include_absent is set,
    in which case they count as zero.
    """
    predicted = np.asarray(predicted, dtype=np.int64)
    gt = np.asarray(gt, dtype=np.int64)
    if predicted.shape != gt.shape:
        raise ValueError("predicted and gt must have the same length")

    n_cls = len(queries.labels)
    iou = np.full(n_cls, np.nan)
    acc = np.full(n_cls, np.nan)
    for c in range(n_cls):
        tp = int(np.sum((gt == c) & (predicted == c)))
        fp = int(np.sum((gt != c) & (predicted == c)))
        fn = int(np.sum((gt == c) & (predicted != c)))
        if tp + fp + fn == 0:
            if include_absent:
                iou[c] = 0.0
                acc[c] = 0.0
            continue
        iou[c] = tp / (tp + fp + fn)
        acc[c] = tp / (tp + fn) if (tp + fn) > 0 else 0.0

    def mean_over(idx):
        vals = iou[idx], acc[idx]
        out = []
        for v in vals:
            v = v[~np.isnan(v)]
            out.append(float(np.mean(v)) if len(v) else 0.0)
        return out

    miou_all, macc_all = mean_over(np.arange(n_cls))
    subset_scores = {name: mean_over(np.asarray(queries.subsets[name]))
                     for name in SUBSET_NAMES}
    return SegmentationResult(
        predicted=predicted, per_class_iou=iou, per_class_acc=acc,
        miou_all=miou_all, macc_all=macc_all,
        miou_head=subset_scores["head"][0], macc_head=subset_scores["head"][1],
        miou_common=subset_scores["common"][0],
        macc_common=subset_scores["common"][1],
        miou_tail=subset_scores["tail"][0], macc_tail=subset_scores["tail"][1],
    )


def relevancy_map(params: FieldParams, camera, query_embedding: np.ndarray,
                  threshold: float = 0.5, n_samples: int = 128,
                  normalize: bool = True):
    """Colorized per-pixel similarity between rendered features and a query.

    The cosine-similarity image is min-max normalized (a constant image
    degenerates to all 0.5 and is flagged); pixels below the threshold
    show the grayscale scene rendering, pixels above it follow a
    blue-green-red ramp with red at the highest relevancy.
    """
    query = np.asarray(query_embedding, dtype=np.float64)
    qn = np.linalg.norm(query)
    if qn < _NORM_EPS:
        raise ValueError("zero-norm query embedding")
    query = query / qn

    planes = render_image(params, camera, n_samples=n_samples)
    feats = planes["feature"]
    norms = np.linalg.norm(feats, axis=2)
    sims = np.zeros(norms.shape)
    ok = norms > _NORM_EPS
    sims[ok] = (feats[ok] / norms[ok, None]) @ query

    degenerate = False
    if normalize:
        lo, hi = float(sims.min()), float(sims.max())
        if hi - lo < 1e-12:
            sims = np.full_like(sims, 0.5)
            degenerate = True
        else:
            sims = (sims - lo) / (hi - lo)

    gray = np.mean(planes["color"], axis=2)
    image = np.repeat(gray[:, :, None], 3, axis=2)
    hot = sims >= threshold
    if np.any(hot):
        span = max(1.0 - threshold, 1e-12)
        v = (sims[hot] - threshold) / span  # 0 = blue, 0.5 = green, 1 = red
        ramp = np.zeros((int(hot.sum()), 3))
        lower = v < 0.5
        ramp[lower, 2] = 1.0 - 2.0 * v[lower]
        ramp[lower, 1] = 2.0 * v[lower]
        ramp[~lower, 1] = 2.0 - 2.0 * v[~lower]
        ramp[~lower, 0] = 2.0 * v[~lower] - 1.0
        image[hot] = ramp
    return image, {"similarity": sims, "degenerate": degenerate}


def write_result_csv(path, result: SegmentationResult, queries: QuerySet):
    """Per-class rows plus summary rows."""
    subset_of = {}
    for name, idx in queries.subsets.items():
        for i in idx:
            subset_of[int(i)] = name
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["label", "iou", "acc", "subset"])
        for i, label in enumerate(queries.labels):
            iou = result.per_class_iou[i]
            acc = result.per_class_acc[i]
            writer.writerow([
                label,
                "" if np.isnan(iou) else repr(float(iou)),
                "" if np.isnan(acc) else repr(float(acc)),
                subset_of[i],
            ])
        writer.writerow(["mean_all", repr(result.miou_all),
                         repr(result.macc_all), "all"])
        for name in SUBSET_NAMES:
            writer.writerow([f"mean_{name}",
                             repr(getattr(result, f"miou_{name}")),
                             repr(getattr(result, f"macc_{name}")), name])
