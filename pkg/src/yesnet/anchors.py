"""Global anchor boxes via k-means under IOU distance.

Boxes are (cx, cy, w, h) in normalized image coordinates. Clustering runs
Lloyd iterations with distance 1 - IOU and coordinate-wise mean updates over
all four dimensions, then merges any centroid pair whose IOU exceeds the
merge threshold. A w/h-only mode (boxes treated as co-centered for the
distance) is kept for comparison with grid-style anchors.
"""

import csv
import json
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Box:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        for name in ("cx", "cy", "w", "h"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if not (0.0 <= self.cx <= 1.0 and 0.0 <= self.cy <= 1.0):
            raise ValueError(f"box center out of range: {self}")
        if not (0.0 < self.w <= 1.0 and 0.0 < self.h <= 1.0):
            raise ValueError(f"box extent out of range: {self}")

    def as_array(self):
        return np.array([self.cx, self.cy, self.w, self.h])


def boxes_to_array(boxes):
    return np.array([[b.cx, b.cy, b.w, b.h] for b in boxes], dtype=np.float64)


def iou(a, b):
    """Intersection over union of two boxes in center-size form."""
    return float(iou_matrix(np.atleast_2d(a.as_array() if isinstance(a, Box) else a),
                            np.atleast_2d(b.as_array() if isinstance(b, Box) else b))[0, 0])


def iou_matrix(a, b):
    """Pairwise IOU between rows of [N,4] and [M,4] center-size arrays."""
    ax1, ay1 = a[:, 0] - a[:, 2] / 2, a[:, 1] - a[:, 3] / 2
    ax2, ay2 = a[:, 0] + a[:, 2] / 2, a[:, 1] + a[:, 3] / 2
    bx1, by1 = b[:, 0] - b[:, 2] / 2, b[:, 1] - b[:, 3] / 2
    bx2, by2 = b[:, 0] + b[:, 2] / 2, b[:, 1] + b[:, 3] / 2
    iw = np.maximum(0.0, np.minimum(ax2[:, None], bx2[None]) - np.maximum(ax1[:, None], bx1[None]))
    ih = np.maximum(0.0, np.minimum(ay2[:, None], by2[None]) - np.maximum(ay1[:, None], by1[None]))
    inter = iw * ih
    union = (a[:, 2] * a[:, 3])[:, None] + (b[:, 2] * b[:, 3])[None] - inter
    return inter / union


def _distance_matrix(boxes, centroids, full_dim):
    if full_dim:
        return 1.0 - iou_matrix(boxes, centroids)
    b = boxes.copy()
    c = centroids.copy()
    b[:, 0] = b[:, 1] = 0.5
    c[:, 0] = c[:, 1] = 0.5
    return 1.0 - iou_matrix(b, c)


@dataclass
class KmeansConfig:
    k: int = 10
    merge_threshold: float = 0.9
    max_iters: int = 100
    restarts: int = 10
    seed: int = 0
    full_dim: bool = True
    init: str = "sample"  # sample | all-pairs (exhaustive k=2 initialization)

    def __post_init__(self):
        if self.k < 1 or self.max_iters < 1:
            raise ValueError("KmeansConfig: k and max_iters must be >= 1")
        if not 0.0 < self.merge_threshold < 1.0:
            raise ValueError("KmeansConfig: merge_threshold must be in (0, 1)")


@dataclass
class AnchorSet:
    anchors: list
    merge_threshold: float
    total_distance: float = 0.0
    iterations: int = 0
    converged: bool = True

    def as_array(self):
        return boxes_to_array(self.anchors)

    def check_invariant(self):
        arr = self.as_array()
        m = iou_matrix(arr, arr)
        np.fill_diagonal(m, 0.0)
        return m.max(initial=0.0) <= self.merge_threshold


def _lloyd(arr, centroids, config):
    """Lloyd iterations from given centroids; returns (centroids, assignment,
    iterations, converged)."""
    assign = None
    for it in range(1, config.max_iters + 1):
        dist = _distance_matrix(arr, centroids, config.full_dim)
        new_assign = dist.argmin(axis=1)  # ties resolve to the lowest index
        if assign is not None and np.array_equal(new_assign, assign):
            return centroids, assign, it, True
        assign = new_assign
        for c in range(centroids.shape[0]):
            members = arr[assign == c]
            if len(members):
                centroids[c] = members.mean(axis=0)
            else:
                # reseed an empty cluster to the box farthest from its centroid
                worst = dist[np.arange(len(arr)), assign].argmax()
                centroids[c] = arr[worst]
    return centroids, assign, config.max_iters, False


def _merge(centroids, threshold):
    while centroids.shape[0] > 1:
        m = iou_matrix(centroids, centroids)
        np.fill_diagonal(m, 0.0)
        i, j = np.unravel_index(m.argmax(), m.shape)
        if m[i, j] <= threshold:
            break
        merged = (centroids[i] + centroids[j]) / 2.0
        centroids = np.vstack([np.delete(centroids, (i, j), axis=0), [merged]])
    return centroids


def _initializations(arr, config):
    n = len(arr)
    if config.init == "all-pairs":
        if config.k != 2:
            raise ValueError("all-pairs initialization requires k == 2")
        for i in range(n):
            for j in range(i + 1, n):
                yield arr[[i, j]].copy()
        return
    rng = np.random.default_rng(config.seed)
    for _ in range(config.restarts):
        idx = rng.choice(n, size=config.k, replace=False)
        yield arr[idx].copy()


def kmeans_anchors(boxes, config):
    """Cluster boxes into an AnchorSet; best of all initializations by total
    post-merge distance, deterministic for a fixed config."""
    arr = boxes if isinstance(boxes, np.ndarray) else boxes_to_array(boxes)
    if len(arr) < config.k:
        raise ValueError(f"kmeans_anchors: {len(arr)} boxes < k={config.k}")
    best = None
    for restart, init in enumerate(_initializations(arr, config)):
        centroids, _, iters, converged = _lloyd(arr, init, config)
        centroids = _merge(centroids, config.merge_threshold)
        total = float(_distance_matrix(arr, centroids, config.full_dim).min(axis=1).sum())
        key = (total, restart)
        if best is None or key < best[0]:
            best = (key, centroids.copy(), iters, converged)
    _, centroids, iters, converged = best
    anchors = [Box(*np.clip(c, [0, 0, 1e-6, 1e-6], 1.0)) for c in centroids]
    total = float(_distance_matrix(arr, boxes_to_array(anchors), config.full_dim).min(axis=1).sum())
    return AnchorSet(
        anchors=anchors,
        merge_threshold=config.merge_threshold,
        total_distance=total,
        iterations=iters,
        converged=converged,
    )


def average_iou(anchor_set, boxes):
    """Mean over boxes of the best IOU against any anchor."""
    arr = boxes if isinstance(boxes, np.ndarray) else boxes_to_array(boxes)
    anchors = anchor_set.as_array() if isinstance(anchor_set, AnchorSet) else boxes_to_array(anchor_set)
    if len(arr) == 0 or len(anchors) == 0:
        raise ValueError("average_iou: empty anchors or boxes")
    return float(iou_matrix(arr, anchors).max(axis=1).mean())


def save_anchors(anchor_set, csv_path, report_path, boxes=None):
    """Write anchors as cx,cy,w,h lines plus a JSON quality report."""
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for b in anchor_set.anchors:
            writer.writerow([repr(b.cx), repr(b.cy), repr(b.w), repr(b.h)])
    report = {
        "k": len(anchor_set.anchors),
        "merge_threshold": anchor_set.merge_threshold,
        "average_iou": average_iou(anchor_set, boxes) if boxes is not None else None,
        "iterations": anchor_set.iterations,
        "converged": anchor_set.converged,
        "total_distance": anchor_set.total_distance,
    }
    with open(report_path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_anchors(csv_path, merge_threshold=0.9):
    anchors = []
    with open(csv_path, newline="") as fh:
        for row in csv.reader(fh):
            if not row:
                continue
            anchors.append(Box(*(float(v) for v in row)))
    return AnchorSet(anchors=anchors, merge_threshold=merge_threshold)
