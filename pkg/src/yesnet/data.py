"""Deterministic synthetic shape-detection data and annotation CSV I/O.

Images are noise backgrounds with 1-4 colored shapes (circle, square,
triangle map to class ids 0, 1, 2); every shape's bounding box is exact by
construction. Annotations round-trip through a normalized-coordinate CSV
with rows ``image_path,cx,cy,w,h,class_id``.
"""

import csv
import os
from dataclasses import dataclass

import numpy as np

from .anchors import Box

SHAPE_NAMES = ("circle", "square", "triangle")
BASE_COLORS = np.array([
    [0.85, 0.30, 0.30],
    [0.30, 0.85, 0.30],
    [0.30, 0.40, 0.90],
])
NOISE_AMPLITUDE = 0.25
MAX_OBJECTS = 4
OVERLAP_LIMIT = 0.25


class AnnotationError(ValueError):
    """Malformed or out-of-range annotation row."""


@dataclass
class Sample:
    image: np.ndarray  # [3, S, S] float64 in [0, 1]
    objects: list      # [(Box, class_id)]


def _pixel_grid(side):
    coords = (np.arange(side) + 0.5) / side
    return np.meshgrid(coords, coords)  # x varies along axis 1, y along axis 0


def _shape_mask(cls, box, xx, yy):
    half_w, half_h = box.w / 2, box.h / 2
    if cls == 0:  # circle
        return (xx - box.cx) ** 2 + (yy - box.cy) ** 2 <= half_w ** 2
    if cls == 1:  # square
        return (np.abs(xx - box.cx) <= half_w) & (np.abs(yy - box.cy) <= half_h)
    # triangle: apex top-center, base at the bottom of the box
    t = (yy - (box.cy - half_h)) / box.h
    return (t >= 0) & (t <= 1) & (np.abs(xx - box.cx) <= t * half_w)


def _sample_box(cls, rng):
    if cls == 0:
        r = rng.uniform(0.08, 0.2)
        w = h = 2 * r
    elif cls == 1:
        w = h = rng.uniform(0.16, 0.4)
    else:
        w = rng.uniform(0.16, 0.4)
        h = rng.uniform(0.16, 0.4)
    cx = rng.uniform(w / 2 + 0.01, 1 - w / 2 - 0.01)
    cy = rng.uniform(h / 2 + 0.01, 1 - h / 2 - 0.01)
    return Box(cx, cy, w, h)


def _iou_pair(a, b):
    iw = max(0.0, min(a.cx + a.w / 2, b.cx + b.w / 2) - max(a.cx - a.w / 2, b.cx - b.w / 2))
    ih = max(0.0, min(a.cy + a.h / 2, b.cy + b.h / 2) - max(a.cy - a.h / 2, b.cy - b.h / 2))
    inter = iw * ih
    return inter / (a.w * a.h + b.w * b.h - inter)


def _render_sample(rng, num_classes, side, xx, yy, n_objects):
    image = rng.uniform(0.0, NOISE_AMPLITUDE, (3, side, side))
    objects = []
    for _ in range(n_objects):
        cls = int(rng.integers(num_classes))
        for _ in range(50):
            box = _sample_box(cls, rng)
            if all(_iou_pair(box, other) <= OVERLAP_LIMIT for other, _ in objects):
                break
        else:
            continue
        color = np.clip(BASE_COLORS[cls] + rng.uniform(-0.1, 0.1, 3), 0.0, 1.0)
        mask = _shape_mask(cls, box, xx, yy)
        image[:, mask] = color[:, None]
        objects.append((box, cls))
    return Sample(image=image, objects=objects)


def gen_synthetic(seed, count, num_classes, side):
    """Detection samples with 1-4 shapes each, fully determined by the seed."""
    if count < 1:
        raise ValueError(f"gen_synthetic: count must be >= 1, got {count}")
    if not 1 <= num_classes <= 3:
        raise ValueError(f"gen_synthetic: num_classes must be in 1..3, got {num_classes}")
    rng = np.random.default_rng(seed)
    xx, yy = _pixel_grid(side)
    samples = []
    while len(samples) < count:
        s = _render_sample(rng, num_classes, side, xx, yy, int(rng.integers(1, MAX_OBJECTS + 1)))
        if s.objects:
            samples.append(s)
    return samples


def gen_classification(seed, count, num_classes, side):
    """Single-shape samples for classifier pretraining: (images [N,3,S,S],
    labels [N])."""
    if count < 1 or not 1 <= num_classes <= 3:
        raise ValueError("gen_classification: bad count or num_classes")
    rng = np.random.default_rng(seed)
    xx, yy = _pixel_grid(side)
    images = np.empty((count, 3, side, side))
    labels = np.empty(count, dtype=np.int64)
    for i in range(count):
        while True:
            s = _render_sample(rng, num_classes, side, xx, yy, 1)
            if s.objects:
                break
        images[i] = s.image
        labels[i] = s.objects[0][1]
    return images, labels


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def save_annotations(index, path):
    """Write [(image_path, [(Box, class_id)])] to CSV."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for image_path, objects in index:
            for box, cls in objects:
                writer.writerow([
                    image_path, repr(box.cx), repr(box.cy), repr(box.w), repr(box.h), cls,
                ])


def load_annotations(path):
    """Read the CSV back into [(image_path, [(Box, class_id)])], first
    appearance order. Malformed rows raise with their line number."""
    index = []
    by_path = {}
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            if len(row) != 6:
                raise AnnotationError(f"{path}:{lineno}: expected 6 fields, got {len(row)}")
            image_path = row[0]
            try:
                cx, cy, w, h = (float(v) for v in row[1:5])
                cls = int(row[5])
                if cls < 0:
                    raise ValueError("negative class id")
                box = Box(cx, cy, w, h)
            except ValueError as exc:
                raise AnnotationError(f"{path}:{lineno}: {exc}") from None
            if image_path not in by_path:
                by_path[image_path] = []
                index.append((image_path, by_path[image_path]))
            by_path[image_path].append((box, cls))
    return index


def save_dataset(samples, dirpath):
    """Write images as float64 .npy plus annotations.csv; returns the index."""
    img_dir = os.path.join(dirpath, "images")
    os.makedirs(img_dir, exist_ok=True)
    index = []
    for i, sample in enumerate(samples):
        rel = os.path.join("images", f"img_{i:05d}.npy")
        np.save(os.path.join(dirpath, rel), sample.image)
        index.append((rel, sample.objects))
    save_annotations(index, os.path.join(dirpath, "annotations.csv"))
    return index


def load_dataset(dirpath):
    index = load_annotations(os.path.join(dirpath, "annotations.csv"))
    samples = []
    for rel, objects in index:
        image = np.load(os.path.join(dirpath, rel))
        samples.append(Sample(image=image, objects=list(objects)))
    return samples


def dataset_boxes(samples):
    return [box for s in samples for box, _ in s.objects]
