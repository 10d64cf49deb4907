"""VOC-style evaluation (11-point interpolated AP) and run reports."""

import csv
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .anchors import iou_matrix


@dataclass
class EvalResult:
    per_class: dict          # class id -> AP, or None when the class has no gt
    mean_ap: float
    curves: dict = field(default_factory=dict)  # class id -> [(recall, precision)]
    iou_threshold: float = 0.5

    def to_json_dict(self):
        return {
            "map": self.mean_ap,
            "per_class": {str(c): ap for c, ap in sorted(self.per_class.items())},
            "curves": {str(c): pts for c, pts in sorted(self.curves.items())},
            "iou_threshold": self.iou_threshold,
        }


def _eleven_point_ap(recalls, precisions):
    ap = 0.0
    for r in np.linspace(0.0, 1.0, 11):
        mask = recalls >= r - 1e-12
        ap += precisions[mask].max() if mask.any() else 0.0
    return ap / 11.0


def evaluate_map(predictions, ground_truths, iou_threshold=0.5):
    """predictions: per-image Detection lists; ground_truths: per-image
    [(Box, class_id)] lists. Greedy confidence-ranked matching, each gt used
    at most once, IOU >= threshold."""
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError(f"evaluate_map: iou_threshold {iou_threshold} outside (0, 1)")
    classes = set()
    for dets in predictions:
        classes.update(d.class_id for d in dets)
    for gts in ground_truths:
        classes.update(c for _, c in gts)

    per_class = {}
    curves = {}
    for cls in sorted(classes):
        gt_boxes = []
        for img, gts in enumerate(ground_truths):
            for box, c in gts:
                if c == cls:
                    gt_boxes.append((img, box.as_array()))
        preds = []
        order = 0
        for img, dets in enumerate(predictions):
            for d in dets:
                if d.class_id == cls:
                    preds.append((-d.confidence, order, img, d.box.as_array()))
                order += 1
        if not gt_boxes:
            per_class[cls] = None
            curves[cls] = []
            continue
        preds.sort(key=lambda p: (p[0], p[1]))
        matched = [False] * len(gt_boxes)
        tp = np.zeros(len(preds))
        for rank, (_, _, img, box) in enumerate(preds):
            best_iou, best_gt = 0.0, -1
            for gi, (gimg, gbox) in enumerate(gt_boxes):
                if gimg != img or matched[gi]:
                    continue
                v = iou_matrix(box[None], gbox[None])[0, 0]
                if v > best_iou:
                    best_iou, best_gt = v, gi
            if best_gt >= 0 and best_iou >= iou_threshold:
                matched[best_gt] = True
                tp[rank] = 1.0
        cum_tp = np.cumsum(tp)
        ranks = np.arange(1, len(preds) + 1)
        recalls = cum_tp / len(gt_boxes)
        precisions = cum_tp / ranks
        per_class[cls] = _eleven_point_ap(recalls, precisions) if len(preds) else 0.0
        curves[cls] = list(zip(recalls.tolist(), precisions.tolist()))

    defined = [ap for ap in per_class.values() if ap is not None]
    mean_ap = float(np.mean(defined)) if defined else 0.0
    return EvalResult(per_class=per_class, mean_ap=mean_ap, curves=curves,
                      iou_threshold=iou_threshold)


def detection_f1(predictions, ground_truths, iou_threshold=0.5):
    """Set-level precision/recall/F1: per image, confidence-ordered greedy
    matching of same-class predictions to unmatched gts at the threshold."""
    tp = fp = fn = 0
    for dets, gts in zip(predictions, ground_truths):
        order = sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, i))
        used = [False] * len(gts)
        for i in order:
            det = dets[i]
            best, best_gt = 0.0, -1
            for gi, (gbox, gcls) in enumerate(gts):
                if used[gi] or gcls != det.class_id:
                    continue
                v = iou_matrix(det.box.as_array()[None], gbox.as_array()[None])[0, 0]
                if v > best:
                    best, best_gt = v, gi
            if best_gt >= 0 and best >= iou_threshold:
                used[best_gt] = True
                tp += 1
            else:
                fp += 1
        fn += used.count(False)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def config_hash(items):
    """Stable short hash over ("section.key", value-string) pairs."""
    canon = "\n".join(f"{k}={v}" for k, v in sorted(items))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:12]


def emit_report(results, json_path, csv_path):
    """results: list of {method, map, per_class, images_per_sec, seed,
    config_hash}. Writes a JSON report and a CSV table (method, map,
    images_per_sec)."""
    if not results:
        raise ValueError("emit_report: no results")
    with open(json_path, "w") as fh:
        json.dump(results, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "map", "images_per_sec"])
        for r in results:
            ips = r.get("images_per_sec")
            writer.writerow([
                r["method"], repr(float(r["map"])),
                "" if ips is None else repr(float(ips)),
            ])
