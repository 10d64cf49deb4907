"""Detection head over global anchors.

The backbone feature map is flattened to a cell axis, a fully connected map
takes cells to anchors (shared across channels), and after a transpose a
shared linear projection emits, per anchor: box offsets t_x t_y t_w t_h, a
confidence logit and class logits. Boxes decode against their global anchor
with bounded offsets:

    cx = clamp(a.cx + a.w * tanh(t_x), 0, 1)      (cy analogous via a.h)
    w  = clamp(a.w * exp(t_w), 1e-4, 1)           (h analogous)

Responsibility is greedy highest-IOU per ground truth, and the loss pulls
responsible predictions to their target box/class and everyone else's
confidence to zero.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .anchors import Box, iou_matrix
from .layers import linear_params

EXTENT_FLOOR = 1e-4


@dataclass
class Detection:
    box: Box
    confidence: float
    class_probs: np.ndarray

    @property
    def class_id(self):
        return int(self.class_probs.argmax())


class DetectorHead:
    def __init__(self, cells, num_anchors, channels, num_classes, rng):
        self.num_classes = num_classes
        self.fc_w, self.fc_b = linear_params(rng, cells, num_anchors)
        self.proj_w, self.proj_b = linear_params(rng, channels, 5 + num_classes)

    def params(self, prefix="head"):
        return {
            f"{prefix}.fc_w": self.fc_w,
            f"{prefix}.fc_b": self.fc_b,
            f"{prefix}.proj_w": self.proj_w,
            f"{prefix}.proj_b": self.proj_b,
        }


def head_forward(fmap, head, anchors_arr):
    """[D, Hf, Wf] feature map -> per-anchor features [N, D] and raw [N, 5+C].

    The anchor features are the transposed FC output; the box filter consumes
    them alongside the decoded boxes.
    """
    d, hf, wf = fmap.shape
    cells, n = head.fc_w.shape
    if hf * wf != cells:
        raise ValueError(f"head_forward: map {fmap.shape} has {hf * wf} cells, fc expects {cells}")
    if len(anchors_arr) != n:
        raise ValueError(f"head_forward: {len(anchors_arr)} anchors vs fc width {n}")
    x = fmap.reshape((d, hf * wf))
    y = ad.add(ad.matmul(x, head.fc_w), head.fc_b)
    feats = y.transpose()
    raw = ad.add(ad.matmul(feats, head.proj_w), head.proj_b)
    return feats, raw


def decode_tensor(raw, anchors_arr):
    """Differentiable decode of [N, 5+C] raw rows against [N, 4] anchors."""
    n, width = raw.shape
    cols = lambda lo, hi: ad.slice_tensor(raw, ((0, n), (lo, hi)))
    a = np.asarray(anchors_arr, dtype=np.float64)
    acx, acy = ad.constant(a[:, 0:1]), ad.constant(a[:, 1:2])
    aw, ah = ad.constant(a[:, 2:3]), ad.constant(a[:, 3:4])
    cx = ad.clip(ad.add(acx, ad.multiply(aw, ad.tanh(cols(0, 1)))), 0.0, 1.0)
    cy = ad.clip(ad.add(acy, ad.multiply(ah, ad.tanh(cols(1, 2)))), 0.0, 1.0)
    # pre-clipping the log-extent offsets only shaves float overflow: beyond
    # +-50 the outer extent clamp saturates (and zeroes the gradient) anyway
    w = ad.clip(ad.multiply(aw, ad.exp(ad.clip(cols(2, 3), -50.0, 50.0))), EXTENT_FLOOR, 1.0)
    h = ad.clip(ad.multiply(ah, ad.exp(ad.clip(cols(3, 4), -50.0, 50.0))), EXTENT_FLOOR, 1.0)
    boxes = ad.concat([cx, cy, w, h], axis=1)
    conf = ad.sigmoid(cols(4, 5))
    probs = ad.softmax(cols(5, width))
    return boxes, conf, probs


def decode_detections(raw, anchors_arr):
    """Raw rows (array or Tensor) -> list of Detection."""
    data = np.asarray(getattr(raw, "data", raw), dtype=np.float64)
    boxes, conf, probs = decode_tensor(ad.constant(data), anchors_arr)
    return [
        Detection(Box(*b), float(c), p.copy())
        for b, c, p in zip(boxes.data, conf.data[:, 0], probs.data)
    ]


def decode_box(raw_row, anchor):
    """Single-row convenience wrapper over decode_detections."""
    arr = anchor.as_array() if isinstance(anchor, Box) else np.asarray(anchor)
    return decode_detections(np.asarray(raw_row)[None], arr[None])[0]


def _boxes_array(items):
    rows = []
    for item in items:
        if isinstance(item, Detection):
            rows.append(item.box.as_array())
        elif isinstance(item, Box):
            rows.append(item.as_array())
        else:
            rows.append(np.asarray(item[0].as_array() if isinstance(item[0], Box) else item[0]))
    return np.array(rows).reshape(len(rows), 4)


def assign_responsibility(gts, dets):
    """Greedy, in ground-truth order: each takes the unassigned detection of
    highest IOU (ties to the lowest index). Returns [(gt_idx, det_idx)]."""
    if len(gts) > len(dets):
        raise ValueError(f"assign_responsibility: {len(gts)} gts > {len(dets)} detections")
    if not gts:
        return []
    m = iou_matrix(_boxes_array(gts), _boxes_array(dets))
    taken = np.zeros(m.shape[1], dtype=bool)
    pairs = []
    for gi in range(m.shape[0]):
        row = np.where(taken, -1.0, m[gi])
        di = int(row.argmax())
        taken[di] = True
        pairs.append((gi, di))
    return pairs


def detection_loss(raw, anchors_arr, gts, assignment, lam_coord=5.0, lam_noobj=0.5,
                   box_weight=1.0, cls_weight=1.0, conf_targets=None, decoded=None):
    """Multi-part squared-error detection loss over all anchors.

    Responsible anchors pay coordinate terms (x, y and square-rooted w, h)
    weighted lam_coord, a confidence pull toward the prediction/target IOU,
    and a squared class-probability term; everyone else pays lam_noobj times
    squared confidence. ``conf_targets`` freezes the confidence targets
    (used by gradient checks); otherwise they are the current decoded IOUs,
    treated as constants.
    """
    n = raw.shape[0]
    num_classes = raw.shape[1] - 5
    boxes, conf, probs = decoded if decoded is not None else decode_tensor(raw, anchors_arr)

    resp = np.zeros((n, 1))
    tgt_xy = np.zeros((n, 2))
    tgt_wh = np.ones((n, 2))  # masked slots keep sqrt well-defined
    tgt_cls = np.zeros((n, num_classes))
    for gi, di in assignment:
        gt_box, gt_cls = gts[gi]
        resp[di, 0] = 1.0
        tgt_xy[di] = (gt_box.cx, gt_box.cy)
        tgt_wh[di] = (gt_box.w, gt_box.h)
        tgt_cls[di, gt_cls] = 1.0

    if conf_targets is None:
        conf_targets = np.zeros((n, 1))
        det_arr = boxes.data
        for gi, di in assignment:
            conf_targets[di, 0] = iou_matrix(
                _boxes_array([gts[gi]]), det_arr[di:di + 1]
            )[0, 0]
    conf_targets = np.asarray(conf_targets, dtype=np.float64).reshape(n, 1)

    resp_t = ad.constant(resp)
    noobj_t = ad.constant(1.0 - resp)
    xy = ad.slice_tensor(boxes, ((0, n), (0, 2)))
    wh = ad.slice_tensor(boxes, ((0, n), (2, 4)))
    coord = ad.multiply(resp_t, ad.square(ad.subtract(xy, ad.constant(tgt_xy)))).sum()
    size = ad.multiply(
        resp_t,
        ad.square(ad.subtract(ad.sqrt(wh), ad.constant(np.sqrt(tgt_wh)))),
    ).sum()
    conf_obj = ad.multiply(resp_t, ad.square(ad.subtract(conf, ad.constant(conf_targets)))).sum()
    conf_noobj = ad.multiply(noobj_t, ad.square(conf)).sum()
    cls = ad.multiply(resp_t, ad.square(ad.subtract(probs, ad.constant(tgt_cls)))).sum()

    box_part = ad.add(
        ad.scalar_mul(ad.add(coord, size), lam_coord),
        ad.add(conf_obj, ad.scalar_mul(conf_noobj, lam_noobj)),
    )
    return ad.add(ad.scalar_mul(box_part, box_weight), ad.scalar_mul(cls, cls_weight))
