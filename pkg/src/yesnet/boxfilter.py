"""Learned box selection in place of NMS.

Per-detection feature vectors (anchor feature row, decoded box5, and the
quadratic expansion x2 y2 xy w2 h2 wh) are arranged into a confidence-sorted
sequence with the best detection in the middle and confidence decaying toward
both ends. A bidirectional RNN reads the sequence and emits, per position,
two keep/drop logits, a refined box5 (decoded against the input box), and
class logits. A classwise greedy NMS baseline lives here too.

The decoded box5 entering the sequence is gradient-stopped: filter-loss
gradients reach the fully connected anchor map only through the feature rows,
never through the 1x1 projection.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .anchors import Box, iou_matrix
from .head import Detection, decode_tensor
from .layers import linear_params
from .spatial import make_cell_io

AUG_WIDTH = 11  # box5 + quadratic expansion


@dataclass
class FilterItem:
    feature: np.ndarray  # [D] anchor feature row
    box5: np.ndarray     # [x, y, w, h, c]
    aug6: np.ndarray     # [x2, y2, xy, w2, h2, wh]

    @property
    def vector(self):
        return np.concatenate([self.feature, self.box5, self.aug6])


def augment(feature, detection):
    """Concatenate feature row, box5 and its quadratic expansion."""
    b = detection.box
    box5 = np.array([b.cx, b.cy, b.w, b.h, detection.confidence])
    aug6 = np.array([
        b.cx ** 2, b.cy ** 2, b.cx * b.cy, b.w ** 2, b.h ** 2, b.w * b.h,
    ])
    return FilterItem(np.asarray(feature, dtype=np.float64), box5, aug6)


def sequence_order(confidences, m):
    """Origin index per sequence position (-1 for pads): best detection at
    position m//2, then ranks alternate right, left, ... outward."""
    if m < 1:
        raise ValueError(f"sequence_order: sequence length must be >= 1, got {m}")
    conf = np.asarray(confidences, dtype=np.float64)
    ranked = sorted(range(len(conf)), key=lambda i: (-conf[i], i))[:m]
    order = np.full(m, -1, dtype=np.int64)
    center = m // 2
    positions = [center]
    right, left = center + 1, center - 1
    take_right = True
    while len(positions) < m:
        if take_right and right < m:
            positions.append(right)
            right += 1
        elif left >= 0:
            positions.append(left)
            left -= 1
        else:
            positions.append(right)
            right += 1
        take_right = not take_right
    for rank, origin in enumerate(ranked):
        order[positions[rank]] = origin
    return order


@dataclass
class FilterSequence:
    items: list            # length m, zero items at pads
    origin_indices: np.ndarray  # [m], anchor index or -1
    mask: np.ndarray       # [m] bool, True at real positions

    @property
    def vectors(self):
        return np.stack([it.vector for it in self.items])


def build_sequence(items, m):
    """Top-m items by confidence in the center-out arrangement; short inputs
    are padded at the ends with zero items flagged non-trainable."""
    order = sequence_order([it.box5[4] for it in items], m)
    width_f = len(items[0].feature) if items else 0
    out = []
    for origin in order:
        if origin >= 0:
            out.append(items[origin])
        else:
            out.append(FilterItem(np.zeros(width_f), np.zeros(5), np.zeros(6)))
    return FilterSequence(items=out, origin_indices=order, mask=order >= 0)


def assemble_sequence_tensor(feats, boxes, conf, order):
    """Differentiable sequence assembly: [N,D] features stay live, box5/aug6
    are gradient-stopped, rows gather into [M, D+11] with zero pad rows."""
    box5 = ad.stop_gradient(ad.concat([boxes, conf], axis=1))
    n = box5.shape[0]
    col = lambda i: ad.slice_tensor(box5, ((0, n), (i, i + 1)))
    x, y, w, h = col(0), col(1), col(2), col(3)
    aug6 = ad.concat([
        ad.multiply(x, x), ad.multiply(y, y), ad.multiply(x, y),
        ad.multiply(w, w), ad.multiply(h, h), ad.multiply(w, h),
    ], axis=1)
    items = ad.concat([feats, box5, aug6], axis=1)
    return ad.take_rows(items, order)


class FilterHead:
    """Bidirectional cell pair over sequence items plus a per-position output
    map to 2 keep logits, 5 box values and the class logits."""

    def __init__(self, item_dim, hidden, num_classes, rng, cell="tanh"):
        self.num_classes = num_classes
        self.fwd = make_cell_io(item_dim, hidden, rng, cell)
        self.bwd = make_cell_io(item_dim, hidden, rng, cell)
        self.out_w, self.out_b = linear_params(rng, hidden, 7 + num_classes)

    @property
    def item_dim(self):
        return self.fwd.w_in.shape[1]

    def params(self, prefix="filter"):
        out = {}
        out.update(self.fwd.params(f"{prefix}.fwd"))
        out.update(self.bwd.params(f"{prefix}.bwd"))
        out[f"{prefix}.out_w"] = self.out_w
        out[f"{prefix}.out_b"] = self.out_b
        return out


@dataclass
class FilterOutputs:
    keep_probs: ad.Tensor   # [M, 2], S1 = keep at column 1, S0 = drop at 0
    boxes: ad.Tensor        # [M, 4] refined
    conf: ad.Tensor         # [M, 1] refined confidence
    class_probs: ad.Tensor  # [M, C]


def filter_forward(seq, head):
    """Sequence (FilterSequence or [M, D+11] Tensor) -> FilterOutputs."""
    x = ad.constant(seq.vectors) if isinstance(seq, FilterSequence) else seq
    m, width = x.shape
    if width != head.item_dim or width < AUG_WIDTH:
        raise ValueError(f"filter_forward: item width {width} vs head {head.item_dim}")
    hidden = head.fwd.hidden
    s3 = x.reshape((m, 1, width))
    out_f = ad.rnn_scan(s3, head.fwd.w_in, head.fwd.w_h, head.fwd.b,
                        reverse=False, cell=head.fwd.kind)
    out_b = ad.rnn_scan(s3, head.bwd.w_in, head.bwd.w_h, head.bwd.b,
                        reverse=True, cell=head.bwd.kind)
    h = ad.add(out_f, out_b).reshape((m, hidden))
    out = ad.add(ad.matmul(h, head.out_w), head.out_b)
    keep = ad.softmax(ad.slice_tensor(out, ((0, m), (0, 2))))
    refined_raw = ad.slice_tensor(out, ((0, m), (2, 7 + head.num_classes)))
    input_boxes = x.data[:, width - AUG_WIDTH:width - AUG_WIDTH + 4]
    boxes, conf, probs = decode_tensor(refined_raw, input_boxes)
    return FilterOutputs(keep, boxes, conf, probs)


def match_outputs(outputs, gts, mask):
    """Greedy gt -> sequence-position matching by refined-box IOU; only real
    positions are eligible."""
    real = np.flatnonzero(mask)
    if len(gts) > len(real):
        raise ValueError(f"match_outputs: {len(gts)} gts > {len(real)} real positions")
    if not gts:
        return []
    gt_arr = np.array([g[0].as_array() for g in gts])
    m = iou_matrix(gt_arr, outputs.boxes.data[real])
    taken = np.zeros(len(real), dtype=bool)
    pairs = []
    for gi in range(len(gts)):
        row = np.where(taken, -1.0, m[gi])
        j = int(row.argmax())
        taken[j] = True
        pairs.append((gi, int(real[j])))
    return pairs


def filter_loss(outputs, gts, matching, mask):
    """Multi-part filter loss: matched positions pay box/confidence residuals,
    -log S1 and -log p(class), averaged over the K matches; unmatched real
    positions pay squared confidence and -log S0 over N - K. Pads are
    excluded everywhere; K = 0 leaves only the unmatched terms over N."""
    m = outputs.keep_probs.shape[0]
    num_classes = outputs.class_probs.shape[1]
    mask = np.asarray(mask, dtype=bool)
    n_real = int(mask.sum())
    k = len(matching)

    matched_pos = [pos for _, pos in matching]
    matched_flag = np.zeros(m, dtype=bool)
    matched_flag[matched_pos] = True
    unmatched_pos = [p for p in range(m) if mask[p] and not matched_flag[p]]

    terms = []
    if k > 0:
        tgt_xy = np.array([(gts[gi][0].cx, gts[gi][0].cy) for gi, _ in matching])
        tgt_wh = np.array([(gts[gi][0].w, gts[gi][0].h) for gi, _ in matching])
        onehot = np.zeros((k, num_classes))
        for row, (gi, _) in enumerate(matching):
            onehot[row, gts[gi][1]] = 1.0
        box_rows = ad.take_rows(outputs.boxes, matched_pos)
        xy = ad.slice_tensor(box_rows, ((0, k), (0, 2)))
        wh = ad.slice_tensor(box_rows, ((0, k), (2, 4)))
        coord = ad.square(ad.subtract(xy, ad.constant(tgt_xy))).sum()
        size = ad.square(ad.subtract(ad.sqrt(wh), ad.constant(np.sqrt(tgt_wh)))).sum()
        conf_rows = ad.take_rows(outputs.conf, matched_pos)
        conf_hit = ad.square(ad.subtract(conf_rows, ad.constant(np.ones((k, 1))))).sum()
        keep_rows = ad.take_rows(outputs.keep_probs, matched_pos)
        s1 = ad.slice_tensor(keep_rows, ((0, k), (1, 2)))
        keep_ll = ad.scalar_mul(ad.log(s1).sum(), -1.0)
        prob_rows = ad.take_rows(outputs.class_probs, matched_pos)
        picked = ad.multiply(prob_rows, ad.constant(onehot)).sum(axis=1)
        cls_ll = ad.scalar_mul(ad.log(picked).sum(), -1.0)
        matched_total = ad.add(ad.add(coord, size), ad.add(conf_hit, ad.add(keep_ll, cls_ll)))
        terms.append(ad.scalar_mul(matched_total, 1.0 / k))

    denom = n_real - k if k > 0 else n_real
    if unmatched_pos and denom > 0:
        conf_rows = ad.take_rows(outputs.conf, unmatched_pos)
        conf_miss = ad.square(conf_rows).sum()
        keep_rows = ad.take_rows(outputs.keep_probs, unmatched_pos)
        s0 = ad.slice_tensor(keep_rows, ((0, len(unmatched_pos)), (0, 1)))
        drop_ll = ad.scalar_mul(ad.log(s0).sum(), -1.0)
        terms.append(ad.scalar_mul(ad.add(conf_miss, drop_ll), 1.0 / denom))

    if not terms:
        return ad.constant(0.0)
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return total


def select_outputs(outputs, keep_threshold, mask):
    """Detections at real positions whose keep probability exceeds the
    threshold."""
    if not 0.0 <= keep_threshold <= 1.0:
        raise ValueError(f"select_outputs: threshold {keep_threshold} outside [0, 1]")
    s1 = outputs.keep_probs.data[:, 1]
    dets = []
    for pos in range(len(s1)):
        if mask[pos] and s1[pos] > keep_threshold:
            dets.append(Detection(
                Box(*outputs.boxes.data[pos]),
                float(outputs.conf.data[pos, 0]),
                outputs.class_probs.data[pos].copy(),
            ))
    return dets


@dataclass
class NmsConfig:
    iou_threshold: float = 0.5
    confidence_threshold: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.iou_threshold < 1.0:
            raise ValueError("NmsConfig: iou_threshold must be in (0, 1)")
        if not 0.0 <= self.confidence_threshold <= 1.0:
            raise ValueError("NmsConfig: confidence_threshold must be in [0, 1]")


def nms_baseline(dets, config):
    """Classwise greedy suppression: keep the best remaining detection of each
    class, drop same-class detections overlapping it beyond the threshold."""
    order = sorted(
        (i for i, d in enumerate(dets) if d.confidence >= config.confidence_threshold),
        key=lambda i: (-dets[i].confidence, i),
    )
    kept = []
    for i in order:
        candidate = dets[i]
        box = candidate.box.as_array()[None]
        suppressed = False
        for other in kept:
            if other.class_id != candidate.class_id:
                continue
            if iou_matrix(other.box.as_array()[None], box)[0, 0] > config.iou_threshold:
                suppressed = True
                break
        if not suppressed:
            kept.append(candidate)
    return kept
