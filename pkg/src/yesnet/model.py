"""Full detector: backbone features, anchor head, and the box-filter head.

Stage-1 loss is the detection loss alone; stage 2 adds the filter loss over
the assembled sequences, with the detection branch kept as an assist term.
Inference runs without a tape, selecting final boxes either through the
learned filter or through the greedy NMS baseline.
"""

from collections import OrderedDict

import numpy as np

from . import autodiff as ad
from .backbone import ShunNet
from .boxfilter import (
    FilterHead,
    NmsConfig,
    assemble_sequence_tensor,
    filter_forward,
    filter_loss,
    match_outputs,
    nms_baseline,
    select_outputs,
    sequence_order,
)
from .head import (
    DetectorHead,
    Detection,
    assign_responsibility,
    decode_detections,
    decode_tensor,
    detection_loss,
    head_forward,
)
from .layers import load_into
from .snapshot import load_params, save_params


class DetectionModel:
    def __init__(self, backbone_cfg, anchors_arr, filter_hidden=64, filter_cell="tanh",
                 head_seed=1):
        self.backbone = ShunNet(backbone_cfg)
        self.anchors_arr = np.asarray(anchors_arr, dtype=np.float64)
        self.num_classes = backbone_cfg.num_classes
        side = self.backbone.feature_side
        d = backbone_cfg.feature_channels
        rng = np.random.default_rng(head_seed)
        self.head = DetectorHead(side * side, len(self.anchors_arr), d, self.num_classes, rng)
        self.filter = FilterHead(d + 11, filter_hidden, self.num_classes, rng, filter_cell)

    # -- parameter bookkeeping ---------------------------------------------
    def detect_params(self):
        out = OrderedDict(self.backbone.params())
        out.update(self.head.params())
        return out

    def params(self):
        out = self.detect_params()
        out.update(self.filter.params())
        return out

    def save(self, path):
        save_params(self.params(), path)

    def load(self, path, detect_only=False):
        loaded = load_params(path)
        load_into(self.detect_params() if detect_only else self.params(), loaded)

    # -- forward paths -------------------------------------------------------
    def image_fmap(self, fmaps, i, batch):
        d = self.backbone.config.feature_channels
        s = self.backbone.feature_side
        one = ad.slice_tensor(fmaps, ((i, i + 1), (0, d), (0, s), (0, s)))
        return one.reshape((d, s, s))

    def detect_one(self, fmap):
        """Per-image head pass -> (anchor features, raw, decoded tensors)."""
        feats, raw = head_forward(fmap, self.head, self.anchors_arr)
        boxes, conf, probs = decode_tensor(raw, self.anchors_arr)
        return feats, raw, (boxes, conf, probs)

    def stage1_loss(self, images, gt_lists, lam_coord=5.0, lam_noobj=0.5,
                    box_weight=1.0, cls_weight=1.0):
        """Mean detection loss over a batch. images: [B,3,S,S] array."""
        x = ad.Tensor(images)
        fmaps = self.backbone.features(x)
        b = images.shape[0]
        total = None
        for i in range(b):
            _, raw, decoded = self.detect_one(self.image_fmap(fmaps, i, b))
            dets = decode_detections(raw.data, self.anchors_arr)
            assignment = assign_responsibility(gt_lists[i], dets)
            loss = detection_loss(
                raw, self.anchors_arr, gt_lists[i], assignment,
                lam_coord=lam_coord, lam_noobj=lam_noobj,
                box_weight=box_weight, cls_weight=cls_weight, decoded=decoded,
            )
            total = loss if total is None else ad.add(total, loss)
        return ad.scalar_mul(total, 1.0 / b)

    def stage2_loss(self, images, gt_lists, seq_len, lam_coord=5.0, lam_noobj=0.5,
                    box_weight=1.0, cls_weight=1.0, assist_weight=1.0):
        """Filter loss plus assist_weight times the detection loss, both
        averaged over the batch. Returns (total, filter_part, assist_part)."""
        x = ad.Tensor(images)
        fmaps = self.backbone.features(x)
        b = images.shape[0]
        filter_total = None
        assist_total = None
        for i in range(b):
            feats, raw, decoded = self.detect_one(self.image_fmap(fmaps, i, b))
            boxes, conf, probs = decoded
            order = sequence_order(conf.data[:, 0], seq_len)
            seq = assemble_sequence_tensor(feats, boxes, conf, order)
            outputs = filter_forward(seq, self.filter)
            mask = order >= 0
            matching = match_outputs(outputs, gt_lists[i], mask)
            floss = filter_loss(outputs, gt_lists[i], matching, mask)
            filter_total = floss if filter_total is None else ad.add(filter_total, floss)
            if assist_weight != 0.0:
                dets = decode_detections(raw.data, self.anchors_arr)
                assignment = assign_responsibility(gt_lists[i], dets)
                aloss = detection_loss(
                    raw, self.anchors_arr, gt_lists[i], assignment,
                    lam_coord=lam_coord, lam_noobj=lam_noobj,
                    box_weight=box_weight, cls_weight=cls_weight, decoded=decoded,
                )
                assist_total = aloss if assist_total is None else ad.add(assist_total, aloss)
        filter_part = ad.scalar_mul(filter_total, 1.0 / b)
        if assist_total is None:
            return filter_part, filter_part, None
        assist_part = ad.scalar_mul(assist_total, 1.0 / b)
        total = ad.add(filter_part, ad.scalar_mul(assist_part, assist_weight))
        return total, filter_part, assist_part

    # -- inference ------------------------------------------------------------
    def detect_images(self, images, selector="filter", seq_len=50, keep_threshold=0.5,
                      nms_config=None):
        """[B,3,S,S] -> per-image final detections via the chosen selector."""
        x = ad.constant(images)
        fmaps = self.backbone.features(x)
        b = images.shape[0]
        results = []
        for i in range(b):
            feats, raw, decoded = self.detect_one(self.image_fmap(fmaps, i, b))
            boxes, conf, probs = decoded
            if selector == "nms":
                dets = decode_detections(raw.data, self.anchors_arr)
                results.append(nms_baseline(dets, nms_config or NmsConfig()))
            elif selector == "filter":
                order = sequence_order(conf.data[:, 0], seq_len)
                seq = assemble_sequence_tensor(feats, boxes, conf, order)
                outputs = filter_forward(seq, self.filter)
                results.append(select_outputs(outputs, keep_threshold, order >= 0))
            elif selector == "raw":
                results.append(decode_detections(raw.data, self.anchors_arr))
            else:
                raise ValueError(f"detect_images: unknown selector {selector!r}")
        return results
