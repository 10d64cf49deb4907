import math

import numpy as np
import pytest

from yesnet import autodiff as ad
from yesnet.anchors import Box, iou_matrix
from yesnet.boxfilter import (
    FilterHead,
    FilterItem,
    FilterOutputs,
    FilterSequence,
    NmsConfig,
    augment,
    build_sequence,
    filter_forward,
    filter_loss,
    nms_baseline,
    select_outputs,
    sequence_order,
)
from yesnet.head import Detection


def rand(shape, seed=0, scale=1.0):
    return np.random.default_rng(seed).uniform(-1.0, 1.0, shape) * scale


def make_items(confidences, width_f=4):
    items = []
    for i, c in enumerate(confidences):
        feature = np.full(width_f, float(i))
        box5 = np.array([0.5, 0.5, 0.2, 0.2, float(c)])
        aug6 = np.array([0.25, 0.25, 0.25, 0.04, 0.04, 0.04])
        items.append(FilterItem(feature, box5, aug6))
    return items


def assert_unimodal(values):
    peak = int(np.argmax(values))
    assert all(values[i] <= values[i + 1] + 1e-12 for i in range(peak))
    assert all(values[i] >= values[i + 1] - 1e-12 for i in range(peak, len(values) - 1))


class TestAugment:
    def test_quadratic_expansion_values(self):
        det = Detection(Box(0.5, 0.5, 0.2, 0.1), 0.8, np.array([0.2, 0.5, 0.3]))
        item = augment(np.zeros(4), det)
        np.testing.assert_allclose(item.box5, [0.5, 0.5, 0.2, 0.1, 0.8], atol=1e-15)
        np.testing.assert_allclose(item.aug6, [0.25, 0.25, 0.25, 0.04, 0.01, 0.02], atol=1e-12)

    def test_pad_item_is_all_zero(self):
        pad = FilterItem(np.zeros(4), np.zeros(5), np.zeros(6))
        np.testing.assert_array_equal(pad.vector, 0.0)

    def test_item_length_is_d_plus_11(self):
        det = Detection(Box(0.4, 0.4, 0.2, 0.2), 0.5, np.array([1.0, 0.0, 0.0]))
        assert augment(np.zeros(64), det).vector.shape == (75,)


class TestSequence:
    def test_alternation_forced_by_rule(self):
        seq = build_sequence(make_items([0.9, 0.7, 0.5, 0.3, 0.1]), 5)
        got = [it.box5[4] for it in seq.items]
        np.testing.assert_allclose(got, [0.1, 0.5, 0.9, 0.7, 0.3], atol=1e-15)

    def test_m_one_keeps_only_argmax(self):
        seq = build_sequence(make_items([0.2, 0.9, 0.4]), 1)
        assert seq.origin_indices.tolist() == [1]
        assert seq.items[0].box5[4] == pytest.approx(0.9)

    def test_top_m_multiset_and_unimodality(self):
        rng = np.random.default_rng(0)
        conf = rng.uniform(0.0, 1.0, 845)
        seq = build_sequence(make_items(conf), 200)
        values = np.array([it.box5[4] for it in seq.items])
        assert_unimodal(values)
        top = np.sort(conf)[-200:]
        np.testing.assert_allclose(np.sort(values), top, atol=1e-15)

    def test_short_input_pads_ends(self):
        seq = build_sequence(make_items([0.9, 0.7, 0.5]), 7)
        assert seq.mask.sum() == 3
        origins = seq.origin_indices
        real_positions = np.flatnonzero(seq.mask)
        assert set(real_positions) == {2, 3, 4}  # contiguous block around center
        assert all(origins[p] == -1 for p in (0, 1, 5, 6))
        assert_unimodal([it.box5[4] for it in seq.items])

    def test_tie_breaks_by_lower_index(self):
        order = sequence_order([0.5, 0.9, 0.5], 3)
        # rank order: idx 1 (0.9), then idx 0 before idx 2 on the 0.5 tie
        assert order.tolist()[1] == 1
        assert order.tolist()[2] == 0

    def test_nonpositive_length_rejected(self):
        with pytest.raises(ValueError, match="length"):
            sequence_order([0.5], 0)


class TestFilterForward:
    def _head(self, item_dim=15, hidden=6, classes=3, seed=0):
        return FilterHead(item_dim, hidden, classes, np.random.default_rng(seed))

    def test_keep_probs_sum_to_one(self):
        head = self._head()
        seq = build_sequence(make_items(rand(9, seed=1) * 0.5 + 0.5), 6)
        out = filter_forward(seq, head)
        np.testing.assert_allclose(out.keep_probs.data.sum(axis=1), 1.0, atol=1e-12)

    def test_zero_weights_give_half_half(self):
        head = self._head()
        for t in head.params().values():
            t.data[...] = 0.0
        seq = build_sequence(make_items([0.9, 0.3]), 4)
        out = filter_forward(seq, head)
        np.testing.assert_allclose(out.keep_probs.data, 0.5, atol=1e-15)

    def test_width_mismatch_rejected(self):
        head = self._head(item_dim=20)
        seq = build_sequence(make_items([0.5]), 2)
        with pytest.raises(ValueError, match="width"):
            filter_forward(seq, head)

    def test_gradient_check_through_sequence_and_head(self):
        # feature columns are live, box5/aug6 are constants (the stage-2
        # gradient stop), exactly as assemble_sequence_tensor builds them
        head = self._head(item_dim=15, hidden=4, classes=2, seed=2)
        feats = ad.Tensor(rand((5, 4), seed=3, scale=0.5), requires_grad=True)
        box_aug = np.abs(rand((5, 11), seed=8, scale=0.3)) + 0.1
        weight_specs = [
            rand((5, 2), seed=4), rand((5, 4), seed=5),
            rand((5, 1), seed=6), rand((5, 2), seed=7),
        ]

        def f(feats_t, *params):
            items = ad.concat([feats_t, ad.constant(box_aug)], axis=1)
            out = filter_forward(items, head)
            pieces = [out.keep_probs, out.boxes, out.conf, out.class_probs]
            total = None
            for piece, w in zip(pieces, weight_specs):
                term = ad.multiply(piece, ad.constant(w)).sum()
                total = term if total is None else ad.add(term, total)
            return total

        points = [feats] + list(head.params().values())
        assert ad.gradient_check(f, points, eps=1e-5) < 1e-4


def outputs_from_arrays(keep, boxes, conf, probs):
    return FilterOutputs(
        keep_probs=ad.constant(keep), boxes=ad.constant(boxes),
        conf=ad.constant(conf), class_probs=ad.constant(probs),
    )


class TestFilterLoss:
    def test_perfect_match_contributes_zero(self):
        gt = Box(0.4, 0.5, 0.3, 0.2)
        out = outputs_from_arrays(
            keep=np.array([[0.0, 1.0]]),
            boxes=np.array([[0.4, 0.5, 0.3, 0.2]]),
            conf=np.array([[1.0]]),
            probs=np.array([[0.0, 1.0, 0.0]]),
        )
        loss = filter_loss(out, [(gt, 1)], [(0, 0)], np.array([True]))
        assert loss.item() == pytest.approx(0.0, abs=1e-15)

    def test_k_zero_with_confident_drops_is_zero(self):
        out = outputs_from_arrays(
            keep=np.array([[1.0, 0.0]] * 3),
            boxes=np.tile([0.5, 0.5, 0.2, 0.2], (3, 1)),
            conf=np.zeros((3, 1)),
            probs=np.full((3, 3), 1 / 3),
        )
        loss = filter_loss(out, [], [], np.array([True, True, True]))
        assert loss.item() == pytest.approx(0.0, abs=1e-15)

    def test_micro_case_matches_hand_evaluation(self):
        # N = 3 real positions, K = 1 match at position 1
        keep = np.array([[0.7, 0.3], [0.2, 0.8], [0.6, 0.4]])
        boxes = np.array([
            [0.2, 0.2, 0.1, 0.1],
            [0.42, 0.52, 0.28, 0.22],
            [0.8, 0.8, 0.15, 0.15],
        ])
        conf = np.array([[0.3], [0.9], [0.25]])
        probs = np.array([
            [0.5, 0.3, 0.2],
            [0.1, 0.7, 0.2],
            [0.3, 0.3, 0.4],
        ])
        gt = (0.4, 0.5, 0.3, 0.2)

        expected = (
            (boxes[1, 0] - gt[0]) ** 2 + (boxes[1, 1] - gt[1]) ** 2
            + (math.sqrt(boxes[1, 2]) - math.sqrt(gt[2])) ** 2
            + (math.sqrt(boxes[1, 3]) - math.sqrt(gt[3])) ** 2
            + (conf[1, 0] - 1.0) ** 2
            - math.log(keep[1, 1])
            - math.log(probs[1, 1])
        ) / 1.0
        expected += (conf[0, 0] ** 2 + conf[2, 0] ** 2
                     - math.log(keep[0, 0]) - math.log(keep[2, 0])) / (3 - 1)

        out = outputs_from_arrays(keep, boxes, conf, probs)
        loss = filter_loss(out, [(Box(*gt), 1)], [(0, 1)], np.array([True] * 3))
        assert loss.item() == pytest.approx(expected, abs=1e-9)

    def test_padded_positions_excluded(self):
        keep = np.array([[0.5, 0.5], [0.2, 0.8], [0.5, 0.5]])
        boxes = np.tile([0.4, 0.5, 0.3, 0.2], (3, 1))
        conf = np.array([[0.9], [1.0], [0.9]])
        probs = np.full((3, 3), 1 / 3)
        gt = Box(0.4, 0.5, 0.3, 0.2)
        mask = np.array([False, True, False])  # only the middle is real
        loss = filter_loss(outputs_from_arrays(keep, boxes, conf, probs),
                           [(gt, 0)], [(0, 1)], mask)
        expected = -math.log(0.8) - math.log(1 / 3)
        assert loss.item() == pytest.approx(expected, abs=1e-12)


class TestSelectOutputs:
    def _outputs(self, s1):
        m = len(s1)
        keep = np.stack([1.0 - np.asarray(s1), np.asarray(s1)], axis=1)
        return outputs_from_arrays(
            keep, np.tile([0.5, 0.5, 0.2, 0.2], (m, 1)),
            np.full((m, 1), 0.7), np.full((m, 3), 1 / 3),
        )

    def test_all_zero_keep_yields_empty(self):
        out = self._outputs([0.0, 0.0, 0.0])
        assert select_outputs(out, 0.5, np.array([True] * 3)) == []

    def test_single_confident_position(self):
        out = self._outputs([0.1, 0.99, 0.2])
        dets = select_outputs(out, 0.5, np.array([True] * 3))
        assert len(dets) == 1 and dets[0].confidence == pytest.approx(0.7)

    def test_padded_positions_never_emit(self):
        out = self._outputs([0.9, 0.9, 0.9])
        dets = select_outputs(out, 0.5, np.array([True, False, False]))
        assert len(dets) == 1

    def test_count_bounded_by_sequence_length(self):
        out = self._outputs([0.9] * 7)
        assert len(select_outputs(out, 0.0, np.array([True] * 7))) <= 7


class TestNmsBaseline:
    def _det(self, cx, cy, w, h, conf, cls, classes=3):
        probs = np.full(classes, 0.05)
        probs[cls] = 1.0 - 0.05 * (classes - 1)
        return Detection(Box(cx, cy, w, h), conf, probs)

    def test_duplicate_keeps_higher_confidence(self):
        dets = [self._det(0.5, 0.5, 0.2, 0.2, 0.9, 0),
                self._det(0.5, 0.5, 0.2, 0.2, 0.8, 0)]
        kept = nms_baseline(dets, NmsConfig(0.5, 0.0))
        assert len(kept) == 1 and kept[0].confidence == pytest.approx(0.9)

    def test_disjoint_boxes_all_kept(self):
        dets = [self._det(0.2, 0.2, 0.1, 0.1, 0.9, 0),
                self._det(0.8, 0.8, 0.1, 0.1, 0.8, 0),
                self._det(0.5, 0.5, 0.1, 0.1, 0.7, 1)]
        assert len(nms_baseline(dets, NmsConfig(0.5, 0.0))) == 3

    def test_confidence_floor_applies(self):
        dets = [self._det(0.2, 0.2, 0.1, 0.1, 0.4, 0)]
        assert nms_baseline(dets, NmsConfig(0.5, 0.5)) == []

    def test_kept_set_satisfies_pairwise_bound(self):
        rng = np.random.default_rng(0)
        dets = []
        for i in range(80):
            w, h = rng.uniform(0.1, 0.35, 2)
            dets.append(self._det(
                rng.uniform(w / 2, 1 - w / 2), rng.uniform(h / 2, 1 - h / 2),
                w, h, rng.uniform(0.0, 1.0), int(rng.integers(3)),
            ))
        thr = 0.45
        kept = nms_baseline(dets, NmsConfig(thr, 0.1))
        for i, a in enumerate(kept):
            for b in kept[i + 1:]:
                if a.class_id == b.class_id:
                    v = iou_matrix(a.box.as_array()[None], b.box.as_array()[None])[0, 0]
                    assert v <= thr + 1e-12
        for cls in range(3):
            confs = [d.confidence for d in kept if d.class_id == cls]
            assert confs == sorted(confs, reverse=True)
