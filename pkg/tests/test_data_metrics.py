import json

import numpy as np
import pytest

from yesnet.anchors import Box
from yesnet.data import (
    AnnotationError,
    Sample,
    gen_classification,
    gen_synthetic,
    load_annotations,
    load_dataset,
    save_annotations,
    save_dataset,
)
from yesnet.head import Detection
from yesnet.metrics import config_hash, detection_f1, emit_report, evaluate_map


def det(cx, cy, w, h, conf, cls, classes=3):
    probs = np.full(classes, 0.01)
    probs[cls] = 1.0 - 0.01 * (classes - 1)
    return Detection(Box(cx, cy, w, h), conf, probs)


class TestGenSynthetic:
    def test_same_seed_is_bit_identical(self):
        a = gen_synthetic(0, 5, 3, 32)
        b = gen_synthetic(0, 5, 3, 32)
        for sa, sb in zip(a, b):
            assert np.array_equal(sa.image, sb.image)
            assert sa.objects == sb.objects

    def test_all_boxes_valid_and_inside(self):
        for s in gen_synthetic(1, 50, 3, 32):
            assert 1 <= len(s.objects) <= 4
            for box, cls in s.objects:
                assert 0 <= cls < 3
                assert box.cx - box.w / 2 > 0 and box.cx + box.w / 2 < 1
                assert box.cy - box.h / 2 > 0 and box.cy + box.h / 2 < 1

    def test_class_histogram_near_uniform(self):
        counts = np.zeros(3)
        for s in gen_synthetic(0, 1000, 3, 32):
            for _, cls in s.objects:
                counts[cls] += 1
        fractions = counts / counts.sum()
        np.testing.assert_allclose(fractions, 1 / 3, atol=1 / 30)

    def test_invalid_arguments_rejected(self):
        with pytest.raises(ValueError):
            gen_synthetic(0, 0, 3, 32)
        with pytest.raises(ValueError):
            gen_synthetic(0, 5, 4, 32)

    def test_classification_set_is_balancedish_and_labeled(self):
        images, labels = gen_classification(0, 60, 3, 16)
        assert images.shape == (60, 3, 16, 16)
        assert set(np.unique(labels)) <= {0, 1, 2}


class TestAnnotations:
    def test_round_trip(self, tmp_path):
        samples = gen_synthetic(2, 8, 3, 16)
        index = save_dataset(samples, tmp_path)
        loaded = load_dataset(tmp_path)
        assert len(loaded) == len(samples)
        for a, b in zip(samples, loaded):
            assert np.array_equal(a.image, b.image)
            for (ba, ca), (bb, cb) in zip(a.objects, b.objects):
                assert ca == cb
                for f in ("cx", "cy", "w", "h"):
                    assert abs(getattr(ba, f) - getattr(bb, f)) < 1e-9

    def test_empty_file_is_empty_dataset(self, tmp_path):
        path = tmp_path / "empty.csv"
        path.write_text("")
        assert load_annotations(path) == []

    def test_single_row(self, tmp_path):
        path = tmp_path / "one.csv"
        path.write_text("img.npy,0.5,0.5,0.2,0.2,1\n")
        index = load_annotations(path)
        assert len(index) == 1
        assert index[0][0] == "img.npy"
        assert index[0][1][0][1] == 1

    def test_out_of_range_coordinate_names_line(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("img.npy,1.5,0.5,0.2,0.2,0\n")
        with pytest.raises(AnnotationError, match=":1:"):
            load_annotations(path)

    def test_malformed_row_names_line(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("img.npy,0.5,0.5,0.2,0.2,0\nimg.npy,0.5,oops,0.2,0.2,0\n")
        with pytest.raises(AnnotationError, match=":2:"):
            load_annotations(path)


class TestEvaluateMap:
    def test_perfect_predictions_score_one(self):
        gts = [[(Box(0.3, 0.3, 0.2, 0.2), 0), (Box(0.7, 0.7, 0.2, 0.2), 1)],
               [(Box(0.5, 0.5, 0.3, 0.3), 2)]]
        preds = [[det(0.3, 0.3, 0.2, 0.2, 1.0, 0), det(0.7, 0.7, 0.2, 0.2, 1.0, 1)],
                 [det(0.5, 0.5, 0.3, 0.3, 1.0, 2)]]
        result = evaluate_map(preds, gts)
        assert result.mean_ap == pytest.approx(1.0)

    def test_no_predictions_score_zero(self):
        gts = [[(Box(0.3, 0.3, 0.2, 0.2), 0)]]
        assert evaluate_map([[]], gts).mean_ap == 0.0

    def test_eleven_point_single_gt_tp_then_fp(self):
        gts = [[(Box(0.3, 0.3, 0.2, 0.2), 0)]]
        preds = [[det(0.3, 0.3, 0.2, 0.2, 0.9, 0), det(0.8, 0.8, 0.1, 0.1, 0.8, 0)]]
        result = evaluate_map(preds, gts)
        assert result.per_class[0] == pytest.approx(1.0)

    def test_empty_class_excluded_and_undefined(self):
        gts = [[(Box(0.3, 0.3, 0.2, 0.2), 0)]]
        preds = [[det(0.3, 0.3, 0.2, 0.2, 0.9, 0), det(0.8, 0.8, 0.1, 0.1, 0.8, 2)]]
        result = evaluate_map(preds, gts)
        assert result.per_class[2] is None
        assert result.mean_ap == pytest.approx(result.per_class[0])

    def test_input_order_invariance(self):
        rng = np.random.default_rng(0)
        gts = [s.objects for s in gen_synthetic(3, 6, 3, 16)]
        preds = []
        for objs in gts:
            row = []
            for b, c in objs:
                row.append(det(min(1, b.cx + 0.01), b.cy, b.w, b.h, rng.uniform(0.2, 0.95), c))
            row.append(det(0.5, 0.5, 0.3, 0.3, rng.uniform(0.2, 0.95), 0))
            preds.append(row)
        base = evaluate_map(preds, gts)
        shuffled = [list(reversed(p)) for p in preds]
        again = evaluate_map(shuffled, gts)
        assert base.mean_ap == pytest.approx(again.mean_ap, abs=1e-12)

    def test_map_nonincreasing_in_threshold(self):
        rng = np.random.default_rng(1)
        gts = [s.objects for s in gen_synthetic(4, 10, 3, 16)]
        preds = []
        for objs in gts:
            row = []
            for b, c in objs:
                jitter = rng.uniform(-0.05, 0.05, 2)
                row.append(det(float(np.clip(b.cx + jitter[0], b.w / 2, 1 - b.w / 2)),
                               float(np.clip(b.cy + jitter[1], b.h / 2, 1 - b.h / 2)),
                               b.w, b.h, rng.uniform(0.3, 1.0), c))
            preds.append(row)
        values = [evaluate_map(preds, gts, thr).mean_ap for thr in (0.3, 0.5, 0.7, 0.9)]
        assert all(a >= b - 1e-12 for a, b in zip(values, values[1:]))

    def test_threshold_validated(self):
        with pytest.raises(ValueError, match="iou_threshold"):
            evaluate_map([[]], [[]], iou_threshold=0.0)


class TestDetectionF1:
    def test_perfect_is_one(self):
        gts = [[(Box(0.3, 0.3, 0.2, 0.2), 0)]]
        preds = [[det(0.3, 0.3, 0.2, 0.2, 0.9, 0)]]
        assert detection_f1(preds, gts) == (1.0, 1.0, 1.0)

    def test_wrong_class_counts_as_fp_and_fn(self):
        gts = [[(Box(0.3, 0.3, 0.2, 0.2), 0)]]
        preds = [[det(0.3, 0.3, 0.2, 0.2, 0.9, 1)]]
        precision, recall, f1 = detection_f1(preds, gts)
        assert (precision, recall, f1) == (0.0, 0.0, 0.0)


class TestReports:
    def _results(self):
        return [
            {"method": "filter", "map": 0.62, "per_class": {"0": 0.7},
             "images_per_sec": 12.5, "seed": 0, "config_hash": "abc123"},
            {"method": "nms", "map": 0.58, "per_class": {"0": 0.6},
             "images_per_sec": 14.0, "seed": 0, "config_hash": "abc123"},
        ]

    def test_two_methods_two_rows(self, tmp_path):
        emit_report(self._results(), tmp_path / "r.json", tmp_path / "r.csv")
        lines = (tmp_path / "r.csv").read_text().strip().splitlines()
        assert lines[0] == "method,map,images_per_sec"
        assert len(lines) == 3

    def test_regeneration_is_byte_identical(self, tmp_path):
        emit_report(self._results(), tmp_path / "a.json", tmp_path / "a.csv")
        emit_report(self._results(), tmp_path / "b.json", tmp_path / "b.csv")
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_config_hash_sensitive_to_any_key(self):
        items = [("data.seed", "0"), ("training.lr0", "0.01")]
        base = config_hash(items)
        assert config_hash([("data.seed", "1"), ("training.lr0", "0.01")]) != base
        assert config_hash([("data.seed", "0"), ("training.lr0", "0.02")]) != base
        assert config_hash(list(reversed(items))) == base
