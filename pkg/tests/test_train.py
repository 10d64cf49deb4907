import numpy as np
import pytest

from yesnet import autodiff as ad
from yesnet.anchors import Box
from yesnet.backbone import ShunNet, ShunNetConfig
from yesnet.config import HeadConfig, TrainingConfig
from yesnet.data import Sample, gen_classification, gen_synthetic
from yesnet.model import DetectionModel
from yesnet.snapshot import load_params, save_params
from yesnet.train import (
    AugmentConfig,
    SgdmState,
    augment_image,
    _crop_window,
    pretrain_classifier,
    schedule_lr,
    sgdm_step,
    train_stage1,
    train_stage2,
)


def tiny_backbone_cfg(**kw):
    base = dict(input_side=16, stage_channels=(4, 6, 8), feature_channels=8,
                num_classes=3, seed=0)
    base.update(kw)
    return ShunNetConfig(**base)


def tiny_anchors(n=5, seed=2):
    rng = np.random.default_rng(seed)
    w = rng.uniform(0.2, 0.5, n)
    h = rng.uniform(0.2, 0.5, n)
    cx = rng.uniform(w / 2, 1 - w / 2)
    cy = rng.uniform(h / 2, 1 - h / 2)
    return np.stack([cx, cy, w, h], axis=1)


def tiny_model(**kw):
    return DetectionModel(tiny_backbone_cfg(**kw), tiny_anchors(), filter_hidden=8)


def tiny_samples(count=4, seed=0, side=16):
    return gen_synthetic(seed, count, 3, side)


def tcfg(**kw):
    base = dict(batch_size=4, lr0=0.01, power=4.0, momentum=0.9, weight_decay=0.0005,
                pretrain_epochs=2, stage1_epochs=2, stage2_epochs=2, w_box=1.0,
                w_cls=1.0, alpha_assist=1.0, use_pretrain=False, augment=False,
                crop=0.1, noise=0.02, seed=0)
    base.update(kw)
    return TrainingConfig(**base)


HCFG = HeadConfig(lambda_coord=5.0, lambda_noobj=0.5, seed=1)


class TestSchedule:
    def test_paper_schedule_values(self):
        state = SgdmState(lr0=0.05, power=4.0, total_steps=100)
        assert schedule_lr(state) == pytest.approx(0.05, abs=1e-15)
        state.step = 50
        assert schedule_lr(state) == pytest.approx(0.05 * 0.5 ** 4, abs=1e-15)
        state.step = 100
        assert schedule_lr(state) == 0.0

    def test_closed_form_at_every_step(self):
        state = SgdmState(lr0=0.05, power=4.0, total_steps=37)
        for step in range(45):
            state.step = step
            frac = min(1.0, step / 37)
            assert abs(schedule_lr(state) - 0.05 * (1 - frac) ** 4) < 1e-15

    def test_lr_clamped_beyond_total(self):
        state = SgdmState(lr0=0.05, power=4.0, total_steps=10, step=25)
        assert schedule_lr(state) == 0.0


class TestSgdm:
    def test_zero_grad_zero_wd_zero_velocity_is_noop(self):
        p = ad.Tensor(np.array([1.0, -2.0]), requires_grad=True)
        state = SgdmState(lr0=0.1, total_steps=10, weight_decay=0.0)
        sgdm_step({"p": p}, state)
        np.testing.assert_array_equal(p.data, [1.0, -2.0])
        assert state.step == 1

    def test_update_rule_hand_case(self):
        p = ad.Tensor(np.array([1.0]), requires_grad=True)
        p.grad = np.array([2.0])
        state = SgdmState(lr0=0.1, power=0.0, total_steps=10,
                          momentum=0.9, weight_decay=0.5)
        state.velocity["p"] = np.array([0.3])
        sgdm_step({"p": p}, state)
        # v = 0.9*0.3 - 0.1*(2 + 0.5*1) = 0.02 ; p = 1.02
        np.testing.assert_allclose(p.data, [1.02], atol=1e-15)
        assert p.grad is None


class TestAugment:
    def test_identity_config_is_exact(self):
        s = tiny_samples(1)[0]
        img, boxes = augment_image(s.image, s.objects, AugmentConfig(), np.random.default_rng(0))
        np.testing.assert_array_equal(img, s.image)
        assert boxes == s.objects

    def test_horizontal_flip_maps_cx(self):
        s = tiny_samples(1, seed=3)[0]
        flip_seed = next(
            seed for seed in range(20)
            if np.random.default_rng(seed).integers(2) == 1
        )
        img, boxes = augment_image(
            s.image, s.objects, AugmentConfig(hflip=True), np.random.default_rng(flip_seed))
        np.testing.assert_array_equal(img, s.image[:, :, ::-1])
        for (b, c), (ob, oc) in zip(boxes, s.objects):
            assert c == oc
            assert b.cx == pytest.approx(1.0 - ob.cx)
            assert (b.cy, b.w, b.h) == (ob.cy, ob.w, ob.h)

    def test_crop_to_left_half_drops_right_boxes(self):
        img = np.zeros((3, 16, 16))
        boxes = [(Box(0.25, 0.5, 0.2, 0.2), 0), (Box(0.8, 0.5, 0.2, 0.2), 1)]
        out_img, out_boxes = _crop_window(img, boxes, 0.0, 0.0, 0.5, 1.0, 0.1)
        assert out_img.shape == (3, 16, 16)
        assert [c for _, c in out_boxes] == [0]
        nb = out_boxes[0][0]
        assert nb.cx == pytest.approx(0.5)  # 0.25 inside the half-window
        assert nb.w == pytest.approx(0.4)

    def test_barely_visible_box_dropped(self):
        img = np.zeros((3, 16, 16))
        boxes = [(Box(0.5, 0.5, 0.4, 0.4), 0)]
        # window keeps only a sliver of the box: visible 0.02*0.4 < 10% of area
        _, out = _crop_window(img, boxes, 0.0, 0.0, 0.32, 1.0, 0.1)
        assert out == []


class TestPretrain:
    def test_degenerate_single_class_is_perfect(self):
        backbone = ShunNet(tiny_backbone_cfg(num_classes=1))
        images, labels = gen_classification(0, 24, 1, 16)
        rows, top1 = pretrain_classifier(backbone, images, labels, tcfg(), epochs=1)
        assert top1 == 1.0

    def test_snapshot_round_trip_bit_identical(self, tmp_path):
        backbone = ShunNet(tiny_backbone_cfg())
        path = tmp_path / "w.ynet"
        save_params(backbone.params(), path)
        loaded = load_params(path)
        for name, tensor in backbone.params().items():
            assert np.array_equal(loaded[name], tensor.data)


class TestStage1:
    def test_zero_lr_leaves_parameters_unchanged(self):
        model = tiny_model()
        samples = tiny_samples()
        before = {k: v.data.copy() for k, v in model.detect_params().items()}
        train_stage1(model, samples, tcfg(lr0=0.0, weight_decay=0.0), HCFG, epochs=1)
        for k, v in model.detect_params().items():
            np.testing.assert_array_equal(v.data, before[k])

    def test_same_seed_gives_identical_loss_curves(self):
        curves = []
        for _ in range(2):
            model = tiny_model()
            rows = train_stage1(model, tiny_samples(), tcfg(), HCFG, epochs=2)
            curves.append([r[2] for r in rows])
        assert curves[0] == curves[1]

    def test_loss_decreases_on_tiny_overfit(self):
        model = tiny_model()
        samples = tiny_samples(count=2, seed=5)
        rows = train_stage1(model, samples, tcfg(lr0=0.02, power=0.0, batch_size=2),
                            HCFG, epochs=30)
        assert rows[-1][2] < 0.6 * rows[0][2]


class TestStage2:
    def test_zero_epochs_keeps_stage1_weights_and_fresh_filter(self):
        model = tiny_model()
        before = {k: v.data.copy() for k, v in model.params().items()}
        rows = train_stage2(model, tiny_samples(), tcfg(), HCFG, epochs=0, seq_len=6)
        assert rows == []
        for k, v in model.params().items():
            np.testing.assert_array_equal(v.data, before[k])

    def test_gradient_stop_blocks_projection_only(self):
        model = tiny_model()
        samples = tiny_samples(count=2, seed=7)
        images = np.stack([s.image for s in samples])
        gt_lists = [s.objects for s in samples]
        with ad.Tape() as tape:
            total, _, _ = model.stage2_loss(images, gt_lists, seq_len=6, assist_weight=0.0)
            ad.backward(total, tape)
        assert np.all(model.head.proj_w.grad == 0.0)
        assert np.all(model.head.proj_b.grad == 0.0)
        assert np.any(model.head.fc_w.grad != 0.0)
        assert np.any(model.filter.out_w.grad != 0.0)

    def test_filter_loss_drops_over_fifty_steps(self):
        model = tiny_model()
        samples = tiny_samples(count=2, seed=9)
        images = np.stack([s.image for s in samples])
        gt_lists = [s.objects for s in samples]
        params = model.filter.params()
        state = SgdmState(lr0=0.02, power=0.0, total_steps=50, weight_decay=0.0)
        losses = []
        for _ in range(50):
            with ad.Tape() as tape:
                _, filter_part, _ = model.stage2_loss(images, gt_lists, seq_len=6,
                                                      assist_weight=0.0)
                ad.backward(filter_part, tape)
            losses.append(filter_part.item())
            sgdm_step(params, state)
        assert losses[-1] < 0.9 * losses[0]
