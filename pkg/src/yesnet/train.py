"""SGD with momentum on a polynomial schedule, box-safe augmentation, and the
staged training loops (classifier pretraining, detector stage 1, filter
stage 2). Every loop is deterministic for fixed seeds: shuffling and
augmentation draw from generators keyed by (seed, epoch, batch)."""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .anchors import Box


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

@dataclass
class SgdmState:
    lr0: float = 0.05
    power: float = 4.0
    total_steps: int = 1
    step: int = 0
    momentum: float = 0.9
    weight_decay: float = 0.0005
    velocity: dict = field(default_factory=dict)


def schedule_lr(state):
    """Polynomial decay lr0 * (1 - step/total)^power, clamped at zero."""
    frac = min(1.0, state.step / state.total_steps)
    return state.lr0 * (1.0 - frac) ** state.power


def sgdm_step(params, state):
    """v <- mu v - lr (g + wd p); p <- p + v. Missing grads count as zero;
    grads are consumed (reset to None)."""
    lr = schedule_lr(state)
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        v = state.momentum * v - lr * (g + state.weight_decay * p.data)
        p.data += v
        state.velocity[name] = v
        p.grad = None
    state.step += 1


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

@dataclass
class AugmentConfig:
    hflip: bool = False
    crop: float = 0.0   # max fraction removed per side
    noise: float = 0.0  # additive uniform amplitude
    min_visible: float = 0.1  # drop boxes with less than this fraction left


def augment_image(image, objects, config, rng):
    """Apply flip/crop/noise to an image and its boxes identically. Boxes are
    clipped to the crop window and dropped below the visibility floor."""
    img = image
    boxes = list(objects)
    if config.hflip and rng.integers(2) == 1:
        img = img[:, :, ::-1].copy()
        boxes = [(Box(1.0 - b.cx, b.cy, b.w, b.h), c) for b, c in boxes]
    if config.crop > 0.0:
        side = img.shape[1]
        fx0, fx1 = rng.uniform(0.0, config.crop, 2)
        fy0, fy1 = rng.uniform(0.0, config.crop, 2)
        x0, x1 = int(round(fx0 * side)), side - int(round(fx1 * side))
        y0, y1 = int(round(fy0 * side)), side - int(round(fy1 * side))
        img, boxes = _crop_window(img, boxes, x0 / side, y0 / side, x1 / side, y1 / side,
                                  config.min_visible)
    if config.noise > 0.0:
        img = np.clip(img + rng.uniform(-config.noise, config.noise, img.shape), 0.0, 1.0)
    return img, boxes


def _crop_window(img, boxes, x0, y0, x1, y1, min_visible):
    side = img.shape[1]
    px = slice(int(round(x0 * side)), int(round(x1 * side)))
    py = slice(int(round(y0 * side)), int(round(y1 * side)))
    window = img[:, py, px]
    # nearest-neighbor resize back to the original side
    hs = np.minimum((np.arange(side) + 0.5) * window.shape[1] / side, window.shape[1] - 1).astype(int)
    ws = np.minimum((np.arange(side) + 0.5) * window.shape[2] / side, window.shape[2] - 1).astype(int)
    resized = np.ascontiguousarray(window[:, hs][:, :, ws])
    ww, wh = x1 - x0, y1 - y0
    out_boxes = []
    for b, c in boxes:
        bx0, bx1 = b.cx - b.w / 2, b.cx + b.w / 2
        by0, by1 = b.cy - b.h / 2, b.cy + b.h / 2
        cx0, cx1 = max(bx0, x0), min(bx1, x1)
        cy0, cy1 = max(by0, y0), min(by1, y1)
        if cx1 <= cx0 or cy1 <= cy0:
            continue
        visible = (cx1 - cx0) * (cy1 - cy0)
        if visible < min_visible * b.w * b.h:
            continue
        nb = Box(
            ((cx0 + cx1) / 2 - x0) / ww,
            ((cy0 + cy1) / 2 - y0) / wh,
            (cx1 - cx0) / ww,
            (cy1 - cy0) / wh,
        )
        out_boxes.append((nb, c))
    return resized, out_boxes


# ---------------------------------------------------------------------------
# Training loops
# ---------------------------------------------------------------------------

def _epoch_rng(seed, epoch, tag=0):
    return np.random.default_rng([seed, epoch, tag])


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    for lo in range(0, n, batch_size):
        yield order[lo:lo + batch_size]


def make_optimizer(params_count_steps, tcfg, epochs, batches_per_epoch):
    return SgdmState(
        lr0=tcfg.lr0,
        power=tcfg.power,
        total_steps=max(1, epochs * batches_per_epoch),
        momentum=tcfg.momentum,
        weight_decay=tcfg.weight_decay,
    )


def pretrain_classifier(backbone, images, labels, tcfg, epochs, holdout=0.2):
    """Cross-entropy training of the classifier; returns (log_rows, top1)."""
    n = len(images)
    n_hold = max(1, int(round(holdout * n)))
    split_rng = np.random.default_rng([tcfg.seed, 991])
    order = split_rng.permutation(n)
    hold_idx, train_idx = order[:n_hold], order[n_hold:]
    params = backbone.params()
    batches_per_epoch = max(1, int(np.ceil(len(train_idx) / tcfg.batch_size)))
    state = make_optimizer(None, tcfg, epochs, batches_per_epoch)
    rows = []
    for epoch in range(epochs):
        rng = _epoch_rng(tcfg.seed, epoch)
        epoch_loss = 0.0
        count = 0
        for batch in _batches(len(train_idx), tcfg.batch_size, rng):
            idx = train_idx[batch]
            x = images[idx]
            onehot = np.zeros((len(idx), backbone.config.num_classes))
            onehot[np.arange(len(idx)), labels[idx]] = 1.0
            with ad.Tape() as tape:
                probs = backbone.classify(ad.Tensor(x))
                picked = ad.multiply(probs, ad.constant(onehot)).sum(axis=1)
                loss = ad.scalar_mul(ad.log(picked).sum(), -1.0 / len(idx))
                ad.backward(loss, tape)
            sgdm_step(params, state)
            epoch_loss += loss.item() * len(idx)
            count += len(idx)
        rows.append((epoch, "train", epoch_loss / count, schedule_lr(state)))
    top1 = classifier_top1(backbone, images[hold_idx], labels[hold_idx], tcfg.batch_size)
    rows.append((epochs, "holdout", 1.0 - top1, 0.0))
    return rows, top1


def classifier_top1(backbone, images, labels, batch_size=32):
    hits = 0
    for lo in range(0, len(images), batch_size):
        probs = backbone.classify(ad.constant(images[lo:lo + batch_size])).data
        hits += int((probs.argmax(axis=1) == labels[lo:lo + batch_size]).sum())
    return hits / len(images)


def _prep_batch(samples, idx, augment_cfg, rng):
    images = []
    gt_lists = []
    for i in idx:
        s = samples[i]
        if augment_cfg is not None:
            img, objs = augment_image(s.image, s.objects, augment_cfg, rng)
            if not objs:  # keep at least the unaugmented truth
                img, objs = s.image, list(s.objects)
        else:
            img, objs = s.image, list(s.objects)
        images.append(img)
        gt_lists.append(objs)
    return np.stack(images), gt_lists


def train_stage1(model, samples, tcfg, hcfg, epochs, augment_cfg=None, on_epoch=None):
    """Backbone + detection head under the detection loss."""
    params = model.detect_params()
    batches_per_epoch = max(1, int(np.ceil(len(samples) / tcfg.batch_size)))
    state = make_optimizer(None, tcfg, epochs, batches_per_epoch)
    rows = []
    for epoch in range(epochs):
        rng = _epoch_rng(tcfg.seed, epoch)
        epoch_loss = 0.0
        count = 0
        for batch in _batches(len(samples), tcfg.batch_size, rng):
            images, gt_lists = _prep_batch(samples, batch, augment_cfg, rng)
            with ad.Tape() as tape:
                loss = model.stage1_loss(
                    images, gt_lists,
                    lam_coord=hcfg.lambda_coord, lam_noobj=hcfg.lambda_noobj,
                    box_weight=tcfg.w_box, cls_weight=tcfg.w_cls,
                )
                ad.backward(loss, tape)
            sgdm_step(params, state)
            epoch_loss += loss.item() * len(batch)
            count += len(batch)
        rows.append((epoch, "train", epoch_loss / count, schedule_lr(state)))
        if on_epoch:
            on_epoch(epoch, rows[-1])
    return rows


def train_stage2(model, samples, tcfg, hcfg, epochs, seq_len, augment_cfg=None,
                 on_epoch=None):
    """Whole model under filter loss + assist_weight * detection loss. The 1x1
    projection only ever sees detection-loss gradient (the filter input box5
    is gradient-stopped)."""
    params = model.params()
    batches_per_epoch = max(1, int(np.ceil(len(samples) / tcfg.batch_size)))
    state = make_optimizer(None, tcfg, epochs, batches_per_epoch)
    rows = []
    for epoch in range(epochs):
        rng = _epoch_rng(tcfg.seed, epoch, tag=1)
        epoch_loss = 0.0
        epoch_filter = 0.0
        count = 0
        for batch in _batches(len(samples), tcfg.batch_size, rng):
            images, gt_lists = _prep_batch(samples, batch, augment_cfg, rng)
            with ad.Tape() as tape:
                total, filter_part, _ = model.stage2_loss(
                    images, gt_lists, seq_len,
                    lam_coord=hcfg.lambda_coord, lam_noobj=hcfg.lambda_noobj,
                    box_weight=tcfg.w_box, cls_weight=tcfg.w_cls,
                    assist_weight=tcfg.alpha_assist,
                )
                ad.backward(total, tape)
            sgdm_step(params, state)
            epoch_loss += total.item() * len(batch)
            epoch_filter += filter_part.item() * len(batch)
            count += len(batch)
        rows.append((epoch, "train", epoch_loss / count, schedule_lr(state)))
        if on_epoch:
            on_epoch(epoch, rows[-1] + (epoch_filter / count,))
    return rows


def write_log(rows, path):
    with open(path, "w") as fh:
        fh.write("epoch,split,loss,lr\n")
        for epoch, split, loss, lr in rows:
            fh.write(f"{epoch},{split},{loss!r},{lr!r}\n")
