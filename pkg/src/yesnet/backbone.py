"""Backbone builder: a Darknet19-flavored classifier with recurrent packs.

Layout per stage (mirrors the reference table at any scale): single 3x3 convs
for the first two stages, a 3x3/1x1/3x3 triple for the third, then after every
later pool a pack-A plus a 1x1 channel-doubling conv, and after the last pool
pack-B, pack-A and the 1x1 feature conv. The classifier adds a 1x1 conv to
class count, global average pooling and softmax; the detection variant stops
at the feature conv.
"""

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .layers import Conv
from .spatial import RnnPackA, RnnPackB


@dataclass
class ShunNetConfig:
    input_side: int = 64
    stage_channels: tuple = (8, 16, 32, 64)
    feature_channels: int = 64
    num_classes: int = 3
    cell: str = "tanh"
    with_packs: bool = True
    seed: int = 0


def full_scale_config(num_classes=1001):
    """The reference-scale layout: 224 input, five pools, 1024-wide features."""
    return ShunNetConfig(
        input_side=224,
        stage_channels=(32, 64, 128, 256, 512),
        feature_channels=1024,
        num_classes=num_classes,
    )


def layer_plan(config):
    """Analytic layer list [(kind, detail, out_shape)]; out_shape is (C, H, W)
    per image. Raises if the input side does not survive all the pools."""
    sc = config.stage_channels
    pools = len(sc)
    if len(sc) < 3:
        raise ValueError("layer_plan: need at least 3 stages")
    if config.input_side % (2 ** pools) != 0:
        raise ValueError(
            f"layer_plan: input side {config.input_side} not divisible by 2^{pools}"
        )
    entries = []
    side = config.input_side

    def emit(kind, detail, ch, side):
        entries.append((kind, detail, (ch, side, side)))

    in_ch = 3
    for s, ch in enumerate(sc):
        if s == 2:
            emit("conv3", (in_ch, ch), ch, side)
            emit("conv1", (ch, ch // 2), ch // 2, side)
            emit("conv3", (ch // 2, ch), ch, side)
        elif s < 2:
            emit("conv3", (in_ch, ch), ch, side)
        side //= 2
        emit("pool", None, ch, side)
        if s >= 2:
            last = s == pools - 1
            if last:
                if config.with_packs:
                    emit("pack_b", ch, ch, side)
                    emit("pack_a", ch, ch, side)
                emit("conv1", (ch, config.feature_channels), config.feature_channels, side)
            else:
                if config.with_packs:
                    emit("pack_a", ch, ch, side)
                emit("conv1", (ch, sc[s + 1]), sc[s + 1], side)
        in_ch = ch
    classifier = [
        ("conv1", (config.feature_channels, config.num_classes), (config.num_classes, side, side)),
        ("gap", None, (config.num_classes,)),
        ("softmax", None, (config.num_classes,)),
    ]
    return entries, classifier


class ShunNet:
    """Feature extractor plus classification head built from a config."""

    def __init__(self, config):
        self.config = config
        feature_entries, _ = layer_plan(config)
        rng = np.random.default_rng(config.seed)
        self.feature_layers = []
        for kind, detail, _ in feature_entries:
            if kind == "conv3":
                self.feature_layers.append(Conv(detail[0], detail[1], 3, rng))
            elif kind == "conv1":
                self.feature_layers.append(Conv(detail[0], detail[1], 1, rng))
            elif kind == "pool":
                self.feature_layers.append("pool")
            elif kind == "pack_a":
                self.feature_layers.append(RnnPackA(detail, rng, config.cell))
            elif kind == "pack_b":
                self.feature_layers.append(RnnPackB(detail, rng, config.cell))
        self.class_conv = Conv(config.feature_channels, config.num_classes, 1, rng, act="none")

    @property
    def feature_side(self):
        return self.config.input_side // (2 ** len(self.config.stage_channels))

    def features(self, x):
        """[B, 3, S, S] -> [B, F, S/2^P, S/2^P]."""
        for layer in self.feature_layers:
            x = ad.maxpool2(x) if layer == "pool" else layer(x)
        return x

    def classify(self, x):
        """[B, 3, S, S] -> class probabilities [B, num_classes]."""
        h = self.class_conv(self.features(x))
        return ad.softmax(ad.global_avg_pool(h))

    def params(self, prefix="backbone"):
        out = OrderedDict()
        for i, layer in enumerate(self.feature_layers):
            if layer == "pool":
                continue
            out.update(layer.params(f"{prefix}.l{i:02d}"))
        out.update(self.class_conv.params(f"{prefix}.class_conv"))
        return out
