"""Strict plain-text run configuration.

Sections: backbone, anchors, head, filter, training, data. Unknown sections
or keys are rejected; every seed is explicit. Values are key = value pairs
parsed by type from the schema below.
"""

import configparser
from dataclasses import dataclass

from .anchors import KmeansConfig
from .backbone import ShunNetConfig


class ConfigError(ValueError):
    pass


def _bool(text):
    low = text.strip().lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text):
    return tuple(int(v) for v in text.split(","))


SCHEMA = {
    "data": {
        "seed": (int, 0),
        "train_count": (int, 500),
        "test_count": (int, 100),
        "num_classes": (int, 3),
        "side": (int, 64),
        "map_iou_threshold": (float, 0.5),
    },
    "backbone": {
        "channels": (_ints, (8, 16, 32, 64)),
        "feature_channels": (int, 64),
        "cell": (str, "tanh"),
        "with_packs": (_bool, True),
        "seed": (int, 0),
    },
    "anchors": {
        "k": (int, 20),
        "merge_threshold": (float, 0.9),
        "max_iters": (int, 100),
        "restarts": (int, 10),
        "seed": (int, 0),
        "full_dim": (_bool, True),
    },
    "head": {
        "lambda_coord": (float, 5.0),
        "lambda_noobj": (float, 0.5),
        "seed": (int, 1),
    },
    "filter": {
        "m": (int, 50),
        "hidden": (int, 64),
        "keep_threshold": (float, 0.5),
        "cell": (str, "tanh"),
        "nms_iou_threshold": (float, 0.5),
        "nms_confidence_threshold": (float, 0.5),
    },
    "training": {
        "batch_size": (int, 16),
        "lr0": (float, 0.05),
        "power": (float, 4.0),
        "momentum": (float, 0.9),
        "weight_decay": (float, 0.0005),
        "pretrain_epochs": (int, 10),
        "stage1_epochs": (int, 40),
        "stage2_epochs": (int, 25),
        "w_box": (float, 1.0),
        "w_cls": (float, 1.0),
        "alpha_assist": (float, 1.0),
        "use_pretrain": (_bool, False),
        "augment": (_bool, False),
        "crop": (float, 0.1),
        "noise": (float, 0.02),
        "seed": (int, 0),
    },
}


@dataclass
class DataConfig:
    seed: int
    train_count: int
    test_count: int
    num_classes: int
    side: int
    map_iou_threshold: float


@dataclass
class HeadConfig:
    lambda_coord: float
    lambda_noobj: float
    seed: int


@dataclass
class FilterConfig:
    m: int
    hidden: int
    keep_threshold: float
    cell: str
    nms_iou_threshold: float
    nms_confidence_threshold: float


@dataclass
class TrainingConfig:
    batch_size: int
    lr0: float
    power: float
    momentum: float
    weight_decay: float
    pretrain_epochs: int
    stage1_epochs: int
    stage2_epochs: int
    w_box: float
    w_cls: float
    alpha_assist: float
    use_pretrain: bool
    augment: bool
    crop: float
    noise: float
    seed: int


@dataclass
class RunConfig:
    data: DataConfig
    backbone: ShunNetConfig
    anchors: KmeansConfig
    head: HeadConfig
    filter: FilterConfig
    training: TrainingConfig

    def items(self):
        """("section.key", value-string) pairs for hashing."""
        out = []
        for section, keys in SCHEMA.items():
            values = self._section_values(section)
            for key in keys:
                out.append((f"{section}.{key}", str(values[key])))
        return out

    def _section_values(self, section):
        if section == "backbone":
            b = self.backbone
            return {
                "channels": b.stage_channels, "feature_channels": b.feature_channels,
                "cell": b.cell, "with_packs": b.with_packs, "seed": b.seed,
            }
        if section == "anchors":
            a = self.anchors
            return {
                "k": a.k, "merge_threshold": a.merge_threshold, "max_iters": a.max_iters,
                "restarts": a.restarts, "seed": a.seed, "full_dim": a.full_dim,
            }
        obj = getattr(self, section)
        return {k: getattr(obj, k) for k in SCHEMA[section]}


def _parse_sections(path):
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",))
    parser.optionxform = str
    read = parser.read(path)
    if not read:
        raise ConfigError(f"config file not found: {path}")
    values = {}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"{path}: unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"{path}: unknown key {key!r} in [{section}]")
            parse, _ = SCHEMA[section][key]
            try:
                values[(section, key)] = parse(raw)
            except ValueError as exc:
                raise ConfigError(f"{path}: bad value for {section}.{key}: {exc}") from None
    return values


def load_config(path, seed_override=None):
    values = _parse_sections(path)

    def get(section, key):
        if (section, key) in values:
            return values[(section, key)]
        return SCHEMA[section][key][1]

    def section_kwargs(section):
        return {key: get(section, key) for key in SCHEMA[section]}

    data = DataConfig(**section_kwargs("data"))
    head = HeadConfig(**section_kwargs("head"))
    filt = FilterConfig(**section_kwargs("filter"))
    training = TrainingConfig(**section_kwargs("training"))
    backbone = ShunNetConfig(
        input_side=data.side,
        stage_channels=get("backbone", "channels"),
        feature_channels=get("backbone", "feature_channels"),
        num_classes=data.num_classes,
        cell=get("backbone", "cell"),
        with_packs=get("backbone", "with_packs"),
        seed=get("backbone", "seed"),
    )
    anchors = KmeansConfig(**section_kwargs("anchors"))
    cfg = RunConfig(data=data, backbone=backbone, anchors=anchors, head=head,
                    filter=filt, training=training)
    if seed_override is not None:
        cfg.data.seed = seed_override
        cfg.backbone.seed = seed_override
        cfg.anchors.seed = seed_override
        cfg.head.seed = seed_override
        cfg.training.seed = seed_override
    return cfg
