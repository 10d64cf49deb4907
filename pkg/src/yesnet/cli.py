"""Command line pipeline.

All subcommands share one workspace directory (``--out``): gen-data writes
``data/train`` and ``data/test``, gen-anchors reads the train annotations and
writes ``anchors.csv`` + ``anchors_report.json``, the training commands write
``pretrain.ynet`` / ``stage1.ynet`` / ``stage2.ynet`` with CSV logs, and
detect/eval/report produce JSON results. Exit codes: 0 success, 1 usage or
config error, 2 data error. Timing sidecars (``timing_*.json``) are wall-clock
measurements and the only outputs exempt from byte-for-byte determinism.
"""

import argparse
import json
import os
import sys
import time

import numpy as np

from .anchors import KmeansConfig, boxes_to_array, kmeans_anchors, load_anchors, save_anchors
from .backbone import ShunNet
from .boxfilter import NmsConfig
from .config import ConfigError, load_config
from .data import (
    AnnotationError,
    dataset_boxes,
    gen_classification,
    gen_synthetic,
    load_dataset,
    save_dataset,
)
from .metrics import config_hash, detection_f1, emit_report, evaluate_map
from .model import DetectionModel
from .snapshot import load_params, save_params
from .train import (
    AugmentConfig,
    pretrain_classifier,
    train_stage1,
    train_stage2,
    write_log,
)
from .layers import load_into

TEST_SEED_OFFSET = 1_000_003
CLS_SEED_OFFSET = 2_000_003


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message}\n{self.format_usage()}")


def _augment_cfg(tcfg):
    if not tcfg.augment:
        return None
    return AugmentConfig(hflip=True, crop=tcfg.crop, noise=tcfg.noise)


def _data_dir(out, split):
    return os.path.join(out, "data", split)


def _load_split(cfg, out, split):
    path = _data_dir(out, split)
    if not os.path.isdir(path):
        raise FileNotFoundError(f"dataset split missing: {path} (run gen-data first)")
    return load_dataset(path)


def _build_model(cfg, out):
    anchors = load_anchors(os.path.join(out, "anchors.csv"), cfg.anchors.merge_threshold)
    return DetectionModel(
        cfg.backbone, anchors.as_array(),
        filter_hidden=cfg.filter.hidden, filter_cell=cfg.filter.cell,
        head_seed=cfg.head.seed,
    )


def _detect_split(model, cfg, samples, selector, batch=16):
    dets = []
    start = time.perf_counter()
    for lo in range(0, len(samples), batch):
        images = np.stack([s.image for s in samples[lo:lo + batch]])
        dets.extend(model.detect_images(
            images, selector=selector, seq_len=cfg.filter.m,
            keep_threshold=cfg.filter.keep_threshold,
            nms_config=NmsConfig(cfg.filter.nms_iou_threshold,
                                 cfg.filter.nms_confidence_threshold),
        ))
    seconds = time.perf_counter() - start
    return dets, seconds


def _write_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(cfg, out, args):
    for split, count, seed in (
        ("train", cfg.data.train_count, cfg.data.seed),
        ("test", cfg.data.test_count, cfg.data.seed + TEST_SEED_OFFSET),
    ):
        samples = gen_synthetic(seed, count, cfg.data.num_classes, cfg.data.side)
        save_dataset(samples, _data_dir(out, split))
    return 0


def cmd_gen_anchors(cfg, out, args):
    samples = _load_split(cfg, out, "train")
    boxes = boxes_to_array(dataset_boxes(samples))
    result = kmeans_anchors(boxes, cfg.anchors)
    save_anchors(result, os.path.join(out, "anchors.csv"),
                 os.path.join(out, "anchors_report.json"), boxes=boxes)
    return 0


def cmd_pretrain(cfg, out, args):
    backbone = ShunNet(cfg.backbone)
    count = max(cfg.data.train_count, 50)
    images, labels = gen_classification(
        cfg.data.seed + CLS_SEED_OFFSET, count, cfg.data.num_classes, cfg.data.side)
    rows, top1 = pretrain_classifier(backbone, images, labels, cfg.training,
                                     cfg.training.pretrain_epochs)
    save_params(backbone.params(), os.path.join(out, "pretrain.ynet"))
    write_log(rows, os.path.join(out, "pretrain_log.csv"))
    print(f"pretrain top-1 {top1:.4f}")
    return 0


def cmd_train(cfg, out, args):
    samples = _load_split(cfg, out, "train")
    model = _build_model(cfg, out)
    if cfg.training.use_pretrain:
        loaded = load_params(os.path.join(out, "pretrain.ynet"))
        load_into(model.backbone.params(), loaded)
    rows = train_stage1(model, samples, cfg.training, cfg.head,
                        cfg.training.stage1_epochs, augment_cfg=_augment_cfg(cfg.training))
    save_params(model.detect_params(), os.path.join(out, "stage1.ynet"))
    write_log(rows, os.path.join(out, "train_log.csv"))
    if rows:
        print(f"stage1 final loss {rows[-1][2]:.6f}")
    return 0


def cmd_train_filter(cfg, out, args):
    samples = _load_split(cfg, out, "train")
    model = _build_model(cfg, out)
    model.load(os.path.join(out, "stage1.ynet"), detect_only=True)
    rows = train_stage2(model, samples, cfg.training, cfg.head,
                        cfg.training.stage2_epochs, cfg.filter.m,
                        augment_cfg=_augment_cfg(cfg.training))
    model.save(os.path.join(out, "stage2.ynet"))
    write_log(rows, os.path.join(out, "train_filter_log.csv"))
    if rows:
        print(f"stage2 final loss {rows[-1][2]:.6f}")
    return 0


def _detections_json(dets_per_image, samples):
    images = []
    for (rel, dets) in zip([f"img_{i:05d}" for i in range(len(samples))], dets_per_image):
        images.append({
            "image": rel,
            "detections": [
                {
                    "box": [d.box.cx, d.box.cy, d.box.w, d.box.h],
                    "confidence": d.confidence,
                    "class_id": d.class_id,
                    "class_probs": d.class_probs.tolist(),
                }
                for d in dets
            ],
        })
    return images


def cmd_detect(cfg, out, args):
    samples = _load_split(cfg, out, args.split)
    model = _build_model(cfg, out)
    model.load(os.path.join(out, "stage2.ynet"))
    dets, seconds = _detect_split(model, cfg, samples, args.selector)
    _write_json(_detections_json(dets, samples),
                os.path.join(out, f"detections_{args.selector}_{args.split}.json"))
    _write_json(
        {"images": len(samples), "seconds": seconds,
         "images_per_sec": len(samples) / seconds if seconds > 0 else None},
        os.path.join(out, f"timing_{args.selector}_{args.split}.json"))
    return 0


def cmd_eval(cfg, out, args):
    samples = _load_split(cfg, out, "test")
    model = _build_model(cfg, out)
    model.load(os.path.join(out, "stage2.ynet"))
    gts = [s.objects for s in samples]
    selectors = ("filter", "nms") if args.selector == "both" else (args.selector,)
    for selector in selectors:
        dets, seconds = _detect_split(model, cfg, samples, selector)
        result = evaluate_map(dets, gts, cfg.data.map_iou_threshold)
        precision, recall, f1 = detection_f1(dets, gts, cfg.data.map_iou_threshold)
        payload = result.to_json_dict()
        payload.update({
            "method": selector,
            "precision": precision,
            "recall": recall,
            "f1": f1,
            "images": len(samples),
        })
        _write_json(payload, os.path.join(out, f"eval_{selector}.json"))
        _write_json(
            {"images": len(samples), "seconds": seconds,
             "images_per_sec": len(samples) / seconds if seconds > 0 else None},
            os.path.join(out, f"timing_{selector}_test.json"))
        print(f"{selector}: mAP@{cfg.data.map_iou_threshold} = {result.mean_ap:.4f}, "
              f"F1 = {f1:.4f}")
    return 0


def cmd_report(cfg, out, args):
    results = []
    for selector in ("filter", "nms"):
        eval_path = os.path.join(out, f"eval_{selector}.json")
        if not os.path.exists(eval_path):
            continue
        with open(eval_path) as fh:
            ev = json.load(fh)
        timing_path = os.path.join(out, f"timing_{selector}_test.json")
        ips = None
        if os.path.exists(timing_path):
            with open(timing_path) as fh:
                ips = json.load(fh).get("images_per_sec")
        results.append({
            "method": selector,
            "map": ev["map"],
            "per_class": ev["per_class"],
            "images_per_sec": ips,
            "seed": cfg.data.seed,
            "config_hash": config_hash(cfg.items()),
        })
    if not results:
        raise FileNotFoundError(f"no eval_*.json found in {out} (run eval first)")
    emit_report(results, os.path.join(out, "report.json"), os.path.join(out, "report.csv"))
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

COMMANDS = {
    "gen-data": cmd_gen_data,
    "gen-anchors": cmd_gen_anchors,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "train-filter": cmd_train_filter,
    "detect": cmd_detect,
    "eval": cmd_eval,
    "report": cmd_report,
}


def _build_parser():
    parser = _Parser(prog="yesnet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--seed", type=int, default=None)
        if name == "detect":
            p.add_argument("--selector", choices=("filter", "nms", "raw"), default="filter")
            p.add_argument("--split", choices=("train", "test"), default="test")
        if name == "eval":
            p.add_argument("--selector", choices=("filter", "nms", "both"), default="both")
    return parser


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    try:
        cfg = load_config(args.config, seed_override=args.seed)
        os.makedirs(args.out, exist_ok=True)
        return COMMANDS[args.command](cfg, args.out, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (AnnotationError, FileNotFoundError, OSError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
