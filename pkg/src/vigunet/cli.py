"""Command line entry points: train, eval, predict, info, gen."""
from __future__ import annotations

import argparse
import csv
import os
import sys

import numpy as np
from PIL import Image

from .config import ConfigError, describe_keys, load_config
from .data import SplitSpec, generate_synthetic, load_dataset, split_dataset
from .model import (CheckpointError, VigUnet, count_parameters,
                    load_checkpoint, parameter_table, save_checkpoint)
from .tensor import Tensor, make_rng, no_grad
from .training import (CosineSchedule, channel_stats, evaluate, fit,
                       normalize_image, predict_mask)

LAST_NAME = "checkpoint-last.vgun"
BEST_NAME = "checkpoint-best.vgun"
CSV_NAME = "metrics.csv"
CSV_COLUMNS = ["epoch", "lr", "train_loss", "val_iou", "val_dice"]


def _fmt_stats(values) -> str:
    return ",".join(repr(float(v)) for v in values)


def _parse_stats(extras):
    if "norm_mean" in extras and "norm_std" in extras:
        mean = np.array([float(v) for v in extras["norm_mean"].split(",")],
                        dtype=np.float32)
        std = np.array([float(v) for v in extras["norm_std"].split(",")],
                       dtype=np.float32)
        return mean, std
    return None, None


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    out_dir = args.out or cfg.out_dir
    os.makedirs(out_dir, exist_ok=True)

    samples = load_dataset(cfg.data_dir, cfg.image_size)
    train_set, val_set = split_dataset(samples, SplitSpec(cfg.val_ratio, cfg.split_seed))
    mean, std = channel_stats([s.image for s in train_set])
    extra = {"norm_mean": _fmt_stats(mean), "norm_std": _fmt_stats(std)}

    rng = make_rng(cfg.seed)
    model = VigUnet(cfg.model_config(), rng=rng)
    schedule = CosineSchedule(cfg.lr_max, cfg.lr_min, t_max=max(cfg.epochs, 1))
    print(f"training on {len(train_set)} samples, validating on {len(val_set)}, "
          f"{count_parameters(model)} parameters")

    csv_path = os.path.join(out_dir, CSV_NAME)
    best_iou = float("-inf")
    with open(csv_path, "w", newline="") as csv_fp:
        writer = csv.writer(csv_fp)
        writer.writerow(CSV_COLUMNS)

        def on_epoch(rec):
            nonlocal best_iou
            writer.writerow([rec["epoch"], repr(rec["lr"]), repr(rec["train_loss"]),
                             repr(rec["val_iou"]), repr(rec["val_dice"])])
            csv_fp.flush()
            save_checkpoint(model, os.path.join(out_dir, LAST_NAME), extra)
            if rec["val_iou"] > best_iou:
                best_iou = rec["val_iou"]
                save_checkpoint(model, os.path.join(out_dir, BEST_NAME), extra)
            print(f"epoch {rec['epoch'] + 1}/{cfg.epochs} lr {rec['lr']:.3g} "
                  f"loss {rec['train_loss']:.4f} val_iou {rec['val_iou']:.4f} "
                  f"val_dice {rec['val_dice']:.4f}")

        fit(model, train_set, val_set, epochs=cfg.epochs, rng=rng,
            batch_size=cfg.batch_size, schedule=schedule, augment=cfg.augment,
            mean=mean, std=std, on_epoch=on_epoch)
    print(f"done; best val_iou {best_iou:.4f}; outputs in {out_dir}")
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    wanted = cfg.model_config() if args.config else None
    model, extras = load_checkpoint(args.checkpoint, config=wanted)
    mean, std = _parse_stats(extras)
    samples = load_dataset(cfg.data_dir, model.config.image_h)
    report = evaluate(model, samples, batch_size=cfg.batch_size, mean=mean, std=std)
    print(f"samples={len(samples)} mean_iou={report.mean_iou:.4f} "
          f"mean_dice={report.mean_dice:.4f}")
    return 0


def cmd_predict(args) -> int:
    model, extras = load_checkpoint(args.checkpoint)
    mean, std = _parse_stats(extras)
    size = (model.config.image_w, model.config.image_h)

    img = Image.open(args.image).convert("RGB")
    native = img.size
    if img.size != size:
        img = img.resize(size, Image.BILINEAR)
    arr = np.asarray(img, dtype=np.float32).transpose(2, 0, 1) / 255.0
    if mean is not None:
        arr = normalize_image(arr, mean, std)
    with no_grad():
        logits = model.forward(Tensor(arr[None]), mode="eval")
    mask = predict_mask(logits)[0, 0] * np.uint8(255)
    out_img = Image.fromarray(mask, mode="L")
    if out_img.size != native:
        out_img = out_img.resize(native, Image.NEAREST)
    out_path = args.out or os.path.splitext(args.image)[0] + "_mask.png"
    out_img.save(out_path)
    print(out_path)
    return 0


def _module_output_size(mc, name):
    if name == "final":
        return mc.num_classes, mc.image_h, mc.image_w
    if name == "stem":
        level = 0
    elif name.startswith("bottleneck"):
        level = 4
    else:
        _, idx, kind = name.split(".")
        i = int(idx)
        if name.startswith("enc."):
            level = i + 1 if kind == "down" else i
        else:
            level = 3 - i
    return mc.dims[level], mc.image_h >> (level + 1), mc.image_w >> (level + 1)


def cmd_info(args) -> int:
    cfg = load_config(args.config)
    mc = cfg.model_config()
    model = VigUnet(mc, rng=make_rng(0))
    print(f"{'module':<16} {'output size':<16} {'tensors':>8} {'params':>12}")
    for name, tensors, params in parameter_table(model):
        c, h, w = _module_output_size(mc, name)
        print(f"{name:<16} {f'{c}x{h}x{w}':<16} {tensors:>8} {params:>12}")
    total = count_parameters(model)
    print(f"total parameters: {total}")
    print("note: a published figure for this architecture quotes 0.7G parameters;")
    print("direct enumeration of the configured tensors gives the total above,")
    print("orders of magnitude smaller. This tool reports the enumerated count.")
    return 0


def cmd_gen(args) -> int:
    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else cfg.seed
    out = args.out or cfg.data_dir
    generate_synthetic(args.count, cfg.image_size, make_rng(seed), out)
    print(f"wrote {args.count} samples of size {cfg.image_size} under {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vigunet",
        description="Graph-convolutional U-shaped network for binary image segmentation.",
        epilog="config file keys (flat key=value lines, '#' comments):\n" + describe_keys(),
        formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="path to a key=value config file")
        sp.add_argument("--seed", type=int, help="override the config seed")

    p = sub.add_parser("train", help="train on data_dir, writing checkpoints and CSV")
    common(p)
    p.add_argument("--out", help="output directory (default: config out_dir)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="report mean IoU/Dice of a checkpoint on data_dir")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="write a {0,255} mask PNG for one image")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("image", help="input image path")
    p.add_argument("--out", help="mask output path (default: <image>_mask.png)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("info", help="print the per-module parameter table")
    common(p)
    p.set_defaults(func=cmd_info)

    p = sub.add_parser("gen", help="generate a synthetic ellipse dataset")
    common(p)
    p.add_argument("--out", help="dataset root (default: config data_dir)")
    p.add_argument("--count", type=int, default=32, help="number of samples")
    p.set_defaults(func=cmd_gen)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
