"""Command-line entry point.

Exit codes: 0 success, 1 runtime or data error, 2 usage or config error.
"""

import argparse
import logging
import os
import sys
from dataclasses import fields

import numpy as np

from . import data as D
from .evaluation import EvalReport, compare_report, evaluate_maps
from .network import (
    CheckpointError,
    NetworkConfig,
    build_network,
    load_checkpoint,
    parse_target,
    save_checkpoint,
)
from .pipeline import child_seed, run_ablation, segment_image, write_ablation
from .postprocess import extract_footprints, write_footprints
from .training import TrainConfig, train

log = logging.getLogger("feedbackseg")


class UsageError(Exception):
    """Invalid arguments or configuration (exit status 2)."""


class RunError(Exception):
    """Runtime or data failure (exit status 1)."""


# -- config -----------------------------------------------------------------

NET_KEYS = {
    "net.channels": "unit_channels",
    "net.strides": "strides",
    "net.num_classes": "num_classes",
    "net.input_channels": "input_channels",
    "net.kernel_size": "kernel_size",
    "net.gamma": "gamma",
}
TRAIN_KEYS = {
    "train.lr": "learning_rate",
    "train.weight_decay": "weight_decay",
    "train.momentum": "momentum",
    "train.batch_size": "batch_size",
    "train.epochs": "epochs",
    "train.feedback": "feedback_in_training",
    "train.lr_schedule": "lr_schedule",
    "train.lr_step_factor": "lr_step_factor",
    "train.lr_step_every": "lr_step_every",
    "train.augment": "augment",
}
GEN_KEYS = {f"gen.{f.name}": f.name for f in fields(D.GenParams)}


def read_config(path):
    """Parse a ``key = value`` file; ``#`` starts a comment."""
    out = {}
    try:
        with open(path) as f:
            lines = f.read().splitlines()
    except OSError as e:
        raise UsageError(f"cannot read config {path}: {e.strerror}") from None
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k] = v
    return out


def _coerce(value, default):
    if isinstance(default, bool):
        v = value.lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {value!r}")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    if isinstance(default, tuple):
        return tuple(type(default[0])(x) for x in value.replace(" ", "").split(",") if x)
    return value


def _apply(obj, mapping, kv):
    for key, attr in mapping.items():
        if key in kv:
            try:
                setattr(obj, attr, _coerce(kv[key], getattr(obj, attr)))
            except ValueError as e:
                raise UsageError(f"{key}: {e}") from None
    return obj


def build_run_config(config_path=None, overrides=(), seed=None):
    """Merge config file, ``--set`` overrides and ``--seed`` into validated objects."""
    kv = read_config(config_path) if config_path else {}
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        kv[k.strip()] = v.strip()
    known = set(NET_KEYS) | set(TRAIN_KEYS) | set(GEN_KEYS) | {"seed"}
    unknown = sorted(set(kv) - known)
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    if seed is None:
        seed = int(kv.get("seed", 0))
    net = _apply(NetworkConfig(), NET_KEYS, kv)
    tr = _apply(TrainConfig(seed=child_seed(seed, "train")), TRAIN_KEYS, kv)
    gen = _apply(D.GenParams(seed=seed), GEN_KEYS, kv)
    try:
        net.__post_init__()
        gen.__post_init__()
        net.validate()
        tr.validate()
        gen.validate()
    except ValueError as e:
        raise UsageError(f"invalid configuration: {e}") from None
    return seed, net, tr, gen


# -- commands ---------------------------------------------------------------


def cmd_gen_data(args):
    _, _, _, gen = build_run_config(args.params, args.set, args.seed)
    gen.seed = args.seed
    if args.num < 0:
        raise UsageError("--num must be >= 0")
    try:
        manifest = D.generate_dataset(gen, args.num, args.out)
    except OSError as e:
        raise RunError(f"cannot write dataset: {e}") from None
    for k, v in manifest.items():
        print(f"{k} = {v}")
    if args.num == 0:
        print("warning: generated an empty dataset", file=sys.stderr)
    return 0


def cmd_gen_tiles(args):
    _, _, _, gen = build_run_config(args.params, args.set, args.seed)
    if args.size % gen.patch_size:
        raise UsageError(f"--size must be a multiple of {gen.patch_size}")
    tiles = D.generate_tiles(gen, args.num, args.size, seed=args.seed)
    try:
        D.write_tiles(tiles, args.out)
    except OSError as e:
        raise RunError(f"cannot write tiles: {e}") from None
    print(f"tiles = {len(tiles)}\nsize = {args.size}\nseed = {args.seed}")
    return 0


def cmd_train(args):
    seed, net_cfg, tr_cfg, _ = build_run_config(args.config, args.set, args.seed)
    if args.feedback_training:
        tr_cfg.feedback_in_training = True
    if not os.path.isdir(args.data):
        raise RunError(f"data directory not found: {args.data}")
    try:
        patches = D.load_labeled_patches(args.data, net_cfg.num_classes)
    except D.DatasetError as e:
        raise RunError(str(e)) from None
    if not patches:
        raise RunError(f"{args.data}: no training patches")
    if tr_cfg.batch_size > len(patches):
        raise UsageError(f"train.batch_size {tr_cfg.batch_size} exceeds {len(patches)} patches")
    net = build_network(net_cfg, child_seed(seed, "init"))
    net, report = train(net, patches, tr_cfg, progress=lambda s: print(
        f"epoch {s.epoch}: loss {s.loss:.6f} acc {s.accuracy:.4f}", flush=True))
    save_checkpoint(net, net_cfg, args.out)
    report.checkpoint = args.out
    base = args.report or os.path.splitext(args.out)[0]
    with open(base + ".log", "w") as f:
        f.write("\n".join(report.log_lines()) + "\n")
    with open(base + ".report", "w") as f:
        f.writelines(f"{k} = {v}\n" for k, v in report.key_values().items())
    if args.figures:
        from .plotting import plot_training

        os.makedirs(args.figures, exist_ok=True)
        plot_training(report, os.path.join(args.figures, "training.png"))
    return 0


def _load_model(path):
    if not os.path.exists(path):
        raise RunError(f"model not found: {path}")
    try:
        return load_checkpoint(path)
    except CheckpointError as e:
        raise RunError(f"{path}: {e}") from None


def cmd_infer(args):
    net, cfg = _load_model(args.model)
    try:
        parse_target(args.target, cfg.num_classes)
    except ValueError as e:
        raise UsageError(f"--target: {e}") from None
    if os.path.isdir(args.image):
        names = sorted(n for n in os.listdir(args.image) if n.endswith(".pgm"))
        os.makedirs(args.out, exist_ok=True)
        jobs = [(os.path.join(args.image, n), os.path.join(args.out, n)) for n in names]
    else:
        jobs = [(args.image, args.out)]
    for src, dst in jobs:
        try:
            img = D.load_image(src)
        except (FileNotFoundError, D.ImageFormatError) as e:
            raise RunError(str(e)) from None
        if img.shape[0] != cfg.input_channels:
            raise RunError(f"{src}: {img.shape[0]} channels, model expects {cfg.input_channels}")
        m = segment_image(net, img, args.target, feedback=args.feedback == "on",
                          refine=args.refine, max_side=args.max_side)
        D.save_map(m, dst)
        if args.footprints:
            fp_path = args.footprints if len(jobs) == 1 else os.path.splitext(dst)[0] + ".csv"
            write_footprints(extract_footprints(m, args.threshold), fp_path)
        if args.figures:
            from .plotting import plot_maps

            os.makedirs(args.figures, exist_ok=True)
            stem = os.path.splitext(os.path.basename(dst))[0]
            plot_maps([("image", img[0]), (f"map ({args.feedback})", m)],
                      os.path.join(args.figures, stem + ".png"))
    return 0


def _write_report(obj, path, fmt):
    text = obj.to_table() if fmt == "table" else obj.to_text()
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(path, "w") as f:
            f.write(text)


def cmd_eval(args):
    for d in (args.pred, args.gt):
        if not os.path.isdir(d):
            raise RunError(f"directory not found: {d}")
    names = sorted(n for n in os.listdir(args.pred) if n.endswith(".pgm"))
    if not names:
        raise RunError(f"{args.pred}: no .pgm predictions")
    preds, masks = [], []
    for n in names:
        gt_path = os.path.join(args.gt, n)
        if not os.path.exists(gt_path):
            raise RunError(f"missing ground truth for {n}: {gt_path}")
        try:
            px, maxval = D.read_pgm(os.path.join(args.pred, n))
            preds.append(px.astype(np.float64) / maxval)
            masks.append(D.load_mask(gt_path))
        except D.ImageFormatError as e:
            raise RunError(str(e)) from None
        if preds[-1].shape != masks[-1].shape:
            raise RunError(f"{n}: prediction {preds[-1].shape} vs mask {masks[-1].shape}")
    report = evaluate_maps(preds, masks, [os.path.splitext(n)[0] for n in names],
                           name=args.name or os.path.basename(os.path.normpath(args.pred)))
    _write_report(report, args.report, args.format)
    if args.figures:
        from .plotting import plot_pr_curves

        os.makedirs(args.figures, exist_ok=True)
        plot_pr_curves(report, os.path.join(args.figures, "pr_curve.png"))
    return 0


def cmd_compare(args):
    reports = []
    for path in args.reports:
        try:
            with open(path) as f:
                reports.append(EvalReport.from_text(f.read()))
        except OSError as e:
            raise RunError(f"cannot read {path}: {e.strerror}") from None
        except (KeyError, ValueError) as e:
            raise RunError(f"{path}: malformed report ({e})") from None
    cmp_ = compare_report(reports)
    _write_report(cmp_, args.out, args.format)
    if args.figures:
        from .plotting import plot_comparison

        os.makedirs(args.figures, exist_ok=True)
        plot_comparison(cmp_, os.path.join(args.figures, "comparison.png"))
    return 0


def cmd_ablation(args):
    result = run_ablation(
        seed=args.seed, n_patches=args.patches, epochs=args.epochs, n_tiles=args.tiles,
        tile_size=args.tile_size, refine=not args.no_refine,
        progress=lambda s: print(f"epoch {s.epoch}: loss {s.loss:.6f} acc {s.accuracy:.4f}",
                                 flush=True),
    )
    write_ablation(result, args.out, figures=not args.no_figures)
    sys.stdout.write(result.reports["comparison"].to_table())
    print(f"holdout accuracy {result.accuracy:.4f}; feedback >= plain on "
          f"{result.wins}/{len(result.tile_f_plain)} tiles")
    return 0


# -- parser -----------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="feedbackseg", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a labeled synthetic patch dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--num", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--params", help="config file with gen.* keys")
    g.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    g.set_defaults(func=cmd_gen_data)

    g = sub.add_parser("gen-tiles", help="write evaluation tiles with ground-truth masks")
    g.add_argument("--out", required=True)
    g.add_argument("--num", type=int, required=True)
    g.add_argument("--size", type=int, default=256)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--params")
    g.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    g.set_defaults(func=cmd_gen_tiles)

    t = sub.add_parser("train", help="train from image-level labels")
    t.add_argument("--data", required=True)
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--feedback-training", action="store_true")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    t.add_argument("--report", help="path stem for the .log and .report files")
    t.add_argument("--figures", help="directory for training curves")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="dense localization map for an image or directory")
    i.add_argument("--model", required=True)
    i.add_argument("--image", required=True)
    i.add_argument("--target", default="top1")
    i.add_argument("--feedback", choices=["on", "off"], default="on")
    i.add_argument("--refine", action="store_true")
    i.add_argument("--out", required=True)
    i.add_argument("--max-side", type=int, default=512, help="tile images larger than this")
    i.add_argument("--footprints", help="also write footprints CSV")
    i.add_argument("--threshold", type=float, default=0.5)
    i.add_argument("--figures")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="pixel-wise optimal F and PR-AUC")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--report", required=True)
    e.add_argument("--format", choices=["kv", "table"], default="kv")
    e.add_argument("--name")
    e.add_argument("--figures")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("compare", help="side-by-side table of evaluation reports")
    c.add_argument("--reports", nargs="+", required=True)
    c.add_argument("--out")
    c.add_argument("--format", choices=["kv", "table"], default="table")
    c.add_argument("--figures")
    c.set_defaults(func=cmd_compare)

    a = sub.add_parser("ablation", help="train and compare maps with and without feedback")
    a.add_argument("--out", required=True)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--patches", type=int, default=2000)
    a.add_argument("--epochs", type=int, default=20)
    a.add_argument("--tiles", type=int, default=10)
    a.add_argument("--tile-size", type=int, default=256)
    a.add_argument("--no-refine", action="store_true")
    a.add_argument("--no-figures", action="store_true")
    a.set_defaults(func=cmd_ablation)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except RunError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
