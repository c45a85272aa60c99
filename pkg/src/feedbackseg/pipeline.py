"""End-to-end runs: image segmentation with tiling, and the feedback ablation."""

import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .data import (
    GenParams,
    LabeledPatch,
    derive_rng,
    generate_patch,
    generate_tiles,
    stitch_maps,
    tile_image,
)
from .evaluation import compare_report, evaluate_maps, optimal_fscore
from .network import (
    NetworkConfig,
    build_network,
    feedback_infer,
    forward_classify,
    parse_target,
    refine_with_input,
)
from .tensor import minmax_normalize
from .training import TrainConfig, evaluate_classification, train

log = logging.getLogger(__name__)


def child_seed(seed, tag):
    return int(derive_rng(seed, tag).integers(2**31))


def _pad_to_multiple(image, f):
    h, w = image.shape[-2:]
    ph, pw = (-h) % f, (-w) % f
    if ph or pw:
        image = np.pad(image, ((0, 0), (0, ph), (0, pw)), mode="edge")
    return image


def segment_image(net, image, target="top1", feedback=True, refine=False,
                  tile_size=256, tile_stride=128, max_side=512):
    """H x W map in [0, 1] for a C x H x W image of any size.

    Images are edge-padded to a multiple of the network's downsampling
    factor. When either side exceeds ``max_side`` the image is cut into
    overlapping ``tile_size`` windows, raw maps are averaged where they
    overlap, and normalization happens once on the stitched map.
    """
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[None]
    h, w = image.shape[-2:]
    padded = _pad_to_multiple(image, net.config.upsample_factor)
    kind, k = parse_target(target, net.config.num_classes)
    if kind == "top":
        if k != 1:
            raise ValueError("segment_image produces one map; use a class index or top1")
        logits, _, _ = forward_classify(net, padded, "infer")
        target = int(np.argmax(logits[0]))
    else:
        target = k

    ph, pw = padded.shape[-2:]
    if max(ph, pw) <= max_side or min(ph, pw) < tile_size:
        raw = feedback_infer(net, padded, target, feedback=feedback, normalize=False)
    else:
        patches, coords = tile_image(padded, tile_size, tile_stride)
        maps = [feedback_infer(net, p, target, feedback=feedback, normalize=False) for p in patches]
        raw = stitch_maps(maps, coords, (ph, pw))
    out = minmax_normalize(raw[:h, :w])
    if refine:
        out = refine_with_input(out, image)
    return out


@dataclass
class AblationResult:
    accuracy: float
    holdout_loss: float
    tile_f_plain: list
    tile_f_feedback: list
    reports: dict = field(default_factory=dict)
    train_report: object = None
    seconds: float = 0.0

    @property
    def wins(self):
        return sum(b >= a for a, b in zip(self.tile_f_plain, self.tile_f_feedback))

    @property
    def mean_f_feedback(self):
        return float(np.mean(self.tile_f_feedback))

    @property
    def mean_f_plain(self):
        return float(np.mean(self.tile_f_plain))


def make_patches(params, n, seed, tag="patch"):
    out = []
    for i in range(n):
        img, _, label = generate_patch(derive_rng(seed, tag, i), params)
        out.append(LabeledPatch(img, label, f"{tag}_{i}"))
    return out


def run_ablation(seed=0, n_patches=2000, epochs=20, n_tiles=10, tile_size=256, n_holdout=500,
                 refine=True, net_config=None, train_config=None, gen_params=None,
                 target_class=1, progress=None):
    """Train on synthetic patches, then score tiles with and without feedback.

    Every tile is generated from its own derived seed. Both arms use the same
    trained network and the same post-processing; they differ only in
    whether the gated second pass runs.
    """
    t0 = time.perf_counter()
    params = gen_params or GenParams(seed=child_seed(seed, "gen"))
    train_set = make_patches(params, n_patches, params.seed)
    holdout = make_patches(params, n_holdout, child_seed(seed, "holdout"), tag="holdout")
    net_config = net_config or NetworkConfig()
    net = build_network(net_config, child_seed(seed, "init"))
    tcfg = train_config or TrainConfig(epochs=epochs, seed=child_seed(seed, "train"))
    net, train_rep = train(net, train_set, tcfg, progress=progress)
    acc, loss = evaluate_classification(net, holdout)

    plain, fb, masks, names = [], [], [], []
    for i in range(n_tiles):
        tile = generate_tiles(params, 1, tile_size, seed=child_seed(seed, f"tile{i}"))[0]
        tile.name = f"tile_{i:02d}"
        a = segment_image(net, tile.image, target_class, feedback=False, refine=refine)
        b = segment_image(net, tile.image, target_class, feedback=True, refine=refine)
        plain.append(a)
        fb.append(b)
        masks.append(tile.mask)
        names.append(tile.name)

    rep_plain = evaluate_maps(plain, masks, names, name="no feedback")
    rep_fb = evaluate_maps(fb, masks, names, name="feedback")
    return AblationResult(
        acc,
        loss,
        [optimal_fscore(p, m)[0] for p, m in zip(plain, masks)],
        [optimal_fscore(p, m)[0] for p, m in zip(fb, masks)],
        {"plain": rep_plain, "feedback": rep_fb,
         "comparison": compare_report([rep_plain, rep_fb])},
        train_rep,
        time.perf_counter() - t0,
    )


def write_ablation(result, out_dir, figures=True, net=None):
    """Write text reports (and figures) for an ablation result."""
    os.makedirs(out_dir, exist_ok=True)
    cmp_ = result.reports["comparison"]
    with open(os.path.join(out_dir, "plain.report"), "w") as f:
        f.write(result.reports["plain"].to_text())
    with open(os.path.join(out_dir, "feedback.report"), "w") as f:
        f.write(result.reports["feedback"].to_text())
    with open(os.path.join(out_dir, "comparison.txt"), "w") as f:
        f.write(cmp_.to_table())
    with open(os.path.join(out_dir, "comparison.report"), "w") as f:
        f.write(cmp_.to_text())
    with open(os.path.join(out_dir, "summary.txt"), "w") as f:
        f.write(f"holdout_accuracy = {result.accuracy!r}\n")
        f.write(f"holdout_loss = {result.holdout_loss!r}\n")
        f.write(f"feedback_wins = {result.wins}\n")
        f.write(f"tiles = {len(result.tile_f_plain)}\n")
        f.write(f"mean_f_plain = {result.mean_f_plain!r}\n")
        f.write(f"mean_f_feedback = {result.mean_f_feedback!r}\n")
        for i, (a, b) in enumerate(zip(result.tile_f_plain, result.tile_f_feedback)):
            f.write(f"tile.{i}.f_plain = {a!r}\ntile.{i}.f_feedback = {b!r}\n")
    if figures:
        from . import plotting

        plotting.plot_pr_curves(result.reports["plain"], os.path.join(out_dir, "pr_plain.png"))
        plotting.plot_pr_curves(result.reports["feedback"], os.path.join(out_dir, "pr_feedback.png"))
        plotting.plot_comparison(cmp_, os.path.join(out_dir, "comparison.png"))
        if result.train_report is not None and result.train_report.epochs:
            plotting.plot_training(result.train_report, os.path.join(out_dir, "training.png"))
