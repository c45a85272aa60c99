"""Pixel-wise precision/recall, optimal F-score, PR-AUC and run comparison."""

from dataclasses import dataclass, field

import numpy as np


@dataclass
class PRPoint:
    threshold: float
    true_positives: int
    false_positives: int
    false_negatives: int

    @property
    def precision(self):
        d = self.true_positives + self.false_positives
        return self.true_positives / d if d else 0.0

    @property
    def recall(self):
        d = self.true_positives + self.false_negatives
        return self.true_positives / d if d else 0.0

    @property
    def f_score(self):
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r > 0 else 0.0


def _check(pred, mask):
    pred = np.asarray(pred, dtype=np.float64)
    mask = np.asarray(mask)
    if pred.shape != mask.shape:
        raise ValueError(f"prediction {pred.shape} vs mask {mask.shape}")
    if pred.size == 0:
        raise ValueError("empty map")
    return pred.ravel(), mask.ravel() > 0


def default_thresholds(pred):
    """Every distinct predicted value plus 0 and 1, ascending."""
    return np.union1d(np.unique(np.asarray(pred, dtype=np.float64)), [0.0, 1.0])


def pr_counts(pred, mask, thresholds):
    """``(tp, fp, fn)`` arrays with the positive call ``pred >= t``."""
    pred, mask = _check(pred, mask)
    t = np.asarray(thresholds, dtype=np.float64)
    pos = np.sort(pred[mask])
    neg = np.sort(pred[~mask])
    tp = pos.size - np.searchsorted(pos, t, side="left")
    fp = neg.size - np.searchsorted(neg, t, side="left")
    return tp, fp, pos.size - tp


def pr_curve(pred_map, gt_mask, thresholds=None):
    """PR points of ``pred_map`` against a binary mask, one per threshold."""
    if thresholds is None:
        thresholds = default_thresholds(pred_map)
    tp, fp, fn = pr_counts(pred_map, gt_mask, thresholds)
    return [
        PRPoint(float(t), int(a), int(b), int(c)) for t, a, b, c in zip(thresholds, tp, fp, fn)
    ]


def _f_from_counts(tp, fp, fn):
    tp, fp, fn = (np.asarray(v, dtype=np.float64) for v in (tp, fp, fn))
    with np.errstate(divide="ignore", invalid="ignore"):
        p = np.where(tp + fp > 0, tp / (tp + fp), 0.0)
        r = np.where(tp + fn > 0, tp / (tp + fn), 0.0)
        f = np.where(p + r > 0, 2 * p * r / (p + r), 0.0)
    return f


def best_of_counts(thresholds, tp, fp, fn):
    """Max F over the thresholds; ties go to the largest threshold."""
    f = _f_from_counts(tp, fp, fn)
    best = f.max()
    i = np.flatnonzero(f == best)
    k = i[np.argmax(np.asarray(thresholds)[i])]
    return float(best), float(thresholds[k])


def optimal_fscore(pred_map, gt_mask):
    """Return ``(f, threshold)`` maximizing pixel-wise F over all distinct thresholds."""
    t = default_thresholds(pred_map)
    return best_of_counts(t, *pr_counts(pred_map, gt_mask, t))


def auc_pr(pr_points):
    """Trapezoidal area under precision vs. recall.

    Points with no predicted positives carry no precision and are dropped;
    the curve is extended flat to recall 0 from its lowest-recall point.
    """
    if len(pr_points) < 2:
        raise ValueError("need at least 2 PR points")
    pts = [(p.recall, p.precision) for p in pr_points if p.true_positives + p.false_positives > 0]
    if not pts:
        return 0.0
    pts.sort(key=lambda rp: (rp[0], -rp[1]))
    r = np.array([0.0] + [p[0] for p in pts])
    pr = np.array([pts[0][1]] + [p[1] for p in pts])
    area = np.sum(np.diff(r) * (pr[1:] + pr[:-1]) / 2)
    return float(np.clip(area, 0.0, 1.0))


@dataclass
class TileResult:
    name: str
    optimal_f: float
    threshold: float
    auc: float
    positives: int
    pixels: int


@dataclass
class EvalReport:
    name: str = "run"
    tiles: list = field(default_factory=list)
    optimal_f: float = 0.0
    threshold: float = 1.0
    auc: float = 0.0
    curves: dict = field(default_factory=dict, repr=False, compare=False)
    aggregate_curve: list = field(default_factory=list, repr=False, compare=False)

    def key_values(self):
        out = {
            "format": "feedbackseg-eval/1",
            "name": self.name,
            "tiles": str(len(self.tiles)),
            "aggregate.optimal_f": repr(self.optimal_f),
            "aggregate.threshold": repr(self.threshold),
            "aggregate.auc_pr": repr(self.auc),
        }
        for i, t in enumerate(self.tiles):
            out[f"tile.{i}.name"] = t.name
            out[f"tile.{i}.optimal_f"] = repr(t.optimal_f)
            out[f"tile.{i}.threshold"] = repr(t.threshold)
            out[f"tile.{i}.auc_pr"] = repr(t.auc)
            out[f"tile.{i}.positives"] = str(t.positives)
            out[f"tile.{i}.pixels"] = str(t.pixels)
        return out

    def to_text(self):
        return "".join(f"{k} = {v}\n" for k, v in self.key_values().items())

    @classmethod
    def from_text(cls, text):
        kv = parse_key_values(text)
        if kv.get("format") != "feedbackseg-eval/1":
            raise ValueError(f"not an evaluation report (format={kv.get('format')!r})")
        tiles = []
        for i in range(int(kv["tiles"])):
            p = f"tile.{i}."
            tiles.append(
                TileResult(
                    kv[p + "name"],
                    float(kv[p + "optimal_f"]),
                    float(kv[p + "threshold"]),
                    float(kv[p + "auc_pr"]),
                    int(kv[p + "positives"]),
                    int(kv[p + "pixels"]),
                )
            )
        return cls(
            kv["name"],
            tiles,
            float(kv["aggregate.optimal_f"]),
            float(kv["aggregate.threshold"]),
            float(kv["aggregate.auc_pr"]),
        )

    def to_table(self):
        rows = [(t.name, t.optimal_f, t.threshold, t.auc) for t in self.tiles]
        rows.append(("ALL (micro)", self.optimal_f, self.threshold, self.auc))
        width = max(len(r[0]) for r in rows + [("tile",)])
        lines = [f"{'tile':<{width}}  {'opt-F':>7}  {'thresh':>7}  {'AUC-PR':>7}"]
        lines += [f"{n:<{width}}  {f:7.4f}  {t:7.4f}  {a:7.4f}" for n, f, t, a in rows]
        return "\n".join(lines) + "\n"


def parse_key_values(text):
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def evaluate_maps(preds, masks, names=None, name="run"):
    """Per-tile and micro-averaged metrics for lists of maps and masks."""
    if len(preds) != len(masks) or not preds:
        raise ValueError("need equally many (>= 1) predictions and masks")
    names = names or [f"tile_{i}" for i in range(len(preds))]
    report = EvalReport(name=name)
    for n, p, m in zip(names, preds, masks):
        pts = pr_curve(p, m)
        f, t = optimal_fscore(p, m)
        report.tiles.append(TileResult(n, f, t, auc_pr(pts), int((np.asarray(m) > 0).sum()),
                                       int(np.asarray(m).size)))
        report.curves[n] = pts
    allp = np.concatenate([np.asarray(p, dtype=np.float64).ravel() for p in preds])
    allm = np.concatenate([np.asarray(m).ravel() for m in masks])
    thr = default_thresholds(allp)
    counts = pr_counts(allp, allm, thr)
    report.optimal_f, report.threshold = best_of_counts(thr, *counts)
    report.aggregate_curve = [
        PRPoint(float(t), int(a), int(b), int(c)) for t, a, b, c in zip(thr, *counts)
    ]
    report.auc = auc_pr(report.aggregate_curve)
    return report


@dataclass
class Comparison:
    runs: list  # list of (name, EvalReport)

    def key_values(self):
        out = {"format": "feedbackseg-compare/1", "runs": str(len(self.runs))}
        base = self.runs[0][1]
        for i, (name, r) in enumerate(self.runs):
            out[f"run.{i}.name"] = name
            out[f"run.{i}.optimal_f"] = repr(r.optimal_f)
            out[f"run.{i}.auc_pr"] = repr(r.auc)
            out[f"run.{i}.delta_f"] = repr(r.optimal_f - base.optimal_f)
            out[f"run.{i}.delta_auc"] = repr(r.auc - base.auc)
        for i, j, df, da in self.pairwise():
            out[f"pair.{i}.{j}.delta_f"] = repr(df)
            out[f"pair.{i}.{j}.delta_auc"] = repr(da)
        return out

    def pairwise(self):
        out = []
        for i in range(len(self.runs)):
            for j in range(i + 1, len(self.runs)):
                a, b = self.runs[i][1], self.runs[j][1]
                out.append((i, j, b.optimal_f - a.optimal_f, b.auc - a.auc))
        return out

    def to_text(self):
        return "".join(f"{k} = {v}\n" for k, v in self.key_values().items())

    def to_table(self):
        width = max(len("run"), *(len(n) for n, _ in self.runs))
        lines = [f"{'run':<{width}}  {'opt-F':>7}  {'AUC-PR':>7}  {'dF':>8}  {'dAUC':>8}"]
        base = self.runs[0][1]
        for name, r in self.runs:
            lines.append(
                f"{name:<{width}}  {r.optimal_f:7.4f}  {r.auc:7.4f}  "
                f"{r.optimal_f - base.optimal_f:+8.4f}  {r.auc - base.auc:+8.4f}"
            )
        return "\n".join(lines) + "\n"


def compare_report(runs):
    """Align named reports in the given order; deltas are relative to the first run."""
    runs = [(r.name, r) if isinstance(r, EvalReport) else tuple(r) for r in runs]
    if not runs:
        raise ValueError("need at least one run")
    return Comparison(list(runs))
