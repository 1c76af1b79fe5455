"""Per-image overlap and boundary metrics, averaged image-wise."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy import ndimage

METRIC_NAMES = ("dsc", "iou", "precision", "recall", "f2", "hd", "hd95")
CSV_HEADER = ("id",) + METRIC_NAMES


class ConfusionCounts(NamedTuple):
    tp: int
    fp: int
    fn: int
    tn: int


def _as_binary(x, name: str) -> np.ndarray:
    a = np.asarray(x)
    if a.dtype != bool:
        if not np.isin(a, (0, 1)).all():
            raise ValueError(f"{name} must be binary (values in {{0,1}})")
        a = a.astype(bool)
    return a


def confusion(pred, gt) -> ConfusionCounts:
    p, g = _as_binary(pred, "pred"), _as_binary(gt, "gt")
    if p.shape != g.shape:
        raise ValueError(f"pred shape {p.shape} != gt shape {g.shape}")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionCounts(tp, fp, fn, p.size - tp - fp - fn)


def overlap_metrics(c: ConfusionCounts) -> dict:
    """DSC, IoU, precision, recall and F2.

    Both masks empty scores 1 on everything; exactly one empty scores 0.
    """
    tp, fp, fn = c.tp, c.fp, c.fn
    pred_empty, gt_empty = tp + fp == 0, tp + fn == 0
    if pred_empty and gt_empty:
        return dict.fromkeys(("dsc", "iou", "precision", "recall", "f2"), 1.0)
    if pred_empty or gt_empty:
        return dict.fromkeys(("dsc", "iou", "precision", "recall", "f2"), 0.0)
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    f2 = 5 * precision * recall / (4 * precision + recall) if tp else 0.0
    return {
        "dsc": 2 * tp / (2 * tp + fp + fn),
        "iou": tp / (tp + fp + fn),
        "precision": precision,
        "recall": recall,
        "f2": f2,
    }


_CROSS = ndimage.generate_binary_structure(2, 1)


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with at least one 4-neighbour outside the mask (or the image)."""
    m = _as_binary(mask, "mask")
    return m & ~ndimage.binary_erosion(m, structure=_CROSS, border_value=0)


def _directed(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Distance from each ``src`` pixel to the nearest ``dst`` pixel."""
    _, idx = ndimage.distance_transform_edt(~dst, return_indices=True)
    ys, xs = np.nonzero(src)
    dy = ys - idx[0][ys, xs]
    dx = xs - idx[1][ys, xs]
    return np.sqrt((dy * dy + dx * dx).astype(np.float64))


def hausdorff(pred, gt) -> dict:
    """Symmetric Hausdorff distance and its 95th-percentile variant, in pixels."""
    p, g = _as_binary(pred, "pred"), _as_binary(gt, "gt")
    if p.shape != g.shape:
        raise ValueError(f"pred shape {p.shape} != gt shape {g.shape}")
    p2, g2 = p.reshape(p.shape[-2:]), g.reshape(g.shape[-2:])
    bp, bg = boundary(p2), boundary(g2)
    if not bp.any() and not bg.any():
        return {"hd": 0.0, "hd95": 0.0}
    if not bp.any() or not bg.any():
        diag = float(np.hypot(*p2.shape))
        return {"hd": diag, "hd95": diag}
    d_pg, d_gp = _directed(bp, bg), _directed(bg, bp)
    return {
        "hd": float(max(d_pg.max(), d_gp.max())),
        "hd95": float(max(np.percentile(d_pg, 95), np.percentile(d_gp, 95))),
    }


def image_metrics(pred, gt) -> dict:
    return {**overlap_metrics(confusion(pred, gt)), **hausdorff(pred, gt)}


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)  # (id, metrics dict)

    @property
    def means(self) -> dict:
        return {k: float(np.mean([m[k] for _, m in self.rows])) for k in METRIC_NAMES}

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_HEADER)
            for sid, m in self.rows:
                w.writerow([sid] + [repr(float(m[k])) for k in METRIC_NAMES])
            means = self.means
            w.writerow(["MEAN"] + [repr(means[k]) for k in METRIC_NAMES])
        return path


def evaluate(model, samples, threshold: float = 0.5) -> EvalReport:
    """Score ``final_mask >= threshold`` per image (batch of one, eval mode)."""
    samples = list(samples)
    if not samples:
        raise ValueError("cannot evaluate an empty dataset")
    report = EvalReport()
    for s in sorted(samples, key=lambda s: s.id):
        prob = model.predict(s.image[None])[0, 0]
        report.rows.append((s.id, image_metrics(prob >= threshold, s.mask[0] > 0.5)))
    return report
