"""Segmentation metrics, AUC, equivariance diagnostics, and evaluation.

Confusion-derived scores follow the usual definitions; when a metric's
ground-truth set is empty the value is 1.0 if the prediction agrees and
0.0 otherwise. AUC is the rank-based Mann-Whitney statistic with midrank
tie handling, which equals trapezoidal ROC integration.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import RotatedTestSet, Sample, rotate_arbitrary
from .ops import softmax_probs
from .unet import UNet

__all__ = [
    "ConfusionCounts",
    "confusion",
    "metrics_from_confusion",
    "auc",
    "equivariance_error",
    "EvalReport",
    "evaluate",
    "METRIC_NAMES",
]

METRIC_NAMES = ("accuracy", "sensitivity", "specificity", "iou", "dice", "auc")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def _check_binary(arr: np.ndarray, name: str) -> np.ndarray:
    arr = np.asarray(arr)
    vals = np.unique(arr)
    if not np.isin(vals, (0, 1)).all():
        raise ValueError(f"{name} must be binary, found values {vals[:6]}")
    return arr.astype(bool)


def confusion(pred: np.ndarray, label: np.ndarray,
              mask: np.ndarray | None = None) -> ConfusionCounts:
    """Pixel confusion counts; an optional mask restricts the evaluated region."""
    pred = _check_binary(pred, "pred")
    label = _check_binary(label, "label")
    if pred.shape != label.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs label {label.shape}")
    if mask is not None:
        keep = _check_binary(mask, "mask")
        pred, label = pred[keep], label[keep]
    tp = int(np.count_nonzero(pred & label))
    fp = int(np.count_nonzero(pred & ~label))
    fn = int(np.count_nonzero(~pred & label))
    tn = int(np.count_nonzero(~pred & ~label))
    return ConfusionCounts(tp=tp, fp=fp, tn=tn, fn=fn)


def _ratio(num: int, den: int, agrees: bool) -> float:
    if den == 0:
        return 1.0 if agrees else 0.0
    return num / den


def metrics_from_confusion(c: ConfusionCounts) -> dict[str, float]:
    return {
        "accuracy": _ratio(c.tp + c.tn, c.total, agrees=True),
        "sensitivity": _ratio(c.tp, c.tp + c.fn, agrees=c.fp == 0),
        "specificity": _ratio(c.tn, c.tn + c.fp, agrees=c.fn == 0),
        "iou": _ratio(c.tp, c.tp + c.fp + c.fn, agrees=c.fp == 0),
        "dice": _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn, agrees=c.fp == 0),
    }


def _midranks(x: np.ndarray) -> np.ndarray:
    """Ranks 1..n with tied values sharing the mean of their rank range."""
    order = np.argsort(x, kind="stable")
    sorted_x = x[order]
    ranks = np.empty(x.size, dtype=np.float64)
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and sorted_x[j + 1] == sorted_x[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auc(probabilities: np.ndarray, labels: np.ndarray) -> float:
    """Mann-Whitney AUC of foreground scores with midrank tie handling."""
    probs = np.asarray(probabilities, dtype=np.float64).reshape(-1)
    labels = _check_binary(labels, "labels").reshape(-1)
    if probs.shape != labels.shape:
        raise ValueError(
            f"shape mismatch: probabilities {probs.shape} vs labels {labels.shape}"
        )
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes present in the labels")
    ranks = _midranks(probs)
    rank_sum = float(ranks[labels].sum())
    u = rank_sum - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


# ---------------------------------------------------------------------------
# equivariance diagnostics


def equivariance_error(pred_from_original: np.ndarray,
                       pred_from_rotated: np.ndarray,
                       angle: float) -> tuple[np.ndarray, float]:
    """Difference map and MSE between a prediction and a back-rotated one.

    The rotated-input prediction is rotated back by -angle (nearest
    neighbor); the MSE runs over the region that stays inside the frame
    under both rotations, so fill pixels never count as model error.
    """
    a = np.asarray(pred_from_original, dtype=np.float64)
    b = np.asarray(pred_from_rotated, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    back = rotate_arbitrary(b, -angle)
    ones = np.ones(a.shape[-2:], dtype=np.float64)
    valid = rotate_arbitrary(rotate_arbitrary(ones, angle), -angle) > 0.5
    diff = np.where(valid, back - a, 0.0)
    mse = float(np.square(diff[..., valid]).mean()) if valid.any() else 0.0
    return diff, mse


# ---------------------------------------------------------------------------
# whole-testset evaluation


@dataclass
class EvalReport:
    """Per-sample, per-angle metric rows plus aggregate summaries."""

    rows: list[dict] = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def to_csv(self, path: str | Path) -> None:
        fields = ["id", "angle", *METRIC_NAMES, "equiv_mse"]
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=fields)
            writer.writeheader()
            for row in self.rows:
                writer.writerow({k: row.get(k, "") for k in fields})

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.summary, indent=2) + "\n")


def _pad_to_multiple(x: np.ndarray, multiple: int) -> tuple[np.ndarray, tuple]:
    h, w = x.shape[-2:]
    ph = (-h) % multiple
    pw = (-w) % multiple
    pads = ((0, 0),) * (x.ndim - 2) + (
        (ph // 2, ph - ph // 2),
        (pw // 2, pw - pw // 2),
    )
    crop = (slice(ph // 2, ph // 2 + h), slice(pw // 2, pw // 2 + w))
    return np.pad(x, pads), crop


def predict_probs(net: UNet, image: np.ndarray) -> np.ndarray:
    """Foreground probability map for one [3, H, W] image.

    Pads symmetrically to dims the network accepts, crops back, and rounds
    the probabilities to 10 decimals so downstream thresholding and ranking
    are stable against accumulation-order noise.
    """
    factor = 1 << net.cfg.depth
    padded, crop = _pad_to_multiple(np.asarray(image), factor)
    logits = net.forward(padded[None])
    probs = softmax_probs(np.asarray(logits, dtype=np.float64))
    fg = probs[0, 1][crop]
    return np.round(fg, 10)


def evaluate(net: UNet, testset: RotatedTestSet, threshold: float = 0.5,
             mode: str = "rotate_labels", use_fov: bool = False,
             dtype=np.float64) -> EvalReport:
    """Run the rotated-test protocol and aggregate per-angle metrics.

    mode "rotate_labels" scores predictions on rotated images against
    labels rotated by the same transform; mode "rotate_back" rotates the
    prediction back and scores it against the original label. Aggregates
    cover the 0-degree rows and the mean over the nonzero angles.
    """
    if mode not in ("rotate_labels", "rotate_back"):
        raise ValueError(f"unknown mode {mode!r}")
    if not testset.entries:
        raise ValueError("empty test set")
    counts: dict[str, int] = {}
    for entry in testset.entries:
        counts[entry.sample.id] = counts.get(entry.sample.id, 0) + 1
    expected = len(testset.angles) + 1
    short = {k: v for k, v in counts.items() if v != expected}
    if short:
        raise ValueError(f"rotated copies missing: got counts {short}")

    eval_net = net if np.dtype(dtype) == net.dtype else net.cast(dtype)
    base_probs: dict[str, np.ndarray] = {}
    for s in testset.base:
        base_probs[s.id] = predict_probs(eval_net, s.image)

    rows = []
    for entry in testset.entries:
        s = entry.sample
        if entry.angle == 0.0:
            probs = base_probs[s.id]
        else:
            probs = predict_probs(eval_net, s.image)
        if mode == "rotate_back" and entry.angle != 0.0:
            # score the back-rotated prediction against the original label,
            # restricted to pixels that never left the frame
            scored_probs, valid = _back_rotated(probs, entry.angle)
            base_sample = testset.base_by_id(s.id)
            label, fov = base_sample.label, base_sample.fov
            mask = valid.astype(np.uint8)
            if use_fov and fov is not None:
                mask = mask & fov
        else:
            scored_probs, label, fov = probs, s.label, s.fov
            mask = fov if (use_fov and fov is not None) else None
        pred = (scored_probs >= threshold).astype(np.uint8)
        c = confusion(pred, label, mask=mask)
        row = {"id": s.id, "angle": entry.angle, **metrics_from_confusion(c)}
        if mask is None:
            row["auc"] = auc(scored_probs, label)
        else:
            keep = mask.astype(bool)
            row["auc"] = auc(scored_probs[keep], label[keep])
        if entry.angle != 0.0:
            _, mse = equivariance_error(base_probs[s.id], probs, entry.angle)
            row["equiv_mse"] = mse
        rows.append(row)

    summary = _summarize(rows, testset, mode, threshold)
    return EvalReport(rows=rows, summary=summary)


def _back_rotated(probs: np.ndarray, angle: float) -> tuple[np.ndarray, np.ndarray]:
    back = rotate_arbitrary(probs, -angle)
    ones = np.ones(probs.shape[-2:])
    valid = rotate_arbitrary(rotate_arbitrary(ones, angle), -angle) > 0.5
    return back, valid


def _summarize(rows: list[dict], testset: RotatedTestSet, mode: str,
               threshold: float) -> dict:
    def mean_over(selected: list[dict], key: str) -> float:
        return float(np.mean([r[key] for r in selected]))

    zero_rows = [r for r in rows if r["angle"] == 0.0]
    rot_rows = [r for r in rows if r["angle"] != 0.0]
    metrics = {}
    for name in METRIC_NAMES:
        metrics[name] = {
            "deg0": mean_over(zero_rows, name),
            "pm5": mean_over(rot_rows, name) if rot_rows else None,
        }
    per_angle_mse = {}
    for angle in testset.angles:
        sel = [r["equiv_mse"] for r in rows if r["angle"] == angle]
        per_angle_mse[str(angle)] = float(np.mean(sel)) if sel else None
    return {
        "metrics": metrics,
        "equiv_mse_per_angle": per_angle_mse,
        "rows": len(rows),
        "samples": len(testset.base),
        "angles": list(testset.angles),
        "label_mode": mode,
        "threshold": threshold,
        "pm5_includes_zero_angle": False,
        "resampling": testset.method,
    }
