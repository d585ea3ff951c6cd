"""Classification metrics, ROC/AUC, occlusion heatmaps, feature export.

The ROC builder accumulates integer pair counts before the final division,
so its AUC is exactly the Mann-Whitney pair-ordering statistic (ties worth
half) rather than merely close to it.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np


def confusion_matrix(predictions, labels, num_classes: int) -> np.ndarray:
    """K x K counts, rows = true class, columns = predicted class."""
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if predictions.shape != labels.shape:
        raise ValueError("predictions and labels must have the same length")
    if predictions.size and (
        predictions.min() < 0 or predictions.max() >= num_classes
        or labels.min() < 0 or labels.max() >= num_classes
    ):
        raise ValueError(f"class ids must lie in [0, {num_classes})")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (labels, predictions), 1)
    return cm


def binary_metrics(cm: np.ndarray) -> dict:
    """Sensitivity and specificity of a 2x2 matrix (positive class = index 1).

    Undefined ratios (zero denominators) are reported as None, not 0.
    """
    cm = np.asarray(cm)
    if cm.shape != (2, 2):
        raise ValueError(f"binary_metrics needs a 2x2 matrix, got {cm.shape}")
    tn, fp = int(cm[0, 0]), int(cm[0, 1])
    fn, tp = int(cm[1, 0]), int(cm[1, 1])
    sensitivity = tp / (tp + fn) if (tp + fn) > 0 else None
    specificity = tn / (tn + fp) if (tn + fp) > 0 else None
    return {"sensitivity": sensitivity, "specificity": specificity}


def prf1(cm: np.ndarray) -> list[dict]:
    """Per-class precision, recall, and F1; None where the denominator is zero."""
    cm = np.asarray(cm)
    k = cm.shape[0]
    if cm.shape != (k, k) or k < 2:
        raise ValueError(f"prf1 needs a square K>=2 matrix, got {cm.shape}")
    out = []
    for c in range(k):
        col = int(cm[:, c].sum())
        row = int(cm[c, :].sum())
        tp = int(cm[c, c])
        precision = tp / col if col > 0 else None
        recall = tp / row if row > 0 else None
        if precision is None or recall is None or (precision + recall) == 0:
            f1 = None
        else:
            f1 = 2 * precision * recall / (precision + recall)
        out.append({"precision": precision, "recall": recall, "f1": f1})
    return out


@dataclass
class RocCurve:
    points: list          # (fpr, tpr) pairs from (0,0) to (1,1)
    auc: float


def roc_auc(scores, labels) -> RocCurve:
    """ROC curve by threshold sweep; equal scores collapse into one step.

    AUC equals the exact pair statistic: P(random positive outscores a
    random negative), ties counted 0.5.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be 1-d of equal length")
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be binary (0/1)")
    pos = int(labels.sum())
    neg = len(labels) - pos
    if pos == 0 or neg == 0:
        raise ValueError("roc_auc needs both classes present")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order]
    points = [(0.0, 0.0)]
    tp = fp = 0
    auc_twice = 0          # integer accumulation keeps the AUC exact
    i = 0
    n = len(s)
    while i < n:
        j = i
        tp_inc = fp_inc = 0
        while j < n and s[j] == s[i]:
            if y[j] == 1:
                tp_inc += 1
            else:
                fp_inc += 1
            j += 1
        auc_twice += fp_inc * (2 * tp + tp_inc)
        tp += tp_inc
        fp += fp_inc
        points.append((fp / neg, tp / pos))
        i = j
    return RocCurve(points=points, auc=auc_twice / (2 * pos * neg))


def collapse_to_binary(probs: np.ndarray) -> np.ndarray:
    """Abnormality score per sample: 1 - p(NORMAL), NORMAL being class 0."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2:
        raise ValueError("expected an (N,K) probability matrix")
    sums = probs.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-4):
        raise ValueError("probability rows must sum to 1 within 1e-4")
    return 1.0 - probs[:, 0]


def classification_report(probs: np.ndarray, labels) -> dict:
    """Full metrics report: confusion, binary stats, per-class PRF1 + OvR AUC."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    k = probs.shape[1]
    preds = probs.argmax(axis=1)
    cm = confusion_matrix(preds, labels, k)

    binary_true = (labels != 0).astype(np.int64)
    binary_pred = (preds != 0).astype(np.int64)
    bcm = confusion_matrix(binary_pred, binary_true, 2)
    bm = binary_metrics(bcm)

    report = {
        "confusion": cm.tolist(),
        "sensitivity": bm["sensitivity"],
        "specificity": bm["specificity"],
        "per_class": [],
        "binary_auc": None,
        "roc_points": None,
    }
    per_class = prf1(cm)
    for c in range(k):
        entry = dict(per_class[c])
        ovr = (labels == c).astype(np.int64)
        if 0 < ovr.sum() < len(ovr):
            entry["auc_ovr"] = roc_auc(probs[:, c], ovr).auc
        else:
            entry["auc_ovr"] = None
        report["per_class"].append(entry)
    if 0 < binary_true.sum() < len(binary_true):
        curve = roc_auc(collapse_to_binary(probs), binary_true)
        report["binary_auc"] = curve.auc
        report["roc_points"] = [list(p) for p in curve.points]
    return report


# ---------------------------------------------------------------------------
# occlusion heatmaps


@dataclass
class OcclusionResult:
    grid: np.ndarray          # (gh, gw) confidence drops
    full: np.ndarray          # upsampled to the input resolution
    prob_original: float


def occlusion_heatmap(model, image: np.ndarray, target_class: int,
                      patch: int, stride: int, fill: float | None = None,
                      batch_size: int = 64) -> OcclusionResult:
    """Confidence drop per occluded patch position, on a model-input image.

    ``image`` is the (C,H,W) float input the model would normally see; the
    fill defaults to the image mean.  Heat is p(target | original) minus
    p(target | occluded), so positive cells supported the prediction.
    """
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3:
        raise ValueError("expected a (C,H,W) input image")
    _, h, w = image.shape
    if patch > h or patch > w:
        raise ValueError(f"patch {patch} exceeds image {h}x{w}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if fill is None:
        fill = float(image.mean(dtype=np.float64))
    gh = (h - patch) // stride + 1
    gw = (w - patch) // stride + 1
    p0 = float(model.predict_proba(image[None])[0, target_class])

    cells = [(gy, gx) for gy in range(gh) for gx in range(gw)]
    heat = np.zeros((gh, gw), dtype=np.float64)
    for start in range(0, len(cells), batch_size):
        chunk = cells[start:start + batch_size]
        batch = np.repeat(image[None], len(chunk), axis=0)
        for b, (gy, gx) in enumerate(chunk):
            y0, x0 = gy * stride, gx * stride
            batch[b, :, y0:y0 + patch, x0:x0 + patch] = fill
        probs = model.predict_proba(batch)[:, target_class]
        for b, (gy, gx) in enumerate(chunk):
            heat[gy, gx] = p0 - float(probs[b])

    from .data import resize_bilinear

    full = resize_bilinear(heat[:, :, None], h, w)[:, :, 0].astype(np.float64)
    return OcclusionResult(grid=heat, full=full, prob_original=p0)


def save_heatmap_artifacts(result: OcclusionResult, out_prefix) -> list[Path]:
    """Write the raw grid and upsampled map as PGM plus the grid as CSV."""
    from .data import write_pgm

    out_prefix = Path(out_prefix)
    out_prefix.parent.mkdir(parents=True, exist_ok=True)
    written = []

    def to_u8(arr):
        lo, hi = float(arr.min()), float(arr.max())
        if hi - lo < 1e-12:
            return np.zeros(arr.shape, dtype=np.uint8)
        return np.round((arr - lo) / (hi - lo) * 255.0).astype(np.uint8)

    grid_pgm = out_prefix.with_name(out_prefix.name + "_grid.pgm")
    full_pgm = out_prefix.with_name(out_prefix.name + "_full.pgm")
    grid_csv = out_prefix.with_name(out_prefix.name + "_grid.csv")
    write_pgm(grid_pgm, to_u8(result.grid))
    write_pgm(full_pgm, to_u8(result.full))
    with open(grid_csv, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for row in result.grid:
            writer.writerow([f"{v:.8g}" for v in row])
    written.extend([grid_pgm, full_pgm, grid_csv])
    return written


# ---------------------------------------------------------------------------
# feature export


def export_features(model, records, aug_cfg, out_path, batch_size: int = 32) -> Path:
    """Write penultimate features under the eval transform as CSV rows
    ``path,label,f_0..f_{D-1}``; byte-deterministic for a fixed model."""
    from .data import decode_image, eval_transform

    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    images = np.stack([eval_transform(decode_image(r.path), aug_cfg) for r in records])
    feats = []
    for i in range(0, len(images), batch_size):
        feats.append(model.features(images[i:i + batch_size]))
    feats = np.concatenate(feats, axis=0)
    with open(out_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["path", "label"] + [f"f_{i}" for i in range(feats.shape[1])])
        for r, row in zip(records, feats):
            writer.writerow([r.path, r.label] + [f"{v:.8g}" for v in row])
    return out_path
