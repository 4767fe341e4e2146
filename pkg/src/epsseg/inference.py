"""Clustering-free full-image segmentation and Dice evaluation."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from numpy.lib.stride_tricks import sliding_window_view
from PIL import Image

from .data import LabeledImage, MaskSpec, _pad
from .errors import ConfigError, DataError
from .head import infer_assignment


@dataclass
class SegmentationMap:
    labels: np.ndarray
    confidence: np.ndarray


@dataclass
class EvalReport:
    per_class: list  # Dice per class, None where the class is in neither map
    mean: float
    counts: list  # ground-truth pixel count per class

    def to_json(self) -> dict:
        return {"per_class_dice": self.per_class, "mean_dice": self.mean, "pixel_counts": self.counts}


def grid_centers(n: int, stride: int) -> np.ndarray:
    return np.minimum(np.arange(0, n, stride) + stride // 2, n - 1)


@torch.no_grad()
def segment_image(
    image: LabeledImage | np.ndarray,
    model,
    stride: int = 1,
    batch_size: int = 1024,
    inference_mask: Optional[MaskSpec] = None,
) -> SegmentationMap:
    """Classify the center pixel of a patch around every ``stride``-th pixel.

    Pixels between evaluated centers take the label of the center of their
    stride x stride cell.
    """
    pixels = image.pixels if isinstance(image, LabeledImage) else np.asarray(image, dtype=np.float32)
    P = model.cfg.patch_side
    if stride < 1 or stride > P:
        raise ConfigError(f"stride must be in [1, {P}], got {stride}")
    was_training = model.training
    model.eval()
    H, W = pixels.shape
    rows, cols = grid_centers(H, stride), grid_centers(W, stride)
    windows = sliding_window_view(_pad(pixels.astype(np.float32), P // 2), (P, P))
    windows = windows[rows][:, cols].reshape(-1, P, P)
    dtype = next(model.parameters()).dtype
    probs = []
    for start in range(0, len(windows), batch_size):
        chunk = np.array(windows[start : start + batch_size])
        if inference_mask is not None:
            lo, hi = inference_mask.bounds(P)
            chunk[:, lo:hi, lo:hi] = inference_mask.fill_value
        logits = model.classify(torch.from_numpy(chunk).to(dtype))
        probs.append(infer_assignment(logits)[0].numpy())
    model.train(was_training)
    probs = np.concatenate(probs).reshape(len(rows), len(cols), -1)
    grid_lab = probs.argmax(-1)
    grid_conf = probs.max(-1)
    ri = np.minimum(np.arange(H) // stride, len(rows) - 1)
    ci = np.minimum(np.arange(W) // stride, len(cols) - 1)
    return SegmentationMap(grid_lab[np.ix_(ri, ci)].astype(np.int64), grid_conf[np.ix_(ri, ci)].astype(np.float32))


def dice_score(pred: np.ndarray, truth: np.ndarray) -> float:
    """2|A n B| / (|A| + |B|); 1.0 when both masks are empty."""
    pred, truth = np.asarray(pred, bool), np.asarray(truth, bool)
    if pred.shape != truth.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {truth.shape}")
    denom = int(pred.sum()) + int(truth.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred, truth).sum()) / denom


def evaluate(seg, truth: np.ndarray, num_classes: Optional[int] = None) -> EvalReport:
    """One-vs-rest Dice per class; the mean runs over classes present in ``truth``."""
    pred = seg.labels if isinstance(seg, SegmentationMap) else np.asarray(seg)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction {pred.shape} vs truth {truth.shape}")
    if num_classes is None:
        num_classes = int(max(pred.max(), truth.max())) + 1
    per_class, counts, present = [], [], []
    for c in range(num_classes):
        a, b = pred == c, truth == c
        counts.append(int(b.sum()))
        if not a.any() and not b.any():
            per_class.append(None)
            continue
        per_class.append(dice_score(a, b))
        if b.any():
            present.append(per_class[-1])
    mean = float(np.mean(present)) if present else float("nan")
    return EvalReport(per_class, mean, counts)


def evaluate_many(segs: Sequence, truths: Sequence[np.ndarray], num_classes: int) -> EvalReport:
    """Pool pixels across images, then evaluate once."""
    pred = np.concatenate([(s.labels if isinstance(s, SegmentationMap) else s).ravel() for s in segs])
    truth = np.concatenate([t.ravel() for t in truths])
    return evaluate(pred, truth, num_classes)


# ---------------------------------------------------------------- output files

_PALETTE = np.array(
    [[230, 25, 75], [60, 180, 75], [255, 225, 25], [0, 130, 200], [245, 130, 48],
     [145, 30, 180], [70, 240, 240], [240, 50, 230], [210, 245, 60], [250, 190, 212]],
    dtype=np.float64,
)


def write_segmentation(seg: SegmentationMap, path) -> None:
    """Indexed PNG: gray level == class id."""
    if seg.labels.max() > 255:
        raise DataError("more than 256 classes cannot be stored in an 8-bit PNG")
    Image.fromarray(seg.labels.astype(np.uint8)).save(path)


def read_segmentation(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im).astype(np.int64)


def write_overlay(pixels: np.ndarray, labels: np.ndarray, path, alpha: float = 0.4) -> None:
    gray = np.repeat(np.clip(pixels, 0, 1)[..., None] * 255.0, 3, axis=-1)
    color = _PALETTE[labels % len(_PALETTE)]
    Image.fromarray(((1 - alpha) * gray + alpha * color).astype(np.uint8)).save(path)


def write_report(report: EvalReport, path, extra: Optional[dict] = None) -> None:
    body = report.to_json()
    if extra:
        body.update(extra)
    Path(path).write_text(json.dumps(body, indent=2) + "\n")
