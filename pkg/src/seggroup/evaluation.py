"""Segmentation metrics, the grouping upper-bound analyzer, and the
masking-strategy benchmark."""

from __future__ import annotations

import time

import numpy as np
import torch

from .errors import ConfigError, DataError
from .grouping import RegionMaskSet
from .recognition import IGNORE_ID, LabelMap


def _grid(x) -> np.ndarray:
    arr = x.labels if isinstance(x, LabelMap) else np.asarray(x)
    if arr.ndim != 2 or not np.issubdtype(arr.dtype, np.integer):
        raise DataError("expected a 2-d integer label grid")
    return arr


class ConfusionAccumulator:
    """Pixel confusion counts; entry (g, p) = pixels with truth g predicted p.

    Accumulation is order-independent, and merging two accumulators equals
    accumulating their union.
    """

    def __init__(self, num_classes: int):
        if num_classes < 1:
            raise ConfigError("need at least one class")
        self.num_classes = num_classes
        self.matrix = np.zeros((num_classes, num_classes), dtype=np.int64)
        self.num_images = 0

    def add(self, pred, gt) -> "ConfusionAccumulator":
        pred = _grid(pred)
        gt = _grid(gt)
        if pred.shape != gt.shape:
            raise DataError(f"prediction shape {pred.shape} does not match ground truth {gt.shape}")
        keep = gt != IGNORE_ID
        g = gt[keep].astype(np.int64)
        p = pred[keep].astype(np.int64)
        if p.size and (p == IGNORE_ID).any():
            raise DataError("prediction contains ignore pixels; the predictor must always label")
        if g.size and (g.max() >= self.num_classes or p.max() >= self.num_classes):
            raise DataError(f"label id outside the {self.num_classes}-class range")
        counts = np.bincount(g * self.num_classes + p, minlength=self.num_classes**2)
        self.matrix += counts.reshape(self.num_classes, self.num_classes)
        self.num_images += 1
        return self

    def merged(self, other: "ConfusionAccumulator") -> "ConfusionAccumulator":
        if other.num_classes != self.num_classes:
            raise ConfigError("cannot merge accumulators with different class counts")
        out = ConfusionAccumulator(self.num_classes)
        out.matrix = self.matrix + other.matrix
        out.num_images = self.num_images + other.num_images
        return out

    @property
    def total_pixels(self) -> int:
        return int(self.matrix.sum())


def accumulate(acc: ConfusionAccumulator, pred, gt) -> ConfusionAccumulator:
    return acc.add(pred, gt)


def miou(acc: ConfusionAccumulator) -> tuple[list[float], float]:
    """Per-class IoU (NaN for classes absent from both gt and pred) and the
    mean over present classes, in percent."""
    if acc.total_pixels == 0:
        raise DataError("empty accumulator")
    m = acc.matrix
    tp = np.diag(m).astype(np.float64)
    denom = m.sum(axis=1) + m.sum(axis=0) - np.diag(m)
    per_class = np.full(acc.num_classes, np.nan)
    valid = denom > 0
    per_class[valid] = tp[valid] / denom[valid]
    return [float(v) for v in per_class * 100.0], float(per_class[valid].mean() * 100.0)


def pixel_accuracy(acc: ConfusionAccumulator) -> float:
    if acc.total_pixels == 0:
        raise DataError("empty accumulator")
    return float(np.diag(acc.matrix).sum() / acc.total_pixels * 100.0)


def evaluation_report(acc: ConfusionAccumulator) -> dict:
    per_class, mean = miou(acc)
    return {
        "per_class_iou": per_class,
        "miou": mean,
        "pixel_acc": pixel_accuracy(acc),
        "num_images": acc.num_images,
    }


# ------------------------------------------------------------- upper bound


def majority_labels(masks: RegionMaskSet, gt, fallback_label: int | None = None) -> dict[int, int]:
    """Best fixed label per region: its majority ground-truth label.

    Ignore pixels are excluded from the vote and ties go to the lowest label
    id. A region living entirely inside ignore pixels takes ``fallback_label``
    when given, otherwise it is left out (its pixels score as ignore).
    """
    gt = _grid(gt)
    high = masks.high_res
    if high.shape != gt.shape:
        raise DataError(f"mask shape {high.shape} does not match ground truth {gt.shape}")
    out: dict[int, int] = {}
    for rid in np.unique(high):
        votes = gt[high == rid]
        votes = votes[votes != IGNORE_ID]
        if votes.size == 0:
            if fallback_label is not None:
                out[int(rid)] = fallback_label
            continue
        out[int(rid)] = int(np.bincount(votes).argmax())
    return out


def upper_bound_map(masks: RegionMaskSet, gt, fallback_label: int | None = None) -> np.ndarray:
    labels = majority_labels(masks, gt, fallback_label)
    lut = np.full(int(masks.high_res.max()) + 1, IGNORE_ID, dtype=np.int64)
    for rid, label in labels.items():
        lut[rid] = label
    return lut[masks.high_res]


def upper_bound(masks: RegionMaskSet, gt, num_classes: int,
                fallback_label: int | None = None) -> tuple[float, list[float], np.ndarray]:
    """mIoU when every region receives its majority ground-truth label.

    This isolates grouping quality from recognition: no fixed labeling of the
    same masks can beat it on per-region pixel accuracy, and it is the
    conventional proxy for the optimal assignment.
    """
    ub = upper_bound_map(masks, gt, fallback_label)
    # regions left unlabeled live entirely inside ignore pixels, so the stand-in
    # value never enters the confusion matrix
    pred = np.where(ub == IGNORE_ID, 0, ub)
    acc = ConfusionAccumulator(num_classes).add(pred, gt)
    per_class, mean = miou(acc)
    return mean, per_class, ub


def upper_bound_dataset(pairs, num_classes: int, fallback_label: int | None = None,
                        per_image: bool = False) -> dict:
    """Upper bound over (RegionMaskSet, gt) pairs.

    Default accumulates one confusion matrix over the whole set (standard
    benchmark mIoU); ``per_image`` instead averages per-image mIoU values.
    """
    acc = ConfusionAccumulator(num_classes)
    image_scores = []
    count = 0
    for masks, gt in pairs:
        count += 1
        ub = upper_bound_map(masks, gt, fallback_label)
        pred = np.where(ub == IGNORE_ID, 0, ub)
        acc.add(pred, gt)
        if per_image:
            one = ConfusionAccumulator(num_classes).add(pred, gt)
            image_scores.append(miou(one)[1])
    if count == 0:
        raise DataError("no mask/ground-truth pairs supplied")
    per_class, mean = miou(acc)
    report = {
        "mode": "per_image" if per_image else "dataset",
        "miou": float(np.mean(image_scores)) if per_image else mean,
        "dataset_miou": mean,
        "per_class_iou": per_class,
        "num_images": count,
    }
    if per_image:
        report["per_image_miou"] = image_scores
    return report


# ---------------------------------------------------------------- benchmark


def benchmark_masking(vision, image, masks: RegionMaskSet, strategies=("pixel_mask", "token_mask", "context_aware"),
                      repeats: int = 20, warmup: int = 3, token_bank=None) -> dict:
    """Median wall-clock, trunk pass counts, and embedding fidelity per strategy.

    Fidelity is the mean cosine similarity of a strategy's region embeddings
    against the context-aware ones. Warmup runs never enter the statistics.
    """
    if repeats < 1:
        raise ConfigError("repeats must be >= 1")
    results = {}
    with torch.no_grad():
        reference = {
            e.region_id: e.vector
            for e in vision.encode_regions(image, masks, "context_aware", token_bank=token_bank)
        }
        for strategy in strategies:
            for _ in range(warmup):
                vision.encode_regions(image, masks, strategy, token_bank=token_bank)
            vision.reset_pass_count()
            times_ms = []
            embeddings = None
            for _ in range(repeats):
                start = time.perf_counter()
                embeddings = vision.encode_regions(image, masks, strategy, token_bank=token_bank)
                times_ms.append((time.perf_counter() - start) * 1000.0)
            passes = vision.pass_count // repeats
            sims = [
                float(e.vector @ reference[e.region_id])
                for e in embeddings
                if e.region_id in reference
            ]
            results[strategy] = {
                "median_ms": float(np.median(times_ms)),
                "passes": int(passes),
                "fidelity_cosine": float(np.mean(sims)),
            }
    return {
        "repeats": repeats,
        "warmup": warmup,
        "num_regions": len(masks.present_ids),
        "strategies": results,
    }
