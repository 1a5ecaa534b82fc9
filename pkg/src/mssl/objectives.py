"""Tversky training loss and Dice/IoU evaluation metrics."""

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ShapeError, NonFiniteInput, NonBinaryInput, EmptyList


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int


@dataclass(frozen=True)
class MetricPair:
    dice: float
    iou: float


def tversky_loss(probs, targets, a=0.3, b=0.7, smooth=1.0):
    """Tversky loss pooled over the whole batch.

    loss = 1 - (sum(p*g) + s) / (sum(p*g) + a*sum(p*(1-g)) + b*sum((1-p)*g) + s)

    Differentiable in probs when given torch tensors; numpy inputs return a float.
    """
    return_float = isinstance(probs, np.ndarray)
    if return_float:
        probs = torch.from_numpy(np.ascontiguousarray(probs))
    if isinstance(targets, np.ndarray):
        targets = torch.from_numpy(np.ascontiguousarray(targets))
    targets = targets.to(probs.dtype)
    if probs.shape != targets.shape:
        raise ShapeError(f"probs {tuple(probs.shape)} vs targets {tuple(targets.shape)}")
    if not torch.isfinite(probs).all() or not torch.isfinite(targets).all():
        raise NonFiniteInput("non-finite values in loss inputs")
    tp = (probs * targets).sum()
    fp = (probs * (1.0 - targets)).sum()
    fn = ((1.0 - probs) * targets).sum()
    loss = 1.0 - (tp + smooth) / (tp + a * fp + b * fn + smooth)
    return float(loss) if return_float else loss


def per_sample_tversky(probs, targets, a=0.3, b=0.7, smooth=1.0):
    """Per-image Tversky losses for a B x H x W batch (torch tensors)."""
    dims = tuple(range(1, probs.dim()))
    targets = targets.to(probs.dtype)
    tp = (probs * targets).sum(dim=dims)
    fp = (probs * (1.0 - targets)).sum(dim=dims)
    fn = ((1.0 - probs) * targets).sum(dim=dims)
    return 1.0 - (tp + smooth) / (tp + a * fp + b * fn + smooth)


def confusion_counts(pred, gt):
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"pred {pred.shape} vs gt {gt.shape}")
    for name, arr in (("pred", pred), ("gt", gt)):
        vals = np.unique(arr)
        if not np.isin(vals, (0, 1)).all():
            raise NonBinaryInput(f"{name} contains values outside {{0,1}}")
    p = pred.astype(bool)
    g = gt.astype(bool)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = int(np.count_nonzero(~p & ~g))
    return ConfusionCounts(tp=tp, fp=fp, fn=fn, tn=tn)


def metric_pair(c):
    """iou = TP/(TP+FP+FN), dice = 2TP/(2TP+FP+FN); empty-vs-empty scores 1.0."""
    denom = c.tp + c.fp + c.fn
    if denom == 0:
        return MetricPair(dice=1.0, iou=1.0)
    iou = c.tp / denom
    dice = 2.0 * c.tp / (2.0 * c.tp + c.fp + c.fn)
    return MetricPair(dice=dice, iou=iou)


def aggregate(per_image):
    """Arithmetic mean of per-image dice and iou."""
    if not per_image:
        raise EmptyList("cannot aggregate an empty metric list")
    m_dice = sum(m.dice for m in per_image) / len(per_image)
    m_iou = sum(m.iou for m in per_image) / len(per_image)
    return m_dice, m_iou
