"""Segmentation losses on logits and mask metrics.

``composite_loss`` is ``(1 - lam) * bce + lam * focal + dice``; ``lam = 0``
is used for single-instance scenes.
"""

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T


class LossValidationError(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    lam: float = 0.25
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    dice_eps: float = 1e-6

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise LossValidationError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.dice_eps <= 0:
            raise LossValidationError("dice_eps must be positive")
        if self.focal_gamma < 0:
            raise LossValidationError("focal_gamma must be >= 0")
        if not 0.0 < self.focal_alpha < 1.0:
            raise LossValidationError("focal_alpha must lie in (0, 1)")


def _targets(logits, targets, check_binary=True):
    y = np.asarray(targets.data if isinstance(targets, T.Tensor) else targets, dtype=np.float64)
    if y.shape != logits.shape:
        raise T.DimensionError(f"logits {logits.shape} and targets {y.shape} differ in shape")
    if check_binary and not np.all((y == 0.0) | (y == 1.0)):
        raise LossValidationError("targets must be 0/1")
    return y


def _neg_log_pt(logits, y):
    # -log p_t = softplus(-s z), s = 2y - 1
    return T.softplus(logits * (-(2.0 * y - 1.0)))


def bce(logits, targets):
    logits = T.as_tensor(logits)
    y = _targets(logits, targets)
    return T.mean(_neg_log_pt(logits, y))


def focal_loss(logits, targets, gamma=2.0, alpha=0.25):
    """mean of -alpha_t (1 - p_t)^gamma log p_t."""
    if gamma < 0:
        raise LossValidationError("gamma must be >= 0")
    logits = T.as_tensor(logits)
    y = _targets(logits, targets)
    s = 2.0 * y - 1.0
    one_minus_pt = T.sigmoid(logits * (-s))
    alpha_t = np.where(y == 1.0, alpha, 1.0 - alpha)
    return T.mean(T.power(one_minus_pt, gamma) * _neg_log_pt(logits, y) * alpha_t)


def dice_loss(logits, targets, eps=1e-6):
    logits = T.as_tensor(logits)
    y = _targets(logits, targets, check_binary=False)
    prob = T.sigmoid(logits)
    inter = T.tsum(prob * y)
    denom = T.tsum(prob) + float(y.sum()) + eps
    return 1.0 - (2.0 * inter + eps) / denom


def composite_loss(logits, targets, cfg=None):
    cfg = cfg or LossConfig()
    logits = T.as_tensor(logits)
    lam = cfg.lam
    return ((1.0 - lam) * bce(logits, targets)
            + lam * focal_loss(logits, targets, cfg.focal_gamma, cfg.focal_alpha)
            + dice_loss(logits, targets, cfg.dice_eps))


# ------------------------------------------------------------------- metrics


@dataclass
class MetricReport:
    """Per-sample and mean DSC / mIoU / F1.

    mIoU is the mean of foreground and background IoU of a binary mask. F1
    on binary masks is the same quantity as DSC.
    """

    dsc: float
    miou: float
    f1: float
    per_sample: list = field(default_factory=list)

    @classmethod
    def aggregate(cls, rows):
        rows = list(rows)
        n = len(rows)
        mean = {k: float(sum(r[k] for r in rows) / n) for k in ("dsc", "miou", "f1")}
        return cls(per_sample=rows, **mean)


def _ratio(num, den):
    # Empty-vs-empty counts as a perfect match.
    return 1.0 if den == 0 else num / den


def mask_scores(pred, target):
    pred = np.asarray(pred).astype(bool)
    target = np.asarray(target).astype(bool)
    if pred.shape != target.shape:
        raise T.DimensionError(f"pred {pred.shape} and target {target.shape} differ in shape")
    tp = int(np.sum(pred & target))
    fp = int(np.sum(pred & ~target))
    fn = int(np.sum(~pred & target))
    tn = pred.size - tp - fp - fn
    dsc = _ratio(2 * tp, 2 * tp + fp + fn)
    fg_iou = _ratio(tp, tp + fp + fn)
    bg_iou = _ratio(tn, tn + fp + fn)
    # F1 = 2PR/(P+R) reduces algebraically to the DSC count formula.
    f1 = _ratio(2 * tp, 2 * tp + fp + fn)
    return {"dsc": dsc, "miou": (fg_iou + bg_iou) / 2.0, "f1": f1,
            "fg_iou": fg_iou, "bg_iou": bg_iou, "tp": tp, "fp": fp, "fn": fn}


def metrics(pred_masks, targets):
    """MetricReport over a batch (first axis) of binary masks."""
    pred_masks = np.asarray(pred_masks)
    targets = np.asarray(targets)
    if pred_masks.ndim == 2:
        pred_masks, targets = pred_masks[None], targets[None]
    return MetricReport.aggregate(mask_scores(p, t) for p, t in zip(pred_masks, targets))


def binarize(logits):
    """sigmoid(z) > 0.5, i.e. z > 0."""
    z = logits.data if isinstance(logits, T.Tensor) else np.asarray(logits)
    return z > 0.0
