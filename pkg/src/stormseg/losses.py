"""Imbalance-aware segmentation losses and evaluation metrics.

Every loss is composed from the differentiable graph ops, so gradients come
for free.  Probabilities are clamped to [1e-7, 1 - 1e-7] before any log.
Dice is computed as Tversky at alpha = beta = 0.5, making that identity exact
rather than approximate.  Set-size terms use the soft (probability-weighted)
counts |X ∩ Y| = sum p*y, |X - Y| = sum p*(1-y), |Y - X| = sum (1-p)*y.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DomainError, ParameterError, ShapeError
from .tensor import Tensor, clip, log

CLAMP_EPS = 1e-7
LOSS_KINDS = ("bce", "dice", "tversky", "focal")


@dataclass
class PixelPrediction:
    """Per-pixel probabilities paired with the binary truth mask."""

    p: Tensor
    y: Tensor

    def __post_init__(self):
        if self.p.shape != self.y.shape:
            raise ShapeError(f"probability/truth shapes differ: {self.p.shape} vs {self.y.shape}")
        if self.p.values.dtype != self.y.values.dtype:
            raise ContractError(f"dtype mismatch: {self.p.dtype} vs {self.y.dtype}")
        yv = self.y.values
        if not np.all((yv == 0) | (yv == 1)):
            raise DomainError("truth labels must be exactly 0 or 1")
        pv = self.p.values
        if pv.size and (pv.min() < 0 or pv.max() > 1):
            raise DomainError("probabilities must lie in [0, 1]")


@dataclass
class LossSpec:
    """Which loss to optimize and its shape parameters."""

    kind: str = "bce"
    alpha: float = 0.3
    beta: float = 0.7
    gamma: float = 2.0
    smooth_eps: float = 1e-6

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ParameterError(f"loss kind must be one of {LOSS_KINDS}, got {self.kind!r}")
        if self.alpha < 0 or self.beta < 0:
            raise ParameterError("alpha and beta must be >= 0")
        if self.gamma < 0:
            raise ParameterError(f"gamma must be >= 0, got {self.gamma}")
        if not self.smooth_eps > 0:
            raise ParameterError(f"smooth_eps must be positive, got {self.smooth_eps}")


@dataclass
class MetricsReport:
    """Aggregate segmentation quality over one dataset pass.

    The soft coefficients pool probability-weighted counts over all pixels of
    the dataset; ``dice_binary``/``tversky_binary`` are the hard-count
    variants, present only when requested.
    """

    accuracy: float
    dice_coefficient: float
    tversky_coefficient: float
    loss_value: float
    dice_binary: float | None = None
    tversky_binary: float | None = None


def _clamped(pred: PixelPrediction) -> Tensor:
    return clip(pred.p, CLAMP_EPS, 1.0 - CLAMP_EPS)


def bce_loss(pred: PixelPrediction) -> Tensor:
    """Mean binary cross-entropy: -log p at y=1 pixels, -log(1-p) at y=0."""
    pc = _clamped(pred)
    y = pred.y
    return -((y * log(pc) + (1.0 - y) * log(1.0 - pc)).mean())


def focal_loss(pred: PixelPrediction, gamma: float = 2.0) -> Tensor:
    """Mean of -(1 - p_t)^gamma * log(p_t); reduces to bce_loss at gamma=0."""
    if gamma < 0:
        raise ParameterError(f"gamma must be >= 0, got {gamma}")
    pc = _clamped(pred)
    y = pred.y
    p_t = y * pc + (1.0 - y) * (1.0 - pc)
    return -(((1.0 - p_t) ** float(gamma) * log(p_t)).mean())


def tversky_coefficient(pred: PixelPrediction, alpha: float = 0.3, beta: float = 0.7,
                        smooth_eps: float = 1e-6) -> Tensor:
    """TC = |X n Y| / (|X n Y| + alpha|X - Y| + beta|Y - X|) with soft counts.

    smooth_eps joins numerator and denominator, so two empty masks score 1.0.
    """
    if alpha < 0 or beta < 0:
        raise ParameterError("alpha and beta must be >= 0")
    if not smooth_eps > 0:
        raise ParameterError(f"smooth_eps must be positive, got {smooth_eps}")
    p, y = pred.p, pred.y
    inter = (p * y).sum()
    fp = (p * (1.0 - y)).sum()
    fn = ((1.0 - p) * y).sum()
    return (inter + smooth_eps) / (inter + alpha * fp + beta * fn + smooth_eps)


def tversky_loss(pred: PixelPrediction, alpha: float = 0.3, beta: float = 0.7,
                 smooth_eps: float = 1e-6) -> Tensor:
    return 1.0 - tversky_coefficient(pred, alpha, beta, smooth_eps)


def dice_coefficient(pred: PixelPrediction, smooth_eps: float = 1e-6) -> Tensor:
    """DC = 2|X n Y| / (|X| + |Y|), evaluated as Tversky at alpha = beta = 0.5."""
    return tversky_coefficient(pred, 0.5, 0.5, smooth_eps)


def dice_loss(pred: PixelPrediction, smooth_eps: float = 1e-6) -> Tensor:
    return 1.0 - dice_coefficient(pred, smooth_eps)


def segmentation_loss(pred: PixelPrediction, spec: LossSpec) -> Tensor:
    """Dispatch to the loss selected by spec.kind."""
    if spec.kind == "bce":
        return bce_loss(pred)
    if spec.kind == "dice":
        return dice_loss(pred, spec.smooth_eps)
    if spec.kind == "tversky":
        return tversky_loss(pred, spec.alpha, spec.beta, spec.smooth_eps)
    return focal_loss(pred, spec.gamma)


def pixel_accuracy(pred: PixelPrediction, threshold: float = 0.5) -> float:
    """Fraction of pixels whose thresholded probability equals the label.

    p >= threshold classifies as positive (ties go to the storm class).
    """
    hard = (pred.p.values >= threshold).astype(pred.y.values.dtype)
    return float((hard == pred.y.values).mean())


def _counts(p: np.ndarray, y: np.ndarray) -> tuple[float, float, float]:
    inter = float((p * y).sum())
    fp = float((p * (1.0 - y)).sum())
    fn = float(((1.0 - p) * y).sum())
    return inter, fp, fn


def _pooled_tversky(inter, fp, fn, alpha, beta, eps):
    return float((inter + eps) / (inter + alpha * fp + beta * fn + eps))


def evaluate(predict, batches, spec: LossSpec, threshold: float = 0.5,
             binarized: bool = False) -> MetricsReport:
    """Aggregate metrics over an iterable of (input, truth-mask) array batches.

    predict maps an NCHW input array to per-pixel probabilities (Tensor or
    array of shape N x 1 x H x W).  Counts pool over every pixel of the
    dataset, so the coefficients describe the dataset as a whole; bce/focal
    losses average per pixel, dice/tversky losses derive from the pooled
    coefficient.
    """
    tv_a, tv_b = spec.alpha, spec.beta
    eps = spec.smooth_eps
    total_px = 0
    correct = 0.0
    soft = np.zeros(3)
    hard = np.zeros(3)
    loss_weighted = 0.0
    for x, y in batches:
        out = predict(x)
        p = out.values if isinstance(out, Tensor) else np.asarray(out)
        y = np.asarray(y, dtype=p.dtype)
        if p.shape != y.shape:
            raise ShapeError(f"prediction shape {p.shape} != mask shape {y.shape}")
        total_px += p.size
        correct += float(((p >= threshold) == (y == 1)).sum())
        soft += _counts(p, y)
        if binarized:
            hard += _counts((p >= threshold).astype(p.dtype), y)
        if spec.kind in ("bce", "focal"):
            pred = PixelPrediction(Tensor(p), Tensor(y))
            loss_weighted += segmentation_loss(pred, spec).item() * p.size
    if total_px == 0:
        raise ContractError("evaluate needs a non-empty dataset")
    dc = _pooled_tversky(*soft, 0.5, 0.5, eps)
    tc = _pooled_tversky(*soft, tv_a, tv_b, eps)
    if spec.kind == "dice":
        loss = 1.0 - dc
    elif spec.kind == "tversky":
        loss = 1.0 - tc
    else:
        loss = loss_weighted / total_px
    return MetricsReport(
        accuracy=correct / total_px,
        dice_coefficient=dc,
        tversky_coefficient=tc,
        loss_value=loss,
        dice_binary=_pooled_tversky(*hard, 0.5, 0.5, eps) if binarized else None,
        tversky_binary=_pooled_tversky(*hard, tv_a, tv_b, eps) if binarized else None,
    )
