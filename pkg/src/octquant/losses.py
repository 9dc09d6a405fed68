"""Forward-only reference implementations of the segmentation training losses.

Inputs are per-class planes with the class axis first: ``y`` is a one-hot
(or binary) ground truth and ``yhat`` a prediction in [0, 1] of the same
shape.  Nothing here computes gradients; the functions exist so the loss
definitions can be executed and checked.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage

from .core import LABELS, N_CLASSES, LabelMask
from .errors import ShapeMismatch, ValidationError

EPSILON = 1e-6
PROB_CLAMP = (1e-7, 1.0 - 1e-7)

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T.copy()


def default_class_weights() -> np.ndarray:
    """0.1 for Vitreous and Choroid, 0.5 for the bounded layers, 1.0 for Fluid and HRF."""
    w = []
    for c in LABELS:
        if c.is_pathology:
            w.append(1.0)
        elif not c.bounded:
            w.append(0.1)
        else:
            w.append(0.5)
    return np.array(w)


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    epsilon: float = EPSILON
    class_weights: Optional[tuple] = field(default_factory=lambda: tuple(default_class_weights()))

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValidationError("loss weights must be non-negative")
        if not self.epsilon > 0:
            raise ValidationError("epsilon must be positive")
        if self.class_weights is not None and min(self.class_weights) < 0:
            raise ValidationError("class weights must be non-negative")


def one_hot(mask, n_classes: int = N_CLASSES) -> np.ndarray:
    """``(C, *shape)`` float64 one-hot planes from a label mask or integer array."""
    labels = mask.labels if isinstance(mask, LabelMask) else np.asarray(mask)
    return (np.arange(n_classes).reshape((-1,) + (1,) * labels.ndim) == labels[None]).astype(np.float64)


def _pair(y, yhat):
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    if y.shape != yhat.shape:
        raise ShapeMismatch(f"y {y.shape} and yhat {yhat.shape} differ")
    if y.ndim < 1:
        raise ShapeMismatch("inputs need a class axis")
    return y, yhat


def dice_loss(y, yhat, epsilon: float = EPSILON) -> float:
    """Soft Dice loss, unweighted mean over classes (axis 0).

    Classes empty in both ``y`` and ``yhat`` carry no information and are
    left out of the mean; if every class is empty the loss is 0.
    """
    y, yhat = _pair(y, yhat)
    per_class = []
    for yc, pc in zip(y, yhat):
        yc, pc = yc.ravel(), pc.ravel()
        denom = float(yc @ yc) + float(pc @ pc)
        if denom == 0.0:
            continue
        per_class.append(1.0 - 2.0 * float(yc @ pc) / (denom + epsilon))
    return math.fsum(per_class) / len(per_class) if per_class else 0.0


def ce_loss(y, yhat, class_weights=None) -> float:
    """Class-weighted binary cross-entropy averaged over all ``C * N`` entries.

    ``yhat`` is clamped to [1e-7, 1 - 1e-7].  With unit weights this is the
    plain per-pixel mean; each class's term scales linearly with its weight.
    """
    y, yhat = _pair(y, yhat)
    p = np.clip(yhat, *PROB_CLAMP)
    term = -(y * np.log(p) + (1.0 - y) * np.log1p(-p))
    n_c = y.shape[0]
    if class_weights is None:
        w = np.ones(n_c)
    else:
        w = np.asarray(class_weights, dtype=np.float64)
        if w.shape != (n_c,):
            raise ShapeMismatch(f"{w.size} class weights for {n_c} classes")
    per_class = term.reshape(n_c, -1).sum(axis=1)
    return math.fsum(w * per_class) / term.size


def sobel_magnitude(planes) -> np.ndarray:
    """Sobel gradient magnitude over the last two axes (zero-padded convolution)."""
    planes = np.asarray(planes, dtype=np.float64)
    if planes.ndim < 2:
        raise ShapeMismatch("Sobel needs at least 2-D input")
    shape = (1,) * (planes.ndim - 2) + (3, 3)
    gx = ndimage.convolve(planes, SOBEL_X.reshape(shape), mode="constant", cval=0.0)
    gy = ndimage.convolve(planes, SOBEL_Y.reshape(shape), mode="constant", cval=0.0)
    return np.hypot(gx, gy)


def texture_loss(y, yhat) -> float:
    """Mean absolute difference of Sobel gradient magnitudes."""
    y, yhat = _pair(y, yhat)
    diff = np.abs(sobel_magnitude(y) - sobel_magnitude(yhat))
    return math.fsum(diff.ravel()) / diff.size


def total_loss(y, yhat, cfg: LossConfig = LossConfig()) -> dict:
    """All three components and their weighted sum."""
    d = dice_loss(y, yhat, cfg.epsilon)
    c = ce_loss(y, yhat, cfg.class_weights)
    t = texture_loss(y, yhat)
    return {"dice": d, "ce": c, "texture": t, "total": cfg.alpha * d + cfg.beta * c + cfg.gamma * t}
