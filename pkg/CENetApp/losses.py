"""
Training losses: weighted soft dice, cross-entropy and the regularized total.
"""

import logging
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from .autograd import Variable, _lift, add, div, log, mul, reduce, square, sub, sum_all
from .exceptions import ContractError, DimensionError
from .params import CONV_WEIGHT, ParamStore

logger = logging.getLogger(__name__)

DICE_EPS = 1e-6
WEIGHT_DECAY = 1e-4
IGNORE_LABEL = 255


def one_hot(labels: np.ndarray, num_classes: int, ignore_label: int = IGNORE_LABEL,
            dtype=np.float32) -> Tuple[np.ndarray, np.ndarray]:
    """
    Encode [N, H, W] class indices as [N, K, H, W] targets plus a [N, 1, H, W]
    validity mask (0 where the label is `ignore_label`). With K == 1 the single
    channel is the foreground indicator (label 1).
    """
    labels = np.asarray(labels)
    if labels.ndim != 3:
        raise DimensionError(f"labels must be [N, H, W], got {list(labels.shape)}")
    valid = labels != ignore_label
    n_labels = 2 if num_classes == 1 else num_classes
    bad = valid & ((labels < 0) | (labels >= n_labels))
    if bad.any():
        raise ContractError(f"label values {np.unique(labels[bad]).tolist()} are outside [0, {n_labels})")

    if num_classes == 1:
        target = (labels == 1)[:, None]
    else:
        target = labels[:, None] == np.arange(num_classes)[None, :, None, None]
    target = target & valid[:, None]
    return target.astype(dtype), valid[:, None].astype(dtype)


def class_weights(num_classes: int, weights: Optional[Sequence[float]] = None) -> np.ndarray:
    if weights is None:
        return np.full(num_classes, 1.0 / num_classes)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (num_classes,):
        raise ContractError(f"expected {num_classes} class weights, got {w.shape}")
    if (w < 0).any() or abs(w.sum() - 1.0) > 1e-6:
        raise ContractError(f"class weights must be nonnegative and sum to 1, got sum {w.sum():.8f}")
    return w


def dice_loss(p, g: np.ndarray, weights: Optional[Sequence[float]] = None, eps: float = DICE_EPS,
              valid: Optional[np.ndarray] = None) -> Variable:
    """
    L = 1 - sum_k 2 w_k (sum_i p*g + eps) / (sum_i p^2 + sum_i g^2 + eps),
    sums running over batch and pixels per class k.

    Args:
        p: probabilities [N, K, H, W], Variable or array
        g: one-hot targets, same shape
        weights: class weights summing to 1, default 1/K
        valid: optional [N, 1, H, W] mask; masked pixels are dropped from every sum
    """
    p = _lift(p)
    g = np.asarray(g, dtype=p.dtype)
    if p.shape != g.shape:
        raise DimensionError(f"dice_loss shapes differ: {list(p.shape)} vs {list(g.shape)}")
    w = class_weights(p.shape[1], weights)
    if valid is not None:
        p = mul(p, np.asarray(valid, dtype=p.dtype))
        g = g * valid

    axes = (0, 2, 3)
    intersection = reduce("sum", mul(p, g), axes)
    p_sq = reduce("sum", square(p), axes)
    g_sq = (g * g).sum(axis=axes)
    ratio = div(add(intersection, eps), add(add(p_sq, g_sq), eps))
    overlap = sum_all(mul(ratio, (2.0 * w).astype(p.dtype)))
    return sub(1.0, overlap)


def cross_entropy_loss(p, g: np.ndarray, valid: Optional[np.ndarray] = None) -> Variable:
    """
    Mean over pixels of -sum_k g_k log(clamp(p_k)). A single channel is treated
    as binary: -(g log p + (1 - g) log(1 - p)).
    """
    p = _lift(p)
    g = np.asarray(g, dtype=p.dtype)
    if p.shape != g.shape:
        raise DimensionError(f"cross_entropy_loss shapes differ: {list(p.shape)} vs {list(g.shape)}")
    n, k, h, w = p.shape
    if k == 1:
        terms = add(mul(log(p), g), mul(log(sub(1.0, p)), 1.0 - g))
    else:
        terms = mul(log(p), g)
    if valid is not None:
        valid = np.asarray(valid, dtype=p.dtype)
        terms = mul(terms, valid)
        count = max(float(valid.sum()), 1.0)
    else:
        count = float(n * h * w)
    return mul(sum_all(terms), -1.0 / count)


def regularization(store: ParamStore, lam: float = WEIGHT_DECAY) -> float:
    """(lam / 2) * sum of squared convolution and transposed-convolution weights."""
    if lam < 0:
        raise ContractError(f"regularization weight must be nonnegative, got {lam}")
    total = sum(float(np.sum(np.square(store[n], dtype=np.float64))) for n in store.names((CONV_WEIGHT,)))
    return 0.5 * lam * total


def total_loss(data_loss, store: ParamStore, lam: float = WEIGHT_DECAY) -> Dict[str, Variable]:
    """
    loss = data loss + reg. `reg` is reported for monitoring only: the same
    decay is applied by the optimizer step, so it carries no gradient here.
    """
    data_loss = _lift(data_loss)
    reg = np.asarray(regularization(store, lam), dtype=data_loss.dtype)
    return {"loss": add(data_loss, reg), "reg": Variable(reg)}


def segmentation_loss(kind: str, p, labels: np.ndarray, num_classes: int,
                      ignore_label: int = IGNORE_LABEL) -> Variable:
    target, valid = one_hot(labels, num_classes, ignore_label, dtype=_lift(p).dtype)
    if kind == "dice":
        return dice_loss(p, target, valid=valid)
    if kind == "ce":
        return cross_entropy_loss(p, target, valid=valid)
    raise ContractError(f"unknown loss {kind!r}; expected 'dice' or 'ce'")
