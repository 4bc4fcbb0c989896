"""Soft Dice segmentation loss and the bottleneck consistency loss.

The consistency term multiplies a normalised latent distance by a label
similarity weight.  Labels are targets (expert masks or frozen pseudo
labels), so the similarity weight carries no gradient; only the latent
distance is differentiated.
"""
import enum
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .errors import ShapeError

DICE_SMOOTH = 1.0
DIST_EPS = 1e-8


class PairKind(str, enum.Enum):
    AUG_SAME = "aug_same"
    CROSS_IMAGE = "cross_image"


class PairItem(NamedTuple):
    x_i: np.ndarray
    y_i: np.ndarray
    x_j: np.ndarray
    y_j: np.ndarray
    kind: PairKind
    spec_i: object = None
    spec_j: object = None


@dataclass
class LossReport:
    seg_i: float
    seg_j: float
    reg: Optional[float]
    total: float
    alpha: float


def _same_shape(a, b, what):
    if np.shape(a) != np.shape(b):
        raise ShapeError(f"{what}: shapes {np.shape(a)} and {np.shape(b)} differ")


def dice_loss(pred, y, smooth=DICE_SMOOTH):
    _same_shape(pred, y, "dice_loss")
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(y, dtype=np.float64)
    inter = float((p * t).sum())
    denom = float(p.sum() + t.sum())
    return 1.0 - (2.0 * inter + smooth) / (denom + smooth)


def dice_loss_grad(pred, y, smooth=DICE_SMOOTH):
    """Loss value and its gradient w.r.t. ``pred``."""
    _same_shape(pred, y, "dice_loss")
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(y, dtype=np.float64)
    num = 2.0 * float((p * t).sum()) + smooth
    den = float(p.sum() + t.sum()) + smooth
    grad = -(2.0 * t * den - num) / (den * den)
    return 1.0 - num / den, grad


def similarity(y_i, y_j):
    """exp(-mse) between two label maps, mse averaged over voxels."""
    _same_shape(y_i, y_j, "similarity")
    d = np.asarray(y_i, dtype=np.float64) - np.asarray(y_j, dtype=np.float64)
    return float(np.exp(-np.mean(d * d)))


def feature_distance(h_i, h_j, eps=DIST_EPS):
    _same_shape(h_i, h_j, "feature_distance")
    a = np.asarray(h_i, dtype=np.float64)
    b = np.asarray(h_j, dtype=np.float64)
    d = a - b
    return float(2.0 * np.dot(d, d) / (np.dot(a, a) + np.dot(b, b) + eps))


def feature_distance_grad(h_i, h_j, eps=DIST_EPS):
    """Distance and its gradients w.r.t. ``h_i`` and ``h_j``."""
    _same_shape(h_i, h_j, "feature_distance")
    a = np.asarray(h_i, dtype=np.float64)
    b = np.asarray(h_j, dtype=np.float64)
    d = a - b
    nd = float(np.dot(d, d))
    den = float(np.dot(a, a) + np.dot(b, b)) + eps
    val = 2.0 * nd / den
    ga = 4.0 * d / den - 4.0 * nd * a / (den * den)
    gb = -4.0 * d / den - 4.0 * nd * b / (den * den)
    return val, ga, gb


def consistency_loss(h_i, h_j, y_i, y_j):
    return feature_distance(h_i, h_j) * similarity(y_i, y_j)


def consistency_loss_grad(h_i, h_j, y_i, y_j):
    w = similarity(y_i, y_j)
    val, ga, gb = feature_distance_grad(h_i, h_j)
    return val * w, ga * w, gb * w


def total_loss(model, pair, alpha):
    """Loss report for one pair (forward only)."""
    reports, _ = pair_batch_loss(model, [pair], alpha, with_grad=False)
    return reports[0]


def _stack(model, arrays):
    x = np.stack([np.asarray(a, dtype=model.dtype) for a in arrays])
    return x[:, None] if x.ndim == model.config.dims + 1 else x


def pair_batch_loss(model, pairs, alpha, with_grad=True):
    """Per-pair reports and parameter gradients of the mean pair loss.

    All 2B patches of the batch go through one forward pass (the ``x_i``
    block first, then ``x_j``); gradients are reduced in pair order.
    """
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    if not pairs:
        raise ValueError("empty pair batch")
    nb = len(pairs)
    x = _stack(model, [p.x_i for p in pairs] + [p.x_j for p in pairs])
    probs, latent, cache = model.forward(x)
    dprobs = np.zeros(probs.shape, dtype=np.float64)
    dlat = np.zeros(latent.shape, dtype=np.float64)
    reports = []
    for k, p in enumerate(pairs):
        si, gi = dice_loss_grad(probs[k], p.y_i)
        sj, gj = dice_loss_grad(probs[nb + k], p.y_j)
        reg, ha, hb = consistency_loss_grad(latent[k], latent[nb + k], p.y_i, p.y_j)
        reports.append(LossReport(si, sj, reg, si + sj + alpha * reg, float(alpha)))
        dprobs[k] = gi / nb
        dprobs[nb + k] = gj / nb
        dlat[k] = alpha * ha / nb
        dlat[nb + k] = alpha * hb / nb
    if not with_grad:
        return reports, None
    return reports, model.backward(cache, dprobs, dlat)


def single_batch_loss(model, items, with_grad=True):
    """Mean Dice loss over (x, y) items, no consistency term."""
    if not items:
        raise ValueError("empty batch")
    x = _stack(model, [it[0] for it in items])
    probs, _, cache = model.forward(x)
    dprobs = np.zeros(probs.shape, dtype=np.float64)
    losses = []
    for k, (_, y) in enumerate(items):
        v, g = dice_loss_grad(probs[k], y)
        losses.append(v)
        dprobs[k] = g / len(items)
    if not with_grad:
        return losses, None
    return losses, model.backward(cache, dprobs, None)
