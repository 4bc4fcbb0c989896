"""Image-level segmentation metrics and the paired Wilcoxon signed-rank test."""
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import stats as _sps

from . import kernels
from .errors import ShapeError

EXACT_MAX_N = 15
MIN_NONZERO = 5
ALPHA = 0.05


@dataclass
class ImageMetrics:
    id: str
    dice: float
    precision: float
    sensitivity: float
    tp: int
    fp: int
    fn: int
    flags: list = field(default_factory=list)

    def to_dict(self):
        return {
            "id": self.id, "dice": self.dice, "precision": self.precision, "sensitivity": self.sensitivity,
            "tp": self.tp, "fp": self.fp, "fn": self.fn, "flags": list(self.flags),
        }


def _ratios(tp, fp, fn):
    flags = []
    if tp + fp + fn == 0:
        return 1.0, 1.0, 1.0, ["empty_pred_and_truth"]
    dice = 2 * tp / (2 * tp + fp + fn)
    if tp + fp == 0:
        precision = 0.0
        flags.append("empty_pred")
    else:
        precision = tp / (tp + fp)
    if tp + fn == 0:
        sensitivity = 1.0
        flags.append("empty_truth")
    else:
        sensitivity = tp / (tp + fn)
    return dice, precision, sensitivity, flags


def image_metrics(pred, truth, sample_id=""):
    """Voxel-level Dice, precision and sensitivity of one binary prediction.

    Conventions: empty prediction and empty truth score 1.0 on all three;
    an empty truth with a non-empty prediction gives dice 0, precision 0
    and sensitivity 1.0.  Both cases are flagged.
    """
    p = np.asarray(getattr(pred, "voxels", pred))
    t = np.asarray(getattr(truth, "voxels", truth))
    if p.shape != t.shape:
        raise ShapeError(f"prediction shape {p.shape} != truth shape {t.shape}")
    for name, a in (("prediction", p), ("truth", t)):
        if not np.all((a == 0) | (a == 1)):
            raise ValueError(f"{name} mask is not binary")
    p = p.astype(bool)
    t = t.astype(bool)
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    dice, precision, sensitivity, flags = _ratios(tp, fp, fn)
    return ImageMetrics(sample_id, dice, precision, sensitivity, tp, fp, fn, flags)


def pooled_metrics(metrics):
    """Metrics from voxel counts summed over images."""
    tp = sum(m.tp for m in metrics)
    fp = sum(m.fp for m in metrics)
    fn = sum(m.fn for m in metrics)
    dice, precision, sensitivity, _ = _ratios(tp, fp, fn)
    return {"dice": dice, "precision": precision, "sensitivity": sensitivity, "tp": tp, "fp": fp, "fn": fn}


@dataclass
class WilcoxonResult:
    statistic: float
    p_value: float
    n: int
    method: str  # "exact", "normal" or "inconclusive"

    @property
    def inconclusive(self):
        return self.method == "inconclusive"

    def __iter__(self):
        yield self.statistic
        yield self.p_value


def wilcoxon_signed_rank(a, b):
    """Paired two-sided signed-rank test of ``a`` against ``b``.

    Zero differences are dropped and tied magnitudes get midranks.  The
    statistic is min(W+, W-).  Up to 15 non-zero pairs the p-value is exact
    (enumeration of all sign patterns); above that the normal approximation
    with tie and continuity corrections is used.  Fewer than 5 non-zero
    pairs give an inconclusive result with ``p_value = nan``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError(f"paired samples need equal 1-D lengths, got {a.shape} and {b.shape}")
    d = a - b
    d = d[d != 0]
    n = int(d.size)
    if n < MIN_NONZERO:
        return WilcoxonResult(float("nan"), float("nan"), n, "inconclusive")
    ranks = _sps.rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    w = min(w_plus, w_minus)
    if n <= EXACT_MAX_N:
        ranks2 = np.rint(2 * ranks).astype(np.int64)
        count = kernels.count_extreme_signs(ranks2, int(round(2 * w)))
        return WilcoxonResult(w, min(1.0, count / 2.0 ** n), n, "exact")
    mean = n * (n + 1) / 4.0
    _, counts = np.unique(np.abs(d), return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float((counts ** 3 - counts).sum()) / 48.0
    if var <= 0:
        return WilcoxonResult(w, 1.0, n, "normal")
    z = (abs(w - mean) - 0.5) / math.sqrt(var)
    z = max(z, 0.0)
    p = 2.0 * _sps.norm.sf(z)
    return WilcoxonResult(w, float(min(1.0, p)), n, "normal")


def significance(p_value, alpha=ALPHA):
    if p_value is None or (isinstance(p_value, float) and math.isnan(p_value)):
        return False
    if not 0.0 <= p_value <= 1.0:
        raise ValueError(f"p-value outside [0, 1]: {p_value}")
    return p_value < alpha
