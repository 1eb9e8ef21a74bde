"""
Training losses and evaluation metrics.

Losses return ``(value, dL/dpred)``; gradients match the prediction's shape
and dtype. Metrics operate on boolean masks.
"""

from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from fedseg.errors import ConfigError, ShapeMismatchError

PRED_CLAMP = 1.0e-7
DICE_SMOOTH = 1.0
LIMIT_Z = 1.96

STRUCTURES = ('eem', 'lumen', 'plaque')


def _check_pair(pred: np.ndarray, target: np.ndarray) -> None:
    if np.shape(pred) != np.shape(target):
        raise ShapeMismatchError(f"prediction {np.shape(pred)} and target {np.shape(target)} differ")


def bce_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """
    Mean binary cross-entropy with predictions clamped to [1e-7, 1 - 1e-7].

    The gradient is zero wherever the clamp was active.
    """
    _check_pair(pred, target)
    p = np.asarray(pred, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    pc = np.clip(p, PRED_CLAMP, 1.0 - PRED_CLAMP)
    loss = -np.mean(y * np.log(pc) + (1.0 - y) * np.log1p(-pc))
    grad = (pc - y) / (pc * (1.0 - pc)) / p.size
    grad[(p < PRED_CLAMP) | (p > 1.0 - PRED_CLAMP)] = 0.0
    return float(loss), grad.astype(np.asarray(pred).dtype)


def _as_samples(array: np.ndarray) -> np.ndarray:
    array = np.asarray(array, dtype=np.float64)
    if array.ndim == 4:
        return array.reshape(array.shape[0], -1)
    return array.reshape(1, -1)


def dsc_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """
    Soft Dice loss ``1 - (2*I + s) / (P + Y + s)`` with s = 1.

    N x C x H x W inputs are scored per sample and averaged over the batch;
    anything else counts as one sample.
    """
    _check_pair(pred, target)
    p = _as_samples(pred)
    y = _as_samples(target)
    n = p.shape[0]
    inter = np.sum(p * y, axis=1, keepdims=True)
    denom = np.sum(p, axis=1, keepdims=True) + np.sum(y, axis=1, keepdims=True) + DICE_SMOOTH
    numer = 2.0 * inter + DICE_SMOOTH
    loss = float(np.mean(1.0 - numer / denom))
    grad = -(2.0 * y * denom - numer) / (denom * denom) / n
    return loss, grad.reshape(np.shape(pred)).astype(np.asarray(pred).dtype)


def hybrid_loss(pred: np.ndarray, target: np.ndarray, omega: float = 0.5) -> tuple[float, np.ndarray]:
    """
    ``omega * BCE + (1 - omega) * soft Dice``.

    Raises:
        ConfigError: omega outside [0, 1]
    """
    if not 0.0 <= omega <= 1.0:
        raise ConfigError(f"omega must lie in [0, 1], got {omega}")
    if omega == 1.0:
        return bce_loss(pred, target)
    if omega == 0.0:
        return dsc_loss(pred, target)
    bce, bce_grad = bce_loss(pred, target)
    dice, dice_grad = dsc_loss(pred, target)
    return omega * bce + (1.0 - omega) * dice, omega * bce_grad + (1.0 - omega) * dice_grad


def overlap_counts(pred: np.ndarray, truth: np.ndarray) -> tuple[int, int, int]:
    """True positives, false positives and false negatives of two masks."""
    _check_pair(pred, truth)
    a = np.asarray(pred, dtype=bool)
    b = np.asarray(truth, dtype=bool)
    tp = int(np.count_nonzero(a & b))
    return tp, int(np.count_nonzero(a)) - tp, int(np.count_nonzero(b)) - tp


def scores_from_counts(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    """(dsc, recall, precision); each is 1.0 when its denominator is zero."""
    dsc_den = 2 * tp + fp + fn
    dice = 2.0 * tp / dsc_den if dsc_den else 1.0
    recall = tp / (tp + fn) if tp + fn else 1.0
    precision = tp / (tp + fp) if tp + fp else 1.0
    return dice, recall, precision


def dsc(a: np.ndarray, b: np.ndarray) -> float:
    """Dice similarity of two masks; two empty masks score 1."""
    return scores_from_counts(*overlap_counts(a, b))[0]


def recall_precision(pred: np.ndarray, truth: np.ndarray) -> tuple[float, float]:
    _, recall, precision = scores_from_counts(*overlap_counts(pred, truth))
    return recall, precision


@dataclass
class MetricsRecord:
    """One row of metrics.csv: a structure of one evaluated case."""

    case_id: str
    structure: str
    dsc: Optional[float] = None
    recall: Optional[float] = None
    precision: Optional[float] = None
    area_mm2: float = 0.0
    volume_mm3: Optional[float] = None
    burden_index: float = 0.0
    area_px: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class BlandAltmanResult:
    """Agreement between manual and automatic measurements of one indicator."""

    mean_diff: float
    sd_diff: float
    lower_limit: float
    upper_limit: float
    fraction_within: float
    points: list[tuple[float, float]] = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.points)

    def to_dict(self) -> dict:
        data = asdict(self)
        data['points'] = [list(point) for point in self.points]
        return data

    @classmethod
    def from_dict(cls, data: dict) -> 'BlandAltmanResult':
        values = dict(data)
        values['points'] = [tuple(point) for point in values.get('points', [])]
        return cls(**values)


def bland_altman(manual: Sequence[float], auto: Sequence[float]) -> BlandAltmanResult:
    """
    Bland-Altman agreement of paired measurements.

    Differences are ``auto - manual``; the limits of agreement sit at
    ``mean +/- 1.96 * sd`` with the sample standard deviation.

    Raises:
        ShapeMismatchError: Lengths differ
        ConfigError: Fewer than two pairs
    """
    m = np.asarray(manual, dtype=np.float64)
    a = np.asarray(auto, dtype=np.float64)
    if m.shape != a.shape or m.ndim != 1:
        raise ShapeMismatchError(f"manual {m.shape} and auto {a.shape} must be equal-length vectors")
    if m.size < 2:
        raise ConfigError(f"Bland-Altman needs at least two pairs, got {m.size}")
    diffs = a - m
    means = (a + m) / 2.0
    mean_diff = float(np.mean(diffs))
    sd_diff = float(np.std(diffs, ddof=1))
    lower = mean_diff - LIMIT_Z * sd_diff
    upper = mean_diff + LIMIT_Z * sd_diff
    within = float(np.mean((diffs >= lower) & (diffs <= upper)))
    return BlandAltmanResult(
        mean_diff=mean_diff,
        sd_diff=sd_diff,
        lower_limit=lower,
        upper_limit=upper,
        fraction_within=within,
        points=[(float(x), float(y)) for x, y in zip(means, diffs)],
    )
