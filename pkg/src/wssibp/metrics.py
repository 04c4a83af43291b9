"""Ranking metrics: AP@t for attribute lists, PR-curve average precision,
and mean average recall over a precision grid.

Score ties are broken by item index (stable sort), so every metric is a
pure function of the ranking and invariant to increasing score transforms.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from .data import ValidationError
from .tasks import rank_descending

DEFAULT_GRID = np.arange(1, 11) / 10.0


@dataclass(frozen=True)
class PRCurve:
    relevant: np.ndarray  # ranked 0/1 flags
    precision: np.ndarray
    recall: np.ndarray

    def __post_init__(self):
        if not (len(self.relevant) == len(self.precision) == len(self.recall)):
            raise ValidationError("PR curve sequences must have equal length")


def pr_curve_from_flags(flags: Sequence) -> PRCurve:
    """Precision and recall after each rank of an already ranked flag list."""
    flags = np.asarray(flags, dtype=np.float64)
    if flags.ndim != 1 or flags.size == 0:
        raise ValidationError("ranking must be a non-empty 1-D sequence")
    hits = np.cumsum(flags)
    ranks = np.arange(1, flags.size + 1)
    total = hits[-1]
    recall = hits / total if total > 0 else np.zeros_like(hits)
    return PRCurve(relevant=flags.astype(np.int8), precision=hits / ranks, recall=recall)


def pr_curve(scores: Sequence[float], truth: Sequence[int]) -> PRCurve:
    scores = np.asarray(scores, dtype=np.float64)
    truth = np.asarray(truth)
    if scores.shape != truth.shape or scores.ndim != 1:
        raise ValidationError("scores and truth must be 1-D and of equal length")
    return pr_curve_from_flags(truth[rank_descending(scores)])


def _average_precision(scores: np.ndarray, truth: np.ndarray) -> float:
    curve = pr_curve(scores, truth)
    rel = curve.relevant == 1
    return float(curve.precision[rel].sum() / rel.sum())


def pr_map(scores, truth) -> float:
    """Average precision of ``scores`` against binary ``truth``.

    1-D inputs give the AP of one ranking. 2-D inputs (items x classes) give
    the mean AP over the columns that have at least one positive.
    """
    scores = np.asarray(scores, dtype=np.float64)
    truth = np.asarray(truth)
    if scores.shape != truth.shape:
        raise ValidationError("scores and truth shapes differ")
    if not np.all((truth == 0) | (truth == 1)):
        raise ValidationError("truth must be binary")
    if scores.ndim == 1:
        if not truth.any():
            raise ValidationError("truth has no positives")
        return _average_precision(scores, truth)
    if scores.ndim != 2:
        raise ValidationError("scores must be 1-D or 2-D")
    cols = [c for c in range(truth.shape[1]) if truth[:, c].any()]
    if not cols:
        raise ValidationError("truth has no positives")
    return float(np.mean([_average_precision(scores[:, c], truth[:, c]) for c in cols]))


def _truth_attributes(truth, obj: int) -> Optional[set]:
    """Attribute set for predicted object ``obj``, or None when it is wrong.

    ``truth`` is either ``(object, attributes)`` or ``{object: attributes}``
    for images with several objects.
    """
    if isinstance(truth, Mapping):
        return set(truth[obj]) if obj in truth else None
    true_obj, attrs = truth
    return set(attrs) if obj == true_obj else None


def image_ap_at_t(prediction, truth, t: int) -> float:
    """AP@t of one ``(object, ranked attributes)`` prediction."""
    obj, ranked = prediction
    attrs = _truth_attributes(truth, obj)
    if not attrs:
        return 0.0
    total, hits = 0.0, 0
    for r, a in enumerate(list(ranked)[:t], start=1):
        if a in attrs:
            hits += 1
            total += hits / r
    return total / min(t, len(attrs))


def ap_at_t(predictions, truth, t: int) -> float:
    """Mean AP@t over images.

    ``predictions`` and ``truth`` are aligned sequences, or mappings keyed by
    image id (every predicted id must have truth). A wrong object scores 0.
    """
    if t < 1:
        raise ValidationError("t must be >= 1")
    if isinstance(predictions, Mapping):
        missing = [i for i in predictions if i not in truth]
        if missing:
            raise ValidationError(f"missing truth for image {missing[0]!r}")
        pairs = [(predictions[i], truth[i]) for i in predictions]
    else:
        if len(predictions) != len(truth):
            raise ValidationError("missing truth: predictions and truth differ in length")
        pairs = list(zip(predictions, truth))
    if not pairs:
        raise ValidationError("no predictions")
    return float(np.mean([image_ap_at_t(p, g, t) for p, g in pairs]))


def average_recall(flags: Sequence, grid: Sequence[float] = DEFAULT_GRID) -> float:
    """Mean over grid levels p of the best recall at any rank with precision >= p."""
    grid = _check_grid(grid)
    curve = pr_curve_from_flags(flags)
    if not curve.relevant.any():
        return 0.0
    best = [curve.recall[curve.precision >= p].max(initial=0.0) for p in grid]
    return float(np.mean(best))


def _check_grid(grid) -> np.ndarray:
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 1 or grid.size == 0 or np.any(grid <= 0) or np.any(grid > 1):
        raise ValidationError("precision grid must be non-empty with values in (0, 1]")
    return grid


def mar(rankings: Sequence[Sequence], grid: Sequence[float] = DEFAULT_GRID) -> float:
    """Mean average recall over queries; each ranking is a list of 0/1 flags.

    A ranking is assumed to cover every candidate, so its flag count is the
    number of relevant items. A query with no relevant item scores 0.
    """
    if len(rankings) == 0:
        raise ValidationError("no rankings")
    return float(np.mean([average_recall(r, grid) for r in rankings]))
