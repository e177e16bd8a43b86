"""Depth error/accuracy metrics with per-frame median scaling."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

METRIC_NAMES = ("abs_rel", "sq_rel", "rmse", "rmse_log", "delta1", "delta2", "delta3")


class MetricsError(ValueError):
    """Metric inputs violate their contract (empty mask, non-positive depth)."""


@dataclass
class DepthMetrics:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    delta1: float
    delta2: float
    delta3: float
    scale_applied: float = 1.0

    def as_tuple(self) -> tuple:
        return tuple(getattr(self, k) for k in METRIC_NAMES)

    def to_dict(self) -> dict:
        return asdict(self)


def _valid_mask(gt: np.ndarray, valid) -> np.ndarray:
    if valid is None:
        return np.ones(gt.shape, dtype=bool)
    valid = np.asarray(valid, dtype=bool)
    if valid.shape != gt.shape:
        raise MetricsError(f"mask shape {valid.shape} does not match depth shape {gt.shape}")
    return valid


def median_scale(pred, gt, valid=None, enabled: bool = True):
    """Rescale ``pred`` so its median over ``valid`` matches that of ``gt``.

    Returns ``(scaled_pred, scale)``; with ``enabled=False`` the scale is 1.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise MetricsError(f"prediction shape {pred.shape} does not match ground truth {gt.shape}")
    m = _valid_mask(gt, valid)
    if not m.any():
        raise MetricsError("no valid pixels")
    if not enabled:
        return pred.copy(), 1.0
    scale = float(np.median(gt[m]) / np.median(pred[m]))
    return pred * scale, scale


def compute_metrics(
    pred,
    gt,
    valid=None,
    scale_first: bool = True,
    strict: bool = True,
    depth_range: tuple | None = None,
) -> DepthMetrics:
    """Standard depth metrics over ``valid`` pixels.

    ``strict`` selects ``<`` (default) or ``<=`` for the threshold
    accuracies; ``depth_range = (lo, hi)`` clamps the (scaled) prediction.
    """
    gt = np.asarray(gt, dtype=np.float64)
    m = _valid_mask(gt, valid)
    if not m.any():
        raise MetricsError("no valid pixels")
    if np.any(gt[m] <= 0) or not np.all(np.isfinite(gt[m])):
        raise MetricsError("ground truth must be positive and finite on valid pixels")
    pred, scale = median_scale(pred, gt, m, enabled=scale_first)
    p, g = pred[m], gt[m]
    if depth_range is not None:
        p = np.clip(p, *depth_range)
    if np.any(p <= 0) or not np.all(np.isfinite(p)):
        raise MetricsError("prediction must be positive and finite on valid pixels")

    ratio = np.maximum(p / g, g / p)
    if strict:
        deltas = [float(np.mean(ratio < 1.25**k)) for k in (1, 2, 3)]
    else:
        deltas = [float(np.mean(ratio <= 1.25**k)) for k in (1, 2, 3)]
    diff = p - g
    return DepthMetrics(
        abs_rel=float(np.mean(np.abs(diff) / g)),
        sq_rel=float(np.mean(diff**2 / g)),
        rmse=float(np.sqrt(np.mean(diff**2))),
        rmse_log=float(np.sqrt(np.mean((np.log(p) - np.log(g)) ** 2))),
        delta1=deltas[0],
        delta2=deltas[1],
        delta3=deltas[2],
        scale_applied=scale,
    )


def mean_metrics(items) -> dict:
    """Per-frame average of a sequence of :class:`DepthMetrics`."""
    items = list(items)
    if not items:
        raise MetricsError("no frames to aggregate")
    keys = METRIC_NAMES + ("scale_applied",)
    return {k: float(np.mean([getattr(m, k) for m in items])) for k in keys}
