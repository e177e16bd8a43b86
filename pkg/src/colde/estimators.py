"""scikit-learn style wrappers over the functional refinement and fusion core.

Inputs are whole sequences rather than sample matrices, so these follow the
estimator protocol (constructor-only hyperparameters, ``get_params``,
``fit``/``transform``, trailing-underscore results) without claiming
compatibility with sklearn pipelines or cross-validation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .fusion import windowed_depth_average
from .geometry import Intrinsics, PoseSE3
from .objectives import LossWeights
from .refine import RefineConfig, refine_sequence


class SequenceError(ValueError):
    """Sequence inputs disagree in length or shape."""


@dataclass
class DepthSequence:
    """Per-frame images, depths and camera-to-world poses sharing intrinsics."""

    images: list
    depths: list
    poses_world: list
    intrinsics: Intrinsics
    normals: Optional[list] = None
    valid: Optional[list] = field(default=None)

    def __len__(self) -> int:
        return len(self.depths)


def check_sequence(X: DepthSequence, min_frames: int = 1) -> DepthSequence:
    """Validate lengths, shapes and depth positivity; return float64 copies."""
    if not isinstance(X, DepthSequence):
        raise SequenceError(f"expected a DepthSequence, got {type(X).__name__}")
    n = len(X.depths)
    if n < min_frames:
        raise SequenceError(f"need at least {min_frames} frames, got {n}")
    if len(X.poses_world) != n or (X.images is not None and len(X.images) != n):
        raise SequenceError("images, depths and poses must have the same length")
    shape = X.intrinsics.shape
    depths = []
    for k, d in enumerate(X.depths):
        d = np.asarray(d, dtype=np.float64)
        if d.shape != shape:
            raise SequenceError(f"frame {k}: depth shape {d.shape} != intrinsics {shape}")
        if np.any(d <= 0) or not np.all(np.isfinite(d)):
            raise SequenceError(f"frame {k}: depth must be positive and finite")
        depths.append(d)
    images = None
    if X.images is not None:
        images = []
        for k, im in enumerate(X.images):
            im = np.asarray(im, dtype=np.float64)
            if im.shape[-2:] != shape:
                raise SequenceError(f"frame {k}: image shape {im.shape} != intrinsics {shape}")
            images.append(im)
    for k, p in enumerate(X.poses_world):
        if not isinstance(p, PoseSE3):
            raise SequenceError(f"frame {k}: pose must be a PoseSE3")
    for name in ("normals", "valid"):
        extra = getattr(X, name)
        if extra is not None and len(extra) != n:
            raise SequenceError(f"{name} must have one entry per frame")
    return DepthSequence(images, depths, list(X.poses_world), X.intrinsics, X.normals, X.valid)


class DepthRefiner(TransformerMixin, BaseEstimator):
    """Refine a sequence's depths by descending the multi-view objective.

    ``fit`` runs the refinement; ``y`` may carry ground-truth depths, which
    only feed the report metrics. ``transform`` refines a sequence and
    returns its depths without storing anything.

    Attributes:
        depths_: Refined depth maps of the fitted sequence.
        normals_: Refined (or passed-through) normal maps.
        report_: :class:`colde.refine.RefineReport` of the fit.
    """

    def __init__(
        self,
        weights: Optional[LossWeights] = None,
        max_iters: int = 300,
        learning_rate: float = 1e-2,
        normal_learning_rate: float = 5e-2,
        optimize: Sequence[str] = ("depth",),
        convergence_tol: float = 1e-6,
        seed: int = 0,
        fixed_channel: Optional[int] = None,
        sobolev_weight: float = 100.0,
    ):
        self.weights = weights
        self.max_iters = max_iters
        self.learning_rate = learning_rate
        self.normal_learning_rate = normal_learning_rate
        self.optimize = optimize
        self.convergence_tol = convergence_tol
        self.seed = seed
        self.fixed_channel = fixed_channel
        self.sobolev_weight = sobolev_weight

    def _config(self) -> RefineConfig:
        return RefineConfig(
            max_iters=self.max_iters,
            learning_rate=self.learning_rate,
            normal_learning_rate=self.normal_learning_rate,
            optimize=frozenset(self.optimize),
            convergence_tol=self.convergence_tol,
            seed=self.seed,
            fixed_channel=self.fixed_channel,
            sobolev_weight=self.sobolev_weight,
        )

    def _run(self, X: DepthSequence, y=None):
        X = check_sequence(X, min_frames=2)
        if X.images is None:
            raise SequenceError("refinement needs images")
        return refine_sequence(
            X.images, X.depths, X.poses_world, X.intrinsics,
            self.weights or LossWeights(), self._config(),
            normals=X.normals, gt_depths=y, gt_valid=X.valid if y is not None else None,
        )

    def fit(self, X: DepthSequence, y=None):
        result = self._run(X, y)
        self.depths_ = result.depths
        self.normals_ = result.normals
        self.report_ = result.report
        return self

    def transform(self, X: DepthSequence) -> list:
        return self._run(X).depths

    def fit_transform(self, X: DepthSequence, y=None, **fit_params) -> list:
        return self.fit(X, y).depths_


class WindowedDepthAverager(TransformerMixin, BaseEstimator):
    """Average each frame's depth with neighbours reprojected into it."""

    def __init__(self, window: int = 7, max_rel_diff: float = 0.25, edge_ratio: float = 1.1):
        self.window = window
        self.max_rel_diff = max_rel_diff
        self.edge_ratio = edge_ratio

    def fit(self, X: DepthSequence, y=None):
        check_sequence(X, min_frames=self.window)
        return self

    def transform(self, X: DepthSequence) -> list:
        X = check_sequence(X, min_frames=self.window)
        return windowed_depth_average(
            X.depths, X.poses_world, X.intrinsics, self.window, X.valid, self.max_rel_diff, self.edge_ratio
        )
