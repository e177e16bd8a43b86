"""Variational refinement of depth (and normal) fields under the total loss.

Poses stay fixed. Depth is optimised in log space so it stays positive;
normals move along the tangent plane of the unit sphere and are
renormalised after each step. Every iteration draws one feature channel,
takes a scaled gradient step and backtracks until the loss (with masks
recomputed at the candidate) decreases.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
from scipy.fft import dctn, idctn

from .geometry import DTYPE, Intrinsics, PoseSE3, as_tensor, backproject_map, face_camera, relative_pose
from .metrics import compute_metrics, mean_metrics
from .objectives import (
    N_FEATURES,
    FramePair,
    LossWeights,
    _orthogonality,
    _smoothness,
    combine,
    evaluate_pair,
    feature_extract,
)

logger = logging.getLogger(__name__)

OPTIMIZE_CHOICES = frozenset({"depth", "normals"})


class RefineError(ValueError):
    """Refinement inputs violate the contract (too few frames, bad config)."""


@dataclass
class RefineConfig:
    """Knobs of the descent loop.

    ``learning_rate`` is the RMS per-pixel step in log-depth of the first
    trial of each iteration; ``normal_learning_rate`` is the same for
    normals (radians, to first order). ``fixed_channel`` pins the feature
    channel instead of drawing it from the ``seed`` stream.
    """

    max_iters: int = 300
    learning_rate: float = 1e-2
    normal_learning_rate: float = 5e-2
    optimize: frozenset = frozenset({"depth"})
    convergence_tol: float = 1e-6
    seed: int = 0
    fixed_channel: Optional[int] = None
    max_backtracks: int = 12
    divergence_factor: float = 10.0
    sobolev_weight: float = 100.0

    def __post_init__(self):
        self.optimize = frozenset(self.optimize)
        if self.max_iters < 1:
            raise RefineError("max_iters must be >= 1")
        if not (self.learning_rate > 0 and self.normal_learning_rate > 0):
            raise RefineError("learning rates must be positive")
        if not self.optimize <= OPTIMIZE_CHOICES or not self.optimize:
            raise RefineError(f"optimize must be a non-empty subset of {sorted(OPTIMIZE_CHOICES)}")
        if self.fixed_channel is not None and not 0 <= self.fixed_channel < N_FEATURES:
            raise RefineError(f"fixed_channel must lie in [0, {N_FEATURES})")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["optimize"] = sorted(self.optimize)
        return d


@dataclass
class RefineReport:
    losses: list = field(default_factory=list)  # per-iteration breakdown dicts
    iter_seconds: list = field(default_factory=list)
    step_sizes: list = field(default_factory=list)
    channels: list = field(default_factory=list)
    initial_metrics: Optional[dict] = None
    final_metrics: Optional[dict] = None
    initial_frame_metrics: Optional[list] = None
    final_frame_metrics: Optional[list] = None
    stop_reason: str = ""
    diverged: bool = False
    final_loss: Optional[float] = None

    @property
    def totals(self) -> list:
        return [b["total"] for b in self.losses]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class _Frame:
    image: np.ndarray
    features: np.ndarray
    depth: np.ndarray
    normals: np.ndarray


class _Problem:
    """Frames plus directed pairs ``(target, source, T_{t->s})``."""

    def __init__(self, frames: Sequence[_Frame], pairs: Sequence[tuple], K: Intrinsics, w: LossWeights):
        self.frames = list(frames)
        self.K = K
        self.w = w
        self.pairs = []
        for t, s, T in pairs:
            ft, fs = self.frames[t], self.frames[s]
            fp = FramePair(
                ft.image, fs.image, ft.depth, fs.depth, ft.normals, fs.normals, T, K,
                ft.features, fs.features,
            )
            self.pairs.append((t, s, fp))
        # each directed pair carries half of each view's priors
        counts = np.zeros(len(self.frames))
        for t, s, _ in pairs:
            counts[t] += 1
            counts[s] += 1
        self.prior_weights = counts / (2.0 * len(self.pairs))
        self.images = [torch.as_tensor(f.image, dtype=DTYPE) for f in self.frames]

    def evaluate(self, log_depths, normals, channel: int, grad: bool):
        """Mean pair total, its breakdown and (optionally) the gradient."""
        ctx = torch.enable_grad() if grad else torch.no_grad()
        with ctx:
            depths = [torch.exp(u) for u in log_depths]
            total = None
            parts = []
            for t, s, fp in self.pairs:
                terms = evaluate_pair(
                    fp, self.w,
                    target_depth=depths[t], source_depth=depths[s],
                    target_normals=normals[t], source_normals=normals[s],
                    feature_channel=channel, priors=False,
                )
                value, breakdown = combine(terms, self.w)
                total = value if total is None else total + value
                parts.append(breakdown)
            total = total / len(self.pairs)
            orth = smooth = 0.0
            for k, c in enumerate(self.prior_weights):
                if c == 0:
                    continue
                if self.w.lambda4 > 0:
                    orth = orth + c * _orthogonality(depths[k], normals[k], self.K)
                if self.w.lambda5 > 0:
                    smooth = smooth + c * _smoothness(depths[k], self.images[k])
            total = total + self.w.lambda4 * orth + self.w.lambda5 * smooth
        summary = {
            k: float(np.mean([getattr(b, k) for b in parts]))
            for k in ("photo", "feat", "depth", "norm")
        }
        summary["orth"] = float(torch.as_tensor(orth).detach())
        summary["smooth"] = float(torch.as_tensor(smooth).detach())
        summary["total"] = float(total.detach())
        summary["masked_pixel_count"] = int(sum(b.masked_pixel_count for b in parts))
        summary["empty_masks"] = int(sum(b.empty_mask for b in parts))
        return total, summary


def _sobolev(g: torch.Tensor, weight: float) -> torch.Tensor:
    """Solve ``(I - weight * Laplacian) p = g`` with Neumann boundaries."""
    if weight <= 0:
        return g
    H, W = g.shape
    lam_y = 2 - 2 * np.cos(np.pi * np.arange(H) / H)
    lam_x = 2 - 2 * np.cos(np.pi * np.arange(W) / W)
    denom = 1.0 + weight * (lam_y[:, None] + lam_x[None, :])
    p = idctn(dctn(g.numpy(), norm="ortho") / denom, norm="ortho")
    return torch.as_tensor(p)


def _rms(x: torch.Tensor) -> float:
    return float(torch.sqrt(torch.mean(x * x)))


def _tangent(g: torch.Tensor, n: torch.Tensor) -> torch.Tensor:
    return g - (g * n).sum(0, keepdim=True) * n


def _renormalize(n: torch.Tensor, rays: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Back onto the unit sphere and, given viewing rays, the camera-facing half."""
    n = n / torch.sqrt((n * n).sum(0, keepdim=True)).clamp_min(1e-12)
    return n if rays is None else face_camera(n, rays)


def _metrics(depths, gts, valids):
    per_frame = []
    for d, g, v in zip(depths, gts, valids):
        if g is None:
            continue
        per_frame.append(compute_metrics(d, g, v, scale_first=False))
    if not per_frame:
        return None, None
    return mean_metrics(per_frame), [m.to_dict() for m in per_frame]


def _descend(problem: _Problem, cfg: RefineConfig, gts=None, valids=None):
    n = len(problem.frames)
    gts = list(gts) if gts is not None else [None] * n
    valids = list(valids) if valids is not None else [None] * n
    opt_d = "depth" in cfg.optimize
    opt_n = "normals" in cfg.optimize
    log_d = [torch.log(as_tensor(f.depth)).detach().clone() for f in problem.frames]
    normals = [_renormalize(as_tensor(f.normals)).detach().clone() for f in problem.frames]
    rays = backproject_map(torch.ones(problem.K.shape, dtype=DTYPE), problem.K)
    rng = np.random.default_rng(cfg.seed)
    report = RefineReport()
    report.initial_metrics, report.initial_frame_metrics = _metrics(
        [np.exp(u.numpy()) for u in log_d], gts, valids
    )

    initial = None
    moved_d = False
    for it in range(cfg.max_iters):
        t0 = time.perf_counter()
        channel = cfg.fixed_channel if cfg.fixed_channel is not None else int(rng.integers(N_FEATURES))
        for u in log_d:
            u.requires_grad_(opt_d)
        for v in normals:
            v.requires_grad_(opt_n)
        total, summary = problem.evaluate(log_d, normals, channel, grad=True)
        leaves = (log_d if opt_d else []) + (normals if opt_n else [])
        grads = torch.autograd.grad(total, leaves, allow_unused=True)
        grads = [torch.zeros_like(l) if g is None else g for g, l in zip(grads, leaves)]
        log_d = [u.detach() for u in log_d]
        normals = [v.detach() for v in normals]
        g_d = [_sobolev(g, cfg.sobolev_weight) for g in grads[: n if opt_d else 0]]
        g_n = [_tangent(g, v) for g, v in zip(grads[n if opt_d else 0 :], normals)]

        current = summary["total"]
        report.losses.append(summary)
        report.channels.append(channel)
        if initial is None:
            initial = current
        if not np.isfinite(current) or current > cfg.divergence_factor * initial:
            report.diverged = True
            report.stop_reason = "diverged"
            report.iter_seconds.append(time.perf_counter() - t0)
            break

        scale_d = _rms(torch.cat([g.ravel() for g in g_d])) if g_d else 0.0
        scale_n = _rms(torch.cat([g.ravel() for g in g_n])) if g_n else 0.0
        if scale_d < 1e-300 and scale_n < 1e-300:
            report.stop_reason = "zero gradient"
            report.iter_seconds.append(time.perf_counter() - t0)
            break

        alpha = 1.0
        accepted = None
        for _ in range(cfg.max_backtracks + 1):
            cand_d = log_d
            cand_n = normals
            if g_d and scale_d > 0:
                cand_d = [u - alpha * cfg.learning_rate * g / scale_d for u, g in zip(log_d, g_d)]
            if g_n and scale_n > 0:
                cand_n = [
                    _renormalize(v - alpha * cfg.normal_learning_rate * g / scale_n, rays)
                    for v, g in zip(normals, g_n)
                ]
            cand_total, _ = problem.evaluate(cand_d, cand_n, channel, grad=False)
            if float(cand_total) < current:
                accepted = (cand_d, cand_n, float(cand_total))
                break
            alpha *= 0.5
        report.iter_seconds.append(time.perf_counter() - t0)
        if accepted is None:
            report.step_sizes.append(0.0)
            report.stop_reason = "line search found no decrease"
            break
        log_d, normals, new_total = accepted
        moved_d = moved_d or bool(g_d and scale_d > 0)
        report.step_sizes.append(alpha)
        if (current - new_total) <= cfg.convergence_tol * abs(current):
            report.stop_reason = "converged"
            break
        logger.debug("iter %d channel %d loss %.6g step %.3g", it, channel, current, alpha)
    else:
        report.stop_reason = "max_iters"

    # untouched depths are returned bit-exactly rather than through exp(log d)
    if moved_d:
        depths = [np.exp(u.numpy()) for u in log_d]
    else:
        depths = [np.array(f.depth, dtype=np.float64) for f in problem.frames]
    out_normals = [v.numpy() for v in normals]
    final_channel = report.channels[-1] if report.channels else 0
    _, final_summary = problem.evaluate(log_d, normals, final_channel, grad=False)
    report.final_loss = final_summary["total"]
    report.final_metrics, report.final_frame_metrics = _metrics(depths, gts, valids)
    return depths, out_normals, report


def _frame(image, depth, normals=None, features=None) -> _Frame:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[None]
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(depth <= 0) or not np.all(np.isfinite(depth)):
        raise RefineError("initial depth must be positive and finite")
    if normals is None:
        normals = np.zeros((3,) + depth.shape)
        normals[2] = -1.0
    if features is None:
        features = feature_extract(image)
    if image.shape[0] > 1 and np.all(image == image[:1]):
        # grey replicated to RGB: one channel gives identical L1 and SSIM means
        image = image[:1]
    return _Frame(image, features, depth, np.asarray(normals, dtype=np.float64))


def refine_pair(
    pair: FramePair,
    w: Optional[LossWeights] = None,
    cfg: Optional[RefineConfig] = None,
    gt=None,
    gt_valid=None,
    symmetric: bool = False,
):
    """Refine the depths (and optionally normals) of one pair.

    Args:
        pair: Initial fields; the pose ``pair.pose_t_to_s`` is held fixed.
        w: Loss weights.
        cfg: Descent settings.
        gt: Optional ground-truth target depth, or a ``(target, source)``
            tuple, for the report metrics.
        gt_valid: Optional mask(s) matching ``gt``.
        symmetric: Also include the reversed pair in the objective.

    Returns:
        ``(refined_pair, report)``.
    """
    w = w or LossWeights()
    cfg = cfg or RefineConfig()
    frames = [
        _frame(pair.target, pair.target_depth, pair.target_normals, pair.target_features),
        _frame(pair.source, pair.source_depth, pair.source_normals, pair.source_features),
    ]
    pairs = [(0, 1, pair.pose_t_to_s)]
    if symmetric:
        pairs.append((1, 0, pair.pose_t_to_s.inverse()))
    problem = _Problem(frames, pairs, pair.intrinsics, w)
    gts, valids = _gt_lists(gt, gt_valid, 2)
    depths, normals, report = _descend(problem, cfg, gts, valids)
    refined = pair.with_(
        target_depth=depths[0], source_depth=depths[1],
        target_normals=normals[0], source_normals=normals[1],
    )
    return refined, report


def _gt_lists(gt, gt_valid, n):
    if gt is None:
        return None, None
    if isinstance(gt, (list, tuple)):
        gts = list(gt) + [None] * (n - len(gt))
    else:
        gts = [gt] + [None] * (n - 1)
    if gt_valid is None:
        valids = [None] * n
    elif isinstance(gt_valid, (list, tuple)):
        valids = list(gt_valid) + [None] * (n - len(gt_valid))
    else:
        valids = [gt_valid] + [None] * (n - 1)
    return gts, valids


@dataclass
class SequenceResult:
    depths: list
    normals: list
    report: RefineReport


def refine_sequence(
    images: Sequence,
    depths: Sequence,
    poses_world: Sequence[PoseSE3],
    K: Intrinsics,
    w: Optional[LossWeights] = None,
    cfg: Optional[RefineConfig] = None,
    normals: Optional[Sequence] = None,
    gt_depths: Optional[Sequence] = None,
    gt_valid: Optional[Sequence] = None,
) -> SequenceResult:
    """Jointly refine the depths of a sequence over all adjacent pairs.

    Every consecutive pair enters in both directions, ``(k, k+1)`` and
    ``(k+1, k)``, and the objective is the mean over those directed pairs,
    so each frame's depth receives gradient from every pair it is in.
    """
    n = len(images)
    if n < 2:
        raise RefineError("refine_sequence needs at least 2 frames to form pairs")
    if len(depths) != n or len(poses_world) != n:
        raise RefineError("images, depths and poses must have the same length")
    w = w or LossWeights()
    cfg = cfg or RefineConfig()
    normals = list(normals) if normals is not None else [None] * n
    frames = [_frame(images[k], depths[k], normals[k]) for k in range(n)]
    pairs = []
    for k in range(n - 1):
        pairs.append((k, k + 1, relative_pose(poses_world[k], poses_world[k + 1])))
        pairs.append((k + 1, k, relative_pose(poses_world[k + 1], poses_world[k])))
    problem = _Problem(frames, pairs, K, w)
    out_d, out_n, report = _descend(problem, cfg, gt_depths, gt_valid)
    return SequenceResult(out_d, out_n, report)


def perturb_depth(depth, scale: float = 1.0, noise: float = 0.0, seed: int = 0) -> np.ndarray:
    """``depth * scale * exp(noise * N(0, 1))`` with a seeded generator."""
    depth = np.asarray(depth, dtype=np.float64)
    rng = np.random.default_rng(seed)
    return depth * scale * np.exp(noise * rng.standard_normal(depth.shape))
