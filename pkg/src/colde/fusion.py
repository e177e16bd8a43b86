"""World-frame point cloud stitching and windowed depth averaging."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
from scipy import ndimage

from .geometry import Intrinsics, PoseSE3, as_tensor, pose_tensors, relative_pose, reproject, sample_bilinear


class FusionError(ValueError):
    pass


@dataclass
class PointCloud:
    points: np.ndarray  # (N, 3) world frame
    colors: np.ndarray  # (N, 3) in [0, 1]

    def __len__(self) -> int:
        return len(self.points)


def backproject_depth(depth, K: Intrinsics) -> np.ndarray:
    """Camera-frame points ``(H, W, 3)`` of a depth map."""
    depth = np.asarray(depth, dtype=np.float64)
    ys, xs = np.mgrid[0 : depth.shape[0], 0 : depth.shape[1]].astype(np.float64)
    return np.stack([depth * (xs - K.cx) / K.fx, depth * (ys - K.cy) / K.fy, depth], axis=-1)


def voxel_downsample(cloud: PointCloud, voxel_size: float) -> PointCloud:
    """Average points and colours per occupied voxel, ordered by voxel key."""
    if voxel_size <= 0:
        raise FusionError("voxel_size must be positive")
    if len(cloud) == 0:
        return cloud
    keys = np.floor(cloud.points / voxel_size).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.ravel()
    n = len(counts)
    pts = np.stack([np.bincount(inverse, cloud.points[:, i], n) for i in range(3)], axis=1)
    col = np.stack([np.bincount(inverse, cloud.colors[:, i], n) for i in range(3)], axis=1)
    return PointCloud(pts / counts[:, None], col / counts[:, None])


def fuse_pointcloud(
    frames: Sequence[tuple],
    K: Intrinsics,
    valid: Optional[Sequence] = None,
    voxel_size: Optional[float] = None,
) -> PointCloud:
    """Concatenate world-frame backprojections of every valid pixel.

    Args:
        frames: ``(depth, image, pose_world)`` triples; ``pose_world`` maps
            camera to world coordinates. ``image`` may be ``None``.
        K: Shared intrinsics.
        valid: Optional per-frame boolean masks.
        voxel_size: Average points per voxel of this size when given.

    Points are ordered by frame index, then row-major pixel.
    """
    pts, cols = [], []
    for k, (depth, image, pose) in enumerate(frames):
        depth = np.asarray(depth, dtype=np.float64)
        if depth.shape != K.shape:
            raise FusionError(f"frame {k}: depth shape {depth.shape} != intrinsics {K.shape}")
        m = np.ones(depth.shape, dtype=bool) if valid is None or valid[k] is None else np.asarray(valid[k], bool)
        m = m & (depth > 0) & np.isfinite(depth)
        P = backproject_depth(depth, K)[m]
        pts.append(pose.apply(P))
        if image is None:
            cols.append(np.ones((len(P), 3)))
        else:
            img = np.asarray(image, dtype=np.float64)
            if img.ndim == 2:
                img = img[None]
            rgb = np.repeat(img, 3, axis=0) if img.shape[0] == 1 else img[:3]
            cols.append(np.moveaxis(rgb, 0, -1)[m])
    cloud = PointCloud(
        np.concatenate(pts) if pts else np.zeros((0, 3)),
        np.concatenate(cols) if cols else np.zeros((0, 3)),
    )
    if voxel_size:
        cloud = voxel_downsample(cloud, voxel_size)
    return cloud


def _smooth_valid(depth: np.ndarray, valid: np.ndarray, edge_ratio: float) -> np.ndarray:
    """Valid pixels whose 3x3 neighbourhood has no depth jump above ``edge_ratio``."""
    hi = ndimage.maximum_filter(np.where(valid, depth, np.inf), size=3, mode="nearest")
    lo = ndimage.minimum_filter(np.where(valid, depth, 0.0), size=3, mode="nearest")
    return valid & np.isfinite(hi) & (lo > 0) & (hi <= lo * edge_ratio)


def windowed_depth_average(
    depths: Sequence,
    poses_world: Sequence[PoseSE3],
    K: Intrinsics,
    window: int = 7,
    valid: Optional[Sequence] = None,
    max_rel_diff: float = 0.25,
    edge_ratio: float = 1.1,
) -> list:
    """Average each frame's depth with its neighbours' depths seen from it.

    For a centre frame, every pixel is carried into each neighbour within
    ``window // 2`` frames using the centre depth; the neighbour depth
    sampled there is lifted back to 3-D and expressed in the centre camera,
    whose z is that neighbour's estimate of the centre depth. Estimates that
    fall outside the neighbour image, behind it, on a neighbour depth edge,
    or more than ``max_rel_diff`` away from the centre value are dropped;
    the rest are averaged with the centre's own depth.
    """
    n = len(depths)
    if window < 1 or window % 2 == 0:
        raise FusionError("window must be a positive odd count")
    if window > n:
        raise FusionError(f"window {window} exceeds sequence length {n}")
    if len(poses_world) != n:
        raise FusionError("one pose per depth map required")
    half = window // 2
    D = [np.asarray(d, dtype=np.float64) for d in depths]
    V = [np.ones(d.shape, bool) if valid is None or valid[k] is None else np.asarray(valid[k], bool) for k, d in enumerate(D)]
    if half == 0:
        return [d.copy() for d in D]
    smooth = [_smooth_valid(d, v, edge_ratio) for d, v in zip(D, V)]
    out = []
    for c in range(n):
        dc = torch.as_tensor(D[c])
        acc = D[c].copy()
        cnt = np.ones_like(acc)
        for k in range(max(0, c - half), min(n, c + half + 1)):
            if k == c:
                continue
            T_ck = relative_pose(poses_world[c], poses_world[k])
            R, t = pose_tensors(T_ck)
            x, y, _, in_front = reproject(dc, R, t, K)
            stack = torch.as_tensor(np.stack([D[k], smooth[k].astype(np.float64)]))
            with torch.no_grad():
                sampled, inside = sample_bilinear(stack, x, y)
            dk = sampled[0].numpy()
            ok = inside.numpy() & in_front.numpy() & (sampled[1].numpy() > 1.0 - 1e-9) & V[c]
            # neighbour surface point in neighbour camera, then centre camera
            xs, ys = x.numpy(), y.numpy()
            Pk = np.stack([dk * (xs - K.cx) / K.fx, dk * (ys - K.cy) / K.fy, dk], axis=-1)
            z = T_ck.inverse().apply(Pk)[..., 2]
            ok &= np.abs(z - D[c]) <= max_rel_diff * D[c]
            acc[ok] += z[ok]
            cnt[ok] += 1
        out.append(np.where(V[c], acc / cnt, D[c]))
    return out


def surface_residual_fraction(cloud: PointCloud, scene, threshold: float = 1e-3) -> float:
    """Fraction of points within ``threshold`` of the scene's implicit wall."""
    if len(cloud) == 0:
        return 1.0
    return float(np.mean(scene.surface_residual(cloud.points) < threshold))
