"""Procedural colon renderer with exact depth, normals and poses.

The lumen is the implicit tube ``x^2 + y^2 - r(z)^2 = 0`` in world
coordinates with ``r(z) = R0 + A sin(2 pi z / P)`` (haustral folds). Rays are
marched at a fixed step, the first sign change is refined by bisection, and
shading is Lambertian with a point light at the camera and inverse-square
falloff, plus an optional Phong highlight.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .geometry import Intrinsics, PoseSE3, relative_pose


class SceneError(ValueError):
    """Invalid scene configuration or camera placement."""


@dataclass
class SceneConfig:
    """Scene, camera and shading parameters.

    ``camera_path`` holds camera-to-world poses; the camera looks down its
    own +z axis, so the identity pose looks along the lumen.
    """

    base_radius: float = 1.0
    fold_amplitude: float = 0.15
    fold_period: float = 0.8
    texture: str = "sinusoidal-vessel"
    texture_contrast: float = 0.5
    texture_angular_freq: int = 7
    texture_axial_period: float = 0.3
    specular: str = "off"
    specular_exponent: float = 20.0
    specular_strength: float = 0.6
    light_intensity: float = 1.0
    light_falloff: bool = True
    width: int = 288
    height: int = 224
    focal: Optional[float] = None
    far_plane: float = 20.0
    march_step: float = 0.01
    camera_path: list = field(default_factory=lambda: [PoseSE3.identity()])
    seed: int = 0

    def __post_init__(self):
        if not self.base_radius > self.fold_amplitude >= 0:
            raise SceneError("need base_radius > fold_amplitude >= 0")
        if self.fold_period <= 0 or self.texture_axial_period <= 0:
            raise SceneError("periods must be positive")
        if self.texture not in ("none", "sinusoidal-vessel"):
            raise SceneError(f"unknown texture {self.texture!r}")
        if self.specular not in ("off", "phong"):
            raise SceneError(f"unknown specular model {self.specular!r}")
        if not 0 <= self.texture_contrast <= 1:
            raise SceneError("texture_contrast must lie in [0, 1]")
        if self.width < 2 or self.height < 2:
            raise SceneError("image must be at least 2x2")
        if len(self.camera_path) < 1:
            raise SceneError("camera_path needs at least one pose")
        if self.march_step <= 0 or self.far_plane <= 0:
            raise SceneError("march_step and far_plane must be positive")

    @property
    def intrinsics(self) -> Intrinsics:
        focal = self.focal if self.focal is not None else self.width / 2.0
        return Intrinsics.centered(self.width, self.height, focal)

    def radius(self, z):
        return self.base_radius + self.fold_amplitude * np.sin(2 * np.pi * z / self.fold_period)

    def radius_slope(self, z):
        w = 2 * np.pi / self.fold_period
        return self.fold_amplitude * w * np.cos(w * z)

    def implicit(self, points) -> np.ndarray:
        """``F(x, y, z)`` for ``(..., 3)`` world points; negative inside."""
        p = np.asarray(points, dtype=np.float64)
        return p[..., 0] ** 2 + p[..., 1] ** 2 - self.radius(p[..., 2]) ** 2

    def implicit_gradient(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        r = self.radius(p[..., 2])
        return np.stack([2 * p[..., 0], 2 * p[..., 1], -2 * r * self.radius_slope(p[..., 2])], axis=-1)

    def surface_residual(self, points) -> np.ndarray:
        """``|F| / |grad F|``: first-order distance of points to the wall."""
        g = np.linalg.norm(self.implicit_gradient(points), axis=-1)
        return np.abs(self.implicit(points)) / np.maximum(g, 1e-300)

    def albedo(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        if self.texture == "none":
            return np.ones(p.shape[:-1])
        ph = np.random.default_rng(self.seed).uniform(0, 2 * np.pi, size=2)
        theta = np.arctan2(p[..., 1], p[..., 0])
        a = 0.5 * (1 + np.sin(self.texture_angular_freq * theta + ph[0]))
        b = 0.5 * (1 + np.sin(2 * np.pi * p[..., 2] / self.texture_axial_period + ph[1]))
        return 1.0 - self.texture_contrast * a * b

    def to_dict(self) -> dict:
        d = {k: v for k, v in self.__dict__.items() if k != "camera_path"}
        d["camera_path"] = [T.to_dict() for T in self.camera_path]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        d = dict(d)
        path = [PoseSE3.from_dict(p) for p in d.pop("camera_path", [])] or [PoseSE3.identity()]
        return cls(camera_path=path, **d)


def pullback_path(n_frames: int, step: float = 0.05, start_z: float = 0.0, wobble: float = 0.0) -> list:
    """Camera-to-world poses withdrawing along the lumen axis.

    The camera looks towards +z and moves towards -z by ``step`` per frame.
    A non-zero ``wobble`` adds a small deterministic lateral offset and yaw
    so that consecutive relative poses are not pure translations.
    """
    poses = []
    for k in range(n_frames):
        s = np.sin(0.9 * k)
        c = np.cos(0.7 * k)
        t = np.array([wobble * s, wobble * c, start_z - step * k])
        omega = np.array([0.3 * wobble * c, 0.3 * wobble * s, 0.0])
        poses.append(PoseSE3.from_rotation(omega, t))
    return poses


@dataclass
class RenderedFrame:
    image: np.ndarray  # (3, H, W) in [0, 1]
    gt_depth: np.ndarray  # (H, W), far_plane on background
    gt_normals: np.ndarray  # (3, H, W) camera frame, camera facing
    pose_world: PoseSE3  # camera-to-world
    valid: np.ndarray  # (H, W) True where the wall was hit
    specular: np.ndarray  # (H, W) specular contribution before clipping


@dataclass
class SyntheticSequence:
    frames: list
    intrinsics: Intrinsics
    config: SceneConfig

    def relative(self, t: int, s: int) -> PoseSE3:
        """``T_{t->s}`` mapping frame ``t`` camera coordinates to frame ``s``."""
        return relative_pose(self.frames[t].pose_world, self.frames[s].pose_world)

    @property
    def relative_poses(self) -> list:
        """``T_{k->k+1}`` for consecutive frames."""
        return [self.relative(k, k + 1) for k in range(len(self.frames) - 1)]

    def __len__(self) -> int:
        return len(self.frames)


def _march(cfg: SceneConfig, origin: np.ndarray, dirs: np.ndarray):
    """First crossing ``t`` (camera depth) along ``origin + t * dirs``.

    Returns ``(t, hit)``; rays that stay inside up to the far plane get
    ``t = far_plane`` and ``hit = False``.
    """
    n = dirs.shape[0]
    h = cfg.march_step
    t_hit = np.full(n, cfg.far_plane)
    hit = np.zeros(n, dtype=bool)
    lo = np.zeros(n)
    active = np.arange(n)
    t = np.zeros(n)
    while active.size:
        t_new = t[active] + h
        f = cfg.implicit(origin + t_new[:, None] * dirs[active])
        crossed = f >= 0
        beyond = t_new > cfg.far_plane
        done = crossed | beyond
        idx = active[crossed & ~beyond]
        hit[idx] = True
        lo[idx] = t[idx]
        t_hit[idx] = t_new[crossed & ~beyond]
        t[active] = t_new
        active = active[~done]
    # bisection on [lo, hi] with F(lo) < 0 <= F(hi)
    idx = np.flatnonzero(hit)
    a, b = lo[idx], t_hit[idx]
    d = dirs[idx]
    while idx.size and np.max(b - a) > 1e-10:
        m = 0.5 * (a + b)
        inside = cfg.implicit(origin + m[:, None] * d) < 0
        a = np.where(inside, m, a)
        b = np.where(inside, b, m)
    t_hit[idx] = 0.5 * (a + b)
    return t_hit, hit


def render_frame(cfg: SceneConfig, pose: PoseSE3) -> RenderedFrame:
    """Ray-march the lumen from camera-to-world ``pose``."""
    origin = pose.translation.copy()
    if cfg.implicit(origin) >= 0:
        raise SceneError(f"camera at {origin} is not inside the tube")
    K = cfg.intrinsics
    H, W = K.height, K.width
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    rays_cam = np.stack([(xs - K.cx) / K.fx, (ys - K.cy) / K.fy, np.ones_like(xs)], axis=-1).reshape(-1, 3)
    dirs = rays_cam @ pose.rotation.T
    t, hit = _march(cfg, origin, dirs)

    pts = origin + t[:, None] * dirs
    g = cfg.implicit_gradient(pts)
    n_world = -g / np.maximum(np.linalg.norm(g, axis=-1, keepdims=True), 1e-300)
    n_cam = n_world @ pose.rotation  # R^T n for each row
    to_cam = origin - pts
    dist = np.linalg.norm(to_cam, axis=-1)
    l = to_cam / dist[:, None]
    ndotl = np.maximum(0.0, np.sum(n_world * l, axis=-1))
    falloff = dist**2 if cfg.light_falloff else 1.0
    shade = cfg.light_intensity * cfg.albedo(pts) * ndotl / falloff
    spec = np.zeros_like(shade)
    if cfg.specular == "phong":
        rdotv = np.maximum(0.0, 2 * ndotl**2 - 1.0)
        spec = cfg.light_intensity * cfg.specular_strength * rdotv**cfg.specular_exponent / falloff
    gray = np.clip(shade + spec, 0.0, 1.0)
    gray[~hit] = 0.0
    spec[~hit] = 0.0
    n_cam[~hit] = (0.0, 0.0, -1.0)

    return RenderedFrame(
        image=np.repeat(gray.reshape(1, H, W), 3, axis=0),
        gt_depth=t.reshape(H, W),
        gt_normals=np.ascontiguousarray(n_cam.T.reshape(3, H, W)),
        pose_world=pose,
        valid=hit.reshape(H, W),
        specular=spec.reshape(H, W),
    )


def render_sequence(cfg: SceneConfig) -> SyntheticSequence:
    """Render every pose of ``cfg.camera_path``."""
    frames = [render_frame(cfg, T) for T in cfg.camera_path]
    return SyntheticSequence(frames, cfg.intrinsics, cfg)


def default_scene(n_frames: int = 10, **overrides) -> SceneConfig:
    """Default lumen with a ``n_frames`` pull-back path (z step 0.05)."""
    step = overrides.pop("step", 0.05)
    wobble = overrides.pop("wobble", 0.0)
    return replace(SceneConfig(**overrides), camera_path=pullback_path(n_frames, step=step, wobble=wobble))
