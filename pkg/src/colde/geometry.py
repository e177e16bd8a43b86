"""Pinhole camera geometry: intrinsics, rigid poses, projection and warping.

Pixel (row i, column j) sits at continuous coordinate ``(x, y) = (j, i)``.
Dense fields are channel-first: images ``(C, H, W)``, depth ``(H, W)``,
normals ``(3, H, W)``. Every kernel here runs in float64 torch so the same
code path serves loss evaluation and autograd; the public helpers accept
numpy arrays as well and hand numpy back.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np
import torch

EPS_DEPTH = 1e-6
DTYPE = torch.float64


class GeometryError(ValueError):
    """Invalid geometric input (non-positive depth, malformed pose, ...)."""


def as_tensor(x: Any) -> torch.Tensor:
    """Promote ``x`` to a float64 tensor, keeping autograd history if present."""
    if isinstance(x, torch.Tensor):
        return x if x.dtype == DTYPE else x.to(DTYPE)
    arr = np.asarray(x, dtype=np.float64)
    return torch.as_tensor(arr if arr.flags.writeable else arr.copy())


def _numpy_out(ref: Any, value: torch.Tensor):
    if isinstance(ref, torch.Tensor):
        return value
    return value.detach().cpu().numpy()


# --------------------------------------------------------------------------
# Intrinsics
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width < 1 or self.height < 1:
            raise GeometryError(f"image size must be positive, got {self.width}x{self.height}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise GeometryError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image"
            )

    @classmethod
    def centered(cls, width: int, height: int, focal: float) -> "Intrinsics":
        """Square pixels with the principal point at the image centre."""
        return cls(focal, focal, (width - 1) / 2.0, (height - 1) / 2.0, width, height)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]], dtype=np.float64
        )

    @property
    def inverse_matrix(self) -> np.ndarray:
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ],
            dtype=np.float64,
        )

    def resized(self, width: int, height: int) -> "Intrinsics":
        """Intrinsics for the same camera resampled to ``width x height``.

        Uses the pixel-centre convention, so the image corners map to corners.
        """
        sx = (width - 1) / max(self.width - 1, 1)
        sy = (height - 1) / max(self.height - 1, 1)
        return Intrinsics(self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy, width, height)

    def to_dict(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Intrinsics":
        return cls(
            float(d["fx"]),
            float(d["fy"]),
            float(d["cx"]),
            float(d["cy"]),
            int(d["width"]),
            int(d["height"]),
        )


# --------------------------------------------------------------------------
# SO(3) / SE(3)
# --------------------------------------------------------------------------


def hat(v) -> np.ndarray:
    """Skew-symmetric matrix such that ``hat(a) @ b == cross(a, b)``."""
    x, y, z = np.asarray(v, dtype=np.float64)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def _so3_coeffs(theta2: float) -> tuple[float, float, float]:
    # A = sin(t)/t, B = (1 - cos t)/t^2, C = (t - sin t)/t^3
    if theta2 < 1e-10:
        return (
            1.0 - theta2 / 6.0,
            0.5 - theta2 / 24.0,
            1.0 / 6.0 - theta2 / 120.0,
        )
    theta = np.sqrt(theta2)
    s, c = np.sin(theta), np.cos(theta)
    return s / theta, (1.0 - c) / theta2, (theta - s) / (theta2 * theta)


def so3_exp(omega) -> np.ndarray:
    """Rodrigues' formula for an axis-angle vector."""
    omega = np.asarray(omega, dtype=np.float64)
    K = hat(omega)
    a, b, _ = _so3_coeffs(float(omega @ omega))
    return np.eye(3) + a * K + b * (K @ K)


def so3_log(R) -> np.ndarray:
    """Axis-angle vector of a rotation matrix, robust near 0 and pi."""
    R = np.asarray(R, dtype=np.float64)
    cos_t = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_t)
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < 1e-6:
        return 0.5 * (1.0 + theta**2 / 6.0) * w
    if np.pi - theta < 1e-4:
        # near pi the antisymmetric part vanishes; read the axis off R + I
        B = (R + np.eye(3)) / 2.0
        k = int(np.argmax(np.diag(B)))
        axis = B[:, k] / np.sqrt(max(B[k, k], 1e-300))
        axis /= np.linalg.norm(axis)
        if axis @ w < 0:
            axis = -axis
        return theta * axis
    return theta / (2.0 * np.sin(theta)) * w


@dataclass(frozen=True, eq=False)
class PoseSE3:
    """Rigid transform ``x -> R x + t``.

    The tangent parametrisation is ``(omega, v)`` with ``exp`` the group
    exponential, so ``PoseSE3.exp(T.log())`` reproduces ``T``.
    """

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise GeometryError("pose contains non-finite entries")
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise GeometryError("rotation is not orthonormal with det 1")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "PoseSE3":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, M) -> "PoseSE3":
        M = np.asarray(M, dtype=np.float64)
        return cls(M[:3, :3], M[:3, 3])

    @classmethod
    def from_rotation(cls, omega, translation=(0.0, 0.0, 0.0)) -> "PoseSE3":
        """Pose with rotation ``so3_exp(omega)`` and a plain translation."""
        return cls(so3_exp(omega), translation)

    @classmethod
    def exp(cls, xi) -> "PoseSE3":
        xi = np.asarray(xi, dtype=np.float64).reshape(6)
        omega, v = xi[:3], xi[3:]
        K = hat(omega)
        a, b, c = _so3_coeffs(float(omega @ omega))
        R = np.eye(3) + a * K + b * (K @ K)
        V = np.eye(3) + b * K + c * (K @ K)
        return cls(R, V @ v)

    def log(self) -> np.ndarray:
        omega = so3_log(self.rotation)
        theta2 = float(omega @ omega)
        K = hat(omega)
        a, b, _ = _so3_coeffs(theta2)
        if theta2 < 1e-10:
            V_inv = np.eye(3) - 0.5 * K + (K @ K) / 12.0
        else:
            V_inv = np.eye(3) - 0.5 * K + (1.0 - a / (2.0 * b)) / theta2 * (K @ K)
        return np.concatenate([omega, V_inv @ self.translation])

    @property
    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def inverse(self) -> "PoseSE3":
        Rt = self.rotation.T
        return PoseSE3(Rt, -Rt @ self.translation)

    def __matmul__(self, other: "PoseSE3") -> "PoseSE3":
        return PoseSE3(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def apply(self, points) -> np.ndarray:
        """Transform ``(..., 3)`` points."""
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def scaled(self, factor: float) -> "PoseSE3":
        """Same rotation, translation multiplied by ``factor``."""
        return PoseSE3(self.rotation, self.translation * factor)

    def allclose(self, other: "PoseSE3", atol: float = 1e-12) -> bool:
        return bool(np.allclose(self.matrix, other.matrix, rtol=0.0, atol=atol))

    def to_dict(self) -> dict:
        return {"rotation": self.rotation.tolist(), "translation": self.translation.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "PoseSE3":
        return cls(np.asarray(d["rotation"]), np.asarray(d["translation"]))

    def __repr__(self) -> str:
        return f"PoseSE3(tangent={np.array2string(self.log(), precision=6)})"


def relative_pose(target_to_world: PoseSE3, source_to_world: PoseSE3) -> PoseSE3:
    """``T_{t->s} = T_s^{-1} o T_t`` for camera-to-world poses."""
    return source_to_world.inverse() @ target_to_world


def torch_so3_exp(omega: torch.Tensor) -> torch.Tensor:
    """Differentiable Rodrigues map, well defined (with gradient) at zero."""
    theta2 = (omega * omega).sum()
    zero = omega.new_zeros(())
    K = torch.stack(
        [
            torch.stack([zero, -omega[2], omega[1]]),
            torch.stack([omega[2], zero, -omega[0]]),
            torch.stack([-omega[1], omega[0], zero]),
        ]
    )
    if float(theta2.detach()) < 1e-10:
        a = 1.0 - theta2 / 6.0
        b = 0.5 - theta2 / 24.0
    else:
        theta = torch.sqrt(theta2)
        a = torch.sin(theta) / theta
        b = (1.0 - torch.cos(theta)) / theta2
    return torch.eye(3, dtype=omega.dtype) + a * K + b * (K @ K)


def torch_se3_exp(xi: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Differentiable SE(3) exponential; returns ``(R, t)``."""
    omega, v = xi[:3], xi[3:]
    theta2 = (omega * omega).sum()
    zero = xi.new_zeros(())
    K = torch.stack(
        [
            torch.stack([zero, -omega[2], omega[1]]),
            torch.stack([omega[2], zero, -omega[0]]),
            torch.stack([-omega[1], omega[0], zero]),
        ]
    )
    if float(theta2.detach()) < 1e-10:
        a = 1.0 - theta2 / 6.0
        b = 0.5 - theta2 / 24.0
        c = 1.0 / 6.0 - theta2 / 120.0
    else:
        theta = torch.sqrt(theta2)
        a = torch.sin(theta) / theta
        b = (1.0 - torch.cos(theta)) / theta2
        c = (theta - torch.sin(theta)) / (theta2 * theta)
    eye = torch.eye(3, dtype=xi.dtype)
    KK = K @ K
    return eye + a * K + b * KK, (eye + b * K + c * KK) @ v


# --------------------------------------------------------------------------
# Projection
# --------------------------------------------------------------------------


def backproject(p, d: float, K: Intrinsics) -> np.ndarray:
    """Lift pixel ``p = (x, y)`` at depth ``d`` to a camera-frame point."""
    if not d > 0:
        raise GeometryError(f"depth must be positive, got {d}")
    x, y = float(p[0]), float(p[1])
    return d * np.array([(x - K.cx) / K.fx, (y - K.cy) / K.fy, 1.0])


def pixel_grid(height: int, width: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Continuous ``(x, y)`` coordinate maps of every pixel."""
    ys, xs = torch.meshgrid(
        torch.arange(height, dtype=DTYPE), torch.arange(width, dtype=DTYPE), indexing="ij"
    )
    return xs, ys


def _normalized_grid(h: int, w: int, K: Intrinsics):
    xs, ys = pixel_grid(h, w)
    return xs, ys, (xs - K.cx) / K.fx, (ys - K.cy) / K.fy


def backproject_map(depth: torch.Tensor, K: Intrinsics) -> torch.Tensor:
    """Camera-frame points ``(3, H, W)`` of a depth map."""
    _, _, u, v = _normalized_grid(*depth.shape, K)
    return torch.stack([depth * u, depth * v, depth])


def project_points(points: torch.Tensor, K: Intrinsics):
    """Pinhole projection of ``(3, ...)`` points.

    Returns ``(x, y, z, in_front)``; coordinates of points with
    ``z <= EPS_DEPTH`` are computed with a clamped depth and flagged.
    """
    z = points[2]
    in_front = z > EPS_DEPTH
    zs = torch.where(in_front, z, torch.full_like(z, EPS_DEPTH))
    x = K.fx * points[0] / zs + K.cx
    y = K.fy * points[1] / zs + K.cy
    return x, y, z, in_front


def reproject(depth: torch.Tensor, R: torch.Tensor, t: torch.Tensor, K: Intrinsics):
    """Map every target pixel into the source view.

    Returns ``(x_s, y_s, d_s, in_front)`` maps of shape ``(H, W)``. The
    source coordinate is written as the target pixel plus an offset so
    that the identity transform reproduces the pixel grid exactly.
    """
    xs, ys, u, v = _normalized_grid(*depth.shape, K)
    P = torch.stack([depth * u, depth * v, depth])
    Q = torch.einsum("ij,jhw->ihw", R, P) + t[:, None, None]
    z = Q[2]
    in_front = z > EPS_DEPTH
    zs = torch.where(in_front, z, torch.full_like(z, EPS_DEPTH))
    x = xs + K.fx * (Q[0] - u * zs) / zs
    y = ys + K.fy * (Q[1] - v * zs) / zs
    return x, y, z, in_front


def pose_tensors(T: PoseSE3) -> tuple[torch.Tensor, torch.Tensor]:
    return torch.tensor(T.rotation, dtype=DTYPE), torch.tensor(T.translation, dtype=DTYPE)


def project_pixel(p_t, D_t, T: PoseSE3, K: Intrinsics):
    """Project target pixel ``p_t`` with depth map ``D_t`` into the source view.

    Returns ``(p_s, d_s, in_front)``. ``p_s`` may fall outside the image; it
    is not clamped. ``in_front`` is False when ``d_s <= EPS_DEPTH``.
    """
    D_t = np.asarray(D_t, dtype=np.float64)
    x, y = int(round(p_t[0])), int(round(p_t[1]))
    if not (0 <= x < K.width and 0 <= y < K.height):
        raise GeometryError(f"pixel {p_t} outside image")
    d = D_t[y, x]
    if not d > 0:
        raise GeometryError(f"depth must be positive, got {d}")
    X = T.apply(backproject((float(p_t[0]), float(p_t[1])), d, K))
    d_s = float(X[2])
    in_front = d_s > EPS_DEPTH
    z = d_s if in_front else EPS_DEPTH
    p_s = np.array([K.fx * X[0] / z + K.cx, K.fy * X[1] / z + K.cy])
    return p_s, d_s, in_front


# --------------------------------------------------------------------------
# Sampling and warping
# --------------------------------------------------------------------------


def sample_bilinear(img: torch.Tensor, x: torch.Tensor, y: torch.Tensor):
    """Bilinearly sample a ``(C, H, W)`` tensor at coordinate maps ``x, y``.

    Coordinates outside ``[0, W-1] x [0, H-1]`` yield 0 and a False flag.
    Lattice points are reproduced exactly, including the last row/column.
    """
    C, H, W = img.shape
    if H < 2 or W < 2:
        raise GeometryError("bilinear sampling needs at least a 2x2 image")
    inside = (x >= 0) & (x <= W - 1) & (y >= 0) & (y <= H - 1) & torch.isfinite(x) & torch.isfinite(y)
    xc = torch.where(inside, x, torch.zeros_like(x))
    yc = torch.where(inside, y, torch.zeros_like(y))
    x0 = torch.floor(xc).clamp(0, W - 2)
    y0 = torch.floor(yc).clamp(0, H - 2)
    wx = xc - x0
    wy = yc - y0
    i0 = (y0.long() * W + x0.long()).reshape(-1)
    flat = img.reshape(C, H * W)
    v00 = flat[:, i0]
    v01 = flat[:, i0 + 1]
    v10 = flat[:, i0 + W]
    v11 = flat[:, i0 + W + 1]
    wx = wx.reshape(-1)
    wy = wy.reshape(-1)
    top = v00 + wx * (v01 - v00)
    bot = v10 + wx * (v11 - v10)
    out = (top + wy * (bot - top)).reshape((C,) + x.shape)
    return torch.where(inside, out, torch.zeros_like(out)), inside


def bilinear_sample(img, q):
    """Sample ``img`` (``(C, H, W)`` or ``(H, W)``) at one coordinate ``q = (x, y)``.

    Returns ``(values, inside)``; values are 0 when ``inside`` is False.
    """
    arr = as_tensor(img)
    single = arr.ndim == 2
    if single:
        arr = arr[None]
    x = torch.tensor([float(q[0])], dtype=DTYPE)
    y = torch.tensor([float(q[1])], dtype=DTYPE)
    vals, inside = sample_bilinear(arr, x, y)
    vals = vals[:, 0].numpy()
    return (float(vals[0]) if single else vals), bool(inside[0])


def warp_image(I_s, D_t, T: PoseSE3, K: Intrinsics):
    """Inverse-warp the source image into the target view.

    Returns ``(warped, valid)`` where ``valid`` marks pixels whose projection
    lands inside the source image in front of the camera.
    """
    img = as_tensor(I_s)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[None]
    depth = as_tensor(D_t)
    if depth.shape != img.shape[1:] or depth.shape != K.shape:
        raise GeometryError(f"shape mismatch: image {tuple(img.shape)}, depth {tuple(depth.shape)}, K {K.shape}")
    R, t = pose_tensors(T)
    x, y, _, in_front = reproject(depth, R, t, K)
    warped, inside = sample_bilinear(img, x, y)
    valid = inside & in_front
    warped = torch.where(valid, warped, torch.zeros_like(warped))
    if squeeze:
        warped = warped[0]
    return _numpy_out(I_s, warped), _numpy_out(I_s, valid)


# --------------------------------------------------------------------------
# Normals
# --------------------------------------------------------------------------


def _cross(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return torch.linalg.cross(a, b, dim=0)


def _unit(v: torch.Tensor, eps: float = 1e-12):
    n = torch.sqrt((v * v).sum(0, keepdim=True))
    ok = n > eps
    return torch.where(ok, v / torch.where(ok, n, torch.ones_like(n)), torch.zeros_like(v)), ok[0]


def face_camera(normals: torch.Tensor, points: torch.Tensor) -> torch.Tensor:
    """Flip normals so that ``n . ray <= 0`` for the viewing ray to ``points``."""
    s = (normals * points).sum(0, keepdim=True)
    return torch.where(s > 0, -normals, normals)


def normals_from_depth(D, K: Intrinsics):
    """Camera-facing normals from neighbour cross products of a depth map.

    Two estimates are averaged: the cross product of the two diagonal
    difference vectors and that of the horizontal/vertical central
    differences. Border pixels use replicated neighbours. Degenerate pixels
    fall back to ``(0, 0, -1)``.
    """
    depth = as_tensor(D)
    if torch.any(depth <= 0) or not torch.all(torch.isfinite(depth)):
        raise GeometryError("depth must be positive and finite")
    P = backproject_map(depth, K)
    Pp = torch.nn.functional.pad(P[None], (1, 1, 1, 1), mode="replicate")[0]
    c = slice(1, -1)
    up, down = Pp[:, :-2, c], Pp[:, 2:, c]
    left, right = Pp[:, c, :-2], Pp[:, c, 2:]
    tl, br = Pp[:, :-2, :-2], Pp[:, 2:, 2:]
    tr, bl = Pp[:, :-2, 2:], Pp[:, 2:, :-2]
    n1, ok1 = _unit(face_camera(_cross(right - left, down - up), P))
    n2, ok2 = _unit(face_camera(_cross(tl - br, tr - bl), P))
    n, ok = _unit(n1 * ok1 + n2 * ok2)
    fallback = torch.tensor([0.0, 0.0, -1.0], dtype=DTYPE)[:, None, None].expand_as(n)
    n = torch.where(ok[None], n, fallback)
    return _numpy_out(D, n)
