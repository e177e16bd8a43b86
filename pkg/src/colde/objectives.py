"""Self-supervised depth/normal objectives over a target/source frame pair.

Per-pixel terms (photometric, feature, depth consistency, normal
consistency) are averaged over the combined mask; orthogonality and
edge-aware smoothness are global priors averaged over both views. All terms
are built from differentiable float64 torch ops so :mod:`colde.differentiation`
can take gradients through exactly the code evaluated here.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Optional

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .geometry import (
    DTYPE,
    Intrinsics,
    PoseSE3,
    as_tensor,
    backproject_map,
    pose_tensors,
    reproject,
    sample_bilinear,
)

N_FEATURES = 64
FEATURE_KERNEL = 7
FEATURE_SEED = 20220913


class ObjectiveError(ValueError):
    """A loss was called with inputs violating its contract."""


@dataclass
class LossWeights:
    """Weights and knobs of the total objective.

    Defaults are the fine-tuning weights (``lambda1..5``) and ``alpha = 0.85``.
    """

    alpha: float = 0.85
    lambda1: float = 0.1  # feature similarity
    lambda2: float = 0.1  # depth consistency
    lambda3: float = 0.005  # normal consistency
    lambda4: float = 0.001  # depth/normal orthogonality
    lambda5: float = 0.01  # edge-aware smoothness
    ssim_c1: float = 0.01**2
    ssim_c2: float = 0.03**2
    spec_threshold: float = 0.95
    spec_dilate: int = 2

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not np.isfinite(v) or v < 0:
                raise ObjectiveError(f"{f.name} must be finite and non-negative, got {v}")
        if self.alpha > 1:
            raise ObjectiveError(f"alpha must lie in [0, 1], got {self.alpha}")
        self.spec_dilate = int(self.spec_dilate)

    def lambdas(self) -> tuple[float, float, float, float, float]:
        return (self.lambda1, self.lambda2, self.lambda3, self.lambda4, self.lambda5)

    def with_lambdas(self, value: float) -> "LossWeights":
        """Copy with every ``lambda`` set to ``value``."""
        return replace(self, lambda1=value, lambda2=value, lambda3=value, lambda4=value, lambda5=value)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LossWeights":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ObjectiveError(f"unknown loss weight fields: {sorted(unknown)}")
        return cls(**d)

    def to_json(self, path: Optional[Path] = None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            Path(path).write_text(text + "\n")
        return text

    @classmethod
    def from_json(cls, source) -> "LossWeights":
        """Load from a JSON string or a path to a JSON file."""
        p = Path(source) if not str(source).lstrip().startswith("{") else None
        text = p.read_text() if p is not None else str(source)
        return cls.from_dict(json.loads(text))


# --------------------------------------------------------------------------
# Features
# --------------------------------------------------------------------------


_KERNEL_CACHE: dict[int, torch.Tensor] = {}


def feature_kernels(seed: int = FEATURE_SEED) -> torch.Tensor:
    """The frozen ``(64, 1, 7, 7)`` zero-mean, unit-norm filter bank."""
    if seed not in _KERNEL_CACHE:
        rng = np.random.default_rng(seed)
        k = rng.standard_normal((N_FEATURES, FEATURE_KERNEL, FEATURE_KERNEL))
        k -= k.mean(axis=(1, 2), keepdims=True)
        k /= np.linalg.norm(k, axis=(1, 2), keepdims=True)
        _KERNEL_CACHE[seed] = torch.as_tensor(k[:, None], dtype=DTYPE)
    return _KERNEL_CACHE[seed]


def _to_chw(img) -> torch.Tensor:
    t = as_tensor(img)
    if t.ndim == 2:
        t = t[None]
    if t.ndim != 3:
        raise ObjectiveError(f"expected (C, H, W) or (H, W) image, got shape {tuple(t.shape)}")
    return t


def feature_extract(img, *, upsample: bool = True, normalize: bool = True, seed: int = FEATURE_SEED):
    """64-channel feature maps from a fixed stride-2 convolution bank.

    The image is reduced to its channel mean, reflection padded and
    convolved with :func:`feature_kernels` at stride 2. With ``normalize``
    each channel is min-max scaled to ``[0, 1]`` (constant channels become 0).
    With ``upsample`` the maps are bilinearly resampled back to the input
    resolution, sample ``(x, y)`` reading the stride-2 grid at ``(x/2, y/2)``.
    """
    x = _to_chw(img)
    if x.shape[0] not in (1, 3):
        raise ObjectiveError(f"feature extraction expects 1 or 3 channels, got {x.shape[0]}")
    gray = x.mean(0, keepdim=True)[None]
    pad = FEATURE_KERNEL // 2
    feats = F.conv2d(F.pad(gray, (pad, pad, pad, pad), mode="reflect"), feature_kernels(seed), stride=2)[0]
    if normalize:
        lo = feats.amin(dim=(1, 2), keepdim=True)
        span = feats.amax(dim=(1, 2), keepdim=True) - lo
        feats = torch.where(span > 1e-12, (feats - lo) / torch.where(span > 1e-12, span, 1.0), 0.0)
    if upsample:
        H, W = x.shape[1:]
        hf, wf = feats.shape[1:]
        ys, xs = torch.meshgrid(
            torch.arange(H, dtype=DTYPE) / 2, torch.arange(W, dtype=DTYPE) / 2, indexing="ij"
        )
        feats, _ = sample_bilinear(feats, xs.clamp(max=wf - 1), ys.clamp(max=hf - 1))
    return feats.numpy() if not isinstance(img, torch.Tensor) else feats


# --------------------------------------------------------------------------
# Frame pair
# --------------------------------------------------------------------------


@dataclass
class FramePair:
    """Everything the objectives consume for one target/source pair.

    Images are ``(C, H, W)``, depths ``(H, W)``, normals ``(3, H, W)``.
    Features default to :func:`feature_extract` of the images.
    """

    target: Any
    source: Any
    target_depth: Any
    source_depth: Any
    target_normals: Any
    source_normals: Any
    pose_t_to_s: PoseSE3
    intrinsics: Intrinsics
    target_features: Any = None
    source_features: Any = None
    feature_channel: int = 0

    def __post_init__(self):
        self.target = _to_chw(self.target).numpy() if not isinstance(self.target, torch.Tensor) else self.target
        self.source = _to_chw(self.source).numpy() if not isinstance(self.source, torch.Tensor) else self.source
        if self.target_features is None:
            self.target_features = feature_extract(self.target)
        if self.source_features is None:
            self.source_features = feature_extract(self.source)
        self.validate()

    def validate(self):
        shape = self.intrinsics.shape
        checks = {
            "target": (self.target, 3),
            "source": (self.source, 3),
            "target_depth": (self.target_depth, 2),
            "source_depth": (self.source_depth, 2),
            "target_normals": (self.target_normals, 3),
            "source_normals": (self.source_normals, 3),
            "target_features": (self.target_features, 3),
            "source_features": (self.source_features, 3),
        }
        for name, (arr, ndim) in checks.items():
            s = tuple(arr.shape)
            if len(s) != ndim or s[-2:] != shape:
                raise ObjectiveError(f"{name} has shape {s}, expected spatial size {shape}")
        if tuple(self.target.shape) != tuple(self.source.shape):
            raise ObjectiveError("target and source images differ in shape")
        if self.target_normals.shape[0] != 3 or self.source_normals.shape[0] != 3:
            raise ObjectiveError("normal fields must have 3 channels")
        n_feat = self.target_features.shape[0]
        if not 0 <= int(self.feature_channel) < n_feat:
            raise ObjectiveError(f"feature_channel {self.feature_channel} outside [0, {n_feat})")
        for name in ("target_depth", "source_depth"):
            d = as_tensor(getattr(self, name))
            if not (torch.all(d > 0) and torch.all(torch.isfinite(d))):
                raise ObjectiveError(f"{name} must be positive and finite")

    def with_(self, **changes) -> "FramePair":
        """Copy with fields replaced; features are kept unless given."""
        return replace(self, **changes)

    def swapped(self) -> "FramePair":
        """The same pair with target and source roles exchanged."""
        return FramePair(
            self.source,
            self.target,
            self.source_depth,
            self.target_depth,
            self.source_normals,
            self.target_normals,
            self.pose_t_to_s.inverse(),
            self.intrinsics,
            self.source_features,
            self.target_features,
            self.feature_channel,
        )


@dataclass
class LossBreakdown:
    photo: float
    feat: float
    depth: float
    norm: float
    orth: float
    smooth: float
    total: float
    masked_pixel_count: int
    empty_mask: bool = False

    def recombine(self, w: LossWeights) -> float:
        """The weighted total recomputed from the parts."""
        return (
            self.photo
            + w.lambda1 * self.feat
            + w.lambda2 * self.depth
            + w.lambda3 * self.norm
            + w.lambda4 * self.orth
            + w.lambda5 * self.smooth
        )

    def to_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------
# Per-pixel terms
# --------------------------------------------------------------------------


def ssim(a, b, c1: float = 0.01**2, c2: float = 0.03**2):
    """Per-pixel SSIM over 3x3 uniform windows with reflection padding.

    Multi-channel inputs give the channel mean of the per-channel maps.
    """
    x, y = _to_chw(a), _to_chw(b)
    if x.shape != y.shape:
        raise ObjectiveError(f"ssim shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    x = F.pad(x[None], (1, 1, 1, 1), mode="reflect")
    y = F.pad(y[None], (1, 1, 1, 1), mode="reflect")
    mu_x = F.avg_pool2d(x, 3, 1)
    mu_y = F.avg_pool2d(y, 3, 1)
    sxx = F.avg_pool2d(x * x, 3, 1) - mu_x * mu_x
    syy = F.avg_pool2d(y * y, 3, 1) - mu_y * mu_y
    sxy = F.avg_pool2d(x * y, 3, 1) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (sxx + syy + c2)
    out = (num / den)[0].mean(0)
    return out if isinstance(a, torch.Tensor) or isinstance(b, torch.Tensor) else out.numpy()


def photometric_map(warped, target, w: LossWeights) -> torch.Tensor:
    """``(1 - a)|warped - target|_1 + a/2 (1 - SSIM)``, channel averaged."""
    warped, target = _to_chw(warped), _to_chw(target)
    l1 = (warped - target).abs().mean(0)
    s = ssim(warped, target, w.ssim_c1, w.ssim_c2)
    return (1 - w.alpha) * l1 + 0.5 * w.alpha * (1 - s)


def specular_mask(img, w: LossWeights) -> np.ndarray:
    """Keep-mask that drops saturated pixels dilated by ``spec_dilate`` pixels."""
    x = _to_chw(img).detach().numpy()
    hot = x.max(axis=0) > w.spec_threshold
    if w.spec_dilate > 0 and hot.any():
        size = 2 * w.spec_dilate + 1
        hot = ndimage.binary_dilation(hot, structure=np.ones((size, size), dtype=bool))
    return ~hot


def surface_vectors(D, K: Intrinsics, p=None):
    """Diagonal surface vectors from backprojected neighbours.

    Without ``p`` returns two ``(3, H-2, W-2)`` maps over interior pixels:
    top-left minus bottom-right and top-right minus bottom-left. With
    ``p = (x, y)`` returns the two 3-vectors at that pixel.
    """
    depth = as_tensor(D)
    H, W = depth.shape
    if p is not None:
        x, y = int(p[0]), int(p[1])
        if not (1 <= x < W - 1 and 1 <= y < H - 1):
            raise ObjectiveError(f"pixel {p} lies on the border; no surface vectors")
    P = backproject_map(depth, K)
    v1 = P[:, :-2, :-2] - P[:, 2:, 2:]
    v2 = P[:, :-2, 2:] - P[:, 2:, :-2]
    if p is not None:
        out = (v1[:, y - 1, x - 1], v2[:, y - 1, x - 1])
    else:
        out = (v1, v2)
    if isinstance(D, torch.Tensor):
        return out
    return tuple(v.numpy() for v in out)


def _orthogonality(depth: torch.Tensor, normals: torch.Tensor, K: Intrinsics) -> torch.Tensor:
    H, W = depth.shape
    if H < 3 or W < 3:
        return depth.new_zeros(())
    v1, v2 = surface_vectors(depth, K)
    n = normals[:, 1:-1, 1:-1]
    terms = []
    for v in (v1, v2):
        vhat = v / torch.sqrt((v * v).sum(0, keepdim=True))
        terms.append((n * vhat).sum(0).abs())
    return torch.stack(terms).mean()


def orthogonality_loss(D, N, K: Intrinsics):
    """Mean ``|N(p) . V(p)/|V(p)||`` over interior pixels and both diagonals."""
    out = _orthogonality(as_tensor(D), as_tensor(N), K)
    return out if isinstance(D, torch.Tensor) or isinstance(N, torch.Tensor) else float(out)


def _smoothness(depth: torch.Tensor, img: torch.Tensor) -> torch.Tensor:
    disp = 1.0 / depth
    disp = disp / disp.mean()
    gx = (disp[:, 1:] - disp[:, :-1]).abs()
    gy = (disp[1:, :] - disp[:-1, :]).abs()
    ix = (img[:, :, 1:] - img[:, :, :-1]).abs().mean(0)
    iy = (img[:, 1:, :] - img[:, :-1, :]).abs().mean(0)
    return (gx * torch.exp(-ix)).mean() + (gy * torch.exp(-iy)).mean()


def smoothness_loss(D, I):
    """Edge-aware smoothness of mean-normalised inverse depth."""
    out = _smoothness(as_tensor(D), _to_chw(I))
    return out if isinstance(D, torch.Tensor) else float(out)


# --------------------------------------------------------------------------
# Pair evaluation
# --------------------------------------------------------------------------


@dataclass
class PairTerms:
    """Tensors of one pair evaluation; per-pixel maps are ``(H, W)``."""

    photo: torch.Tensor
    feat: torch.Tensor
    depth: torch.Tensor
    norm: torch.Tensor
    orth: torch.Tensor
    smooth: torch.Tensor
    valid: torch.Tensor
    auto: torch.Tensor
    spec: torch.Tensor
    mask: torch.Tensor
    extras: dict = field(default_factory=dict)


def _static_inputs(pair: FramePair, w: LossWeights) -> dict:
    """Depth-independent tensors of a pair, cached on the instance."""
    key = (w.alpha, w.ssim_c1, w.ssim_c2, w.spec_threshold, w.spec_dilate)
    cache = pair.__dict__.setdefault("_static_cache", {})
    if key not in cache:
        I_t, I_s = _to_chw(pair.target).detach(), _to_chw(pair.source).detach()
        cache.clear()
        cache[key] = {
            "target": I_t,
            "source": I_s,
            "target_features": as_tensor(pair.target_features).detach(),
            "source_features": as_tensor(pair.source_features).detach(),
            "identity_photo": photometric_map(I_s, I_t, w).detach(),
            "target_spec": torch.as_tensor(specular_mask(I_t, w)),
            "source_hot": torch.as_tensor(~specular_mask(I_s, w), dtype=DTYPE)[None],
        }
        cache[key]["source_has_hot"] = bool(cache[key]["source_hot"].any())
    return cache[key]


def evaluate_pair(
    pair: FramePair,
    w: LossWeights,
    *,
    target_depth=None,
    source_depth=None,
    target_normals=None,
    source_normals=None,
    rotation=None,
    translation=None,
    feature_channel=None,
    mask=None,
    priors: bool = True,
) -> PairTerms:
    """Evaluate every term of ``pair``.

    Keyword overrides replace the corresponding pair fields (typically by
    tensors that require grad). ``mask`` freezes the combined mask instead of
    recomputing it; masks never carry gradient. ``priors=False`` skips the
    orthogonality and smoothness terms (returned as 0) for callers that
    evaluate them once per frame.
    """
    K = pair.intrinsics
    d_t = as_tensor(pair.target_depth if target_depth is None else target_depth)
    d_s = as_tensor(pair.source_depth if source_depth is None else source_depth)
    n_t = as_tensor(pair.target_normals if target_normals is None else target_normals)
    n_s = as_tensor(pair.source_normals if source_normals is None else source_normals)
    R0, t0 = pose_tensors(pair.pose_t_to_s)
    R = R0 if rotation is None else rotation
    t = t0 if translation is None else translation
    static = _static_inputs(pair, w)
    I_t, I_s = static["target"], static["source"]
    c = int(pair.feature_channel if feature_channel is None else feature_channel)
    if not 0 <= c < static["target_features"].shape[0]:
        raise ObjectiveError(f"feature channel {c} out of range")
    f_t = static["target_features"][c : c + 1]
    f_s = static["source_features"][c : c + 1]

    x, y, d_proj, in_front = reproject(d_t, R, t, K)
    nc = I_s.shape[0]
    stack = torch.cat([I_s, f_s, d_s[None], n_s])
    sampled, inside = sample_bilinear(stack, x, y)
    warped = sampled[:nc]
    f_warp = sampled[nc : nc + 1]
    d_samp = sampled[nc + 1]
    n_samp = sampled[nc + 2 :]
    valid = inside & in_front

    photo = photometric_map(warped, I_t, w)
    feat = 0.5 * w.alpha * (1 - ssim(f_warp, f_t, w.ssim_c1, w.ssim_c2))
    # invalid pixels sample 0; keep the ratio finite there (they are masked)
    d_samp_safe = torch.where(valid, d_samp, d_proj.detach().abs() + 1.0)
    depth = (d_samp_safe - d_proj).abs() / (d_samp_safe + d_proj)
    depth = torch.where(valid, depth, torch.zeros_like(depth))
    n_rot = torch.einsum("ij,jhw->ihw", R, n_t)
    norm = (n_samp - n_rot).abs().sum(0)

    if priors:
        orth = 0.5 * (_orthogonality(d_t, n_t, K) + _orthogonality(d_s, n_s, K))
        smooth = 0.5 * (_smoothness(d_t, I_t) + _smoothness(d_s, I_s))
    else:
        orth = smooth = d_t.new_zeros(())

    with torch.no_grad():
        if mask is None:
            auto = photo.detach() < static["identity_photo"]
            spec = static["target_spec"]
            if static["source_has_hot"]:
                hot_warp, _ = sample_bilinear(static["source_hot"], x.detach(), y.detach())
                spec = spec & (hot_warp[0] < 1e-9)
            combined = auto & spec & valid
        else:
            combined = torch.as_tensor(np.asarray(mask) if not isinstance(mask, torch.Tensor) else mask).bool()
            if combined.shape != valid.shape:
                raise ObjectiveError(f"mask shape {tuple(combined.shape)} != {tuple(valid.shape)}")
            auto = spec = combined
    return PairTerms(
        photo, feat, depth, norm, orth, smooth, valid, auto, spec, combined,
        extras={"warped": warped, "x": x, "y": y, "projected_depth": d_proj},
    )


def masked_mean(values: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    n = int(mask.sum())
    if n == 0:
        return values.sum() * 0.0
    return torch.where(mask, values, torch.zeros_like(values)).sum() / n


def combine(terms: PairTerms, w: LossWeights) -> tuple[torch.Tensor, LossBreakdown]:
    """Weighted total of one evaluation as a tensor plus its float breakdown."""
    m = terms.mask
    photo = masked_mean(terms.photo, m)
    feat = masked_mean(terms.feat, m)
    depth = masked_mean(terms.depth, m)
    norm = masked_mean(terms.norm, m)
    total = (
        photo
        + w.lambda1 * feat
        + w.lambda2 * depth
        + w.lambda3 * norm
        + w.lambda4 * terms.orth
        + w.lambda5 * terms.smooth
    )
    count = int(m.sum())
    breakdown = LossBreakdown(
        float(photo.detach()), float(feat.detach()), float(depth.detach()), float(norm.detach()),
        float(terms.orth.detach()), float(terms.smooth.detach()), float(total.detach()), count, count == 0,
    )
    return total, breakdown


def total_loss(pair: FramePair, w: Optional[LossWeights] = None, mask=None) -> LossBreakdown:
    """Weighted sum of all objectives for one pair.

    The per-pixel group is averaged over ``M = M_auto & M_spec & M_valid``;
    if that mask is empty the group contributes 0 and ``empty_mask`` is set.
    """
    w = w or LossWeights()
    with torch.no_grad():
        _, breakdown = combine(evaluate_pair(pair, w, mask=mask), w)
    return breakdown


def _map(pair: FramePair, w: Optional[LossWeights], name: str) -> np.ndarray:
    with torch.no_grad():
        terms = evaluate_pair(pair, w or LossWeights())
    return getattr(terms, name).numpy()


def photometric_loss(pair: FramePair, w: Optional[LossWeights] = None) -> np.ndarray:
    """Per-pixel appearance loss between the warped source and the target."""
    return _map(pair, w, "photo")


def feature_loss(pair: FramePair, w: Optional[LossWeights] = None) -> np.ndarray:
    """Per-pixel SSIM-only loss on the pair's selected feature channel."""
    return _map(pair, w, "feat")


def depth_consistency_loss(pair: FramePair, w: Optional[LossWeights] = None) -> np.ndarray:
    """``|D_s<p_s> - d_s| / (D_s<p_s> + d_s)`` per pixel (0 where invalid)."""
    return _map(pair, w, "depth")


def normal_consistency_loss(pair: FramePair, w: Optional[LossWeights] = None) -> np.ndarray:
    """L1 distance between sampled source normals and rotated target normals."""
    return _map(pair, w, "norm")


def auto_mask(pair: FramePair, w: Optional[LossWeights] = None) -> np.ndarray:
    """Pixels where warping beats the unwarped source photometrically."""
    return _map(pair, w, "auto")


def valid_mask(pair: FramePair) -> np.ndarray:
    return _map(pair, None, "valid")


def combined_mask(pair: FramePair, w: Optional[LossWeights] = None) -> np.ndarray:
    return _map(pair, w, "mask")


def depth_ratio_loss(sampled, projected):
    """Scalar form of the depth-consistency ratio, for direct checks."""
    a, b = as_tensor(sampled), as_tensor(projected)
    out = (a - b).abs() / (a + b)
    return out.numpy() if not isinstance(sampled, torch.Tensor) else out
