"""Gradients of the pair objective and a finite-difference oracle.

Analytic gradients come from reverse-mode autodiff through
:func:`colde.objectives.evaluate_pair`. The oracle only ever calls the
forward evaluation on perturbed numpy inputs, so the two routes share the
loss definition and nothing else. Masks are evaluated once at the
unperturbed point and held fixed on both routes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Optional

import numpy as np
import torch

from scipy.ndimage import gaussian_filter

from .geometry import Intrinsics, PoseSE3, as_tensor, pose_tensors, torch_se3_exp
from .objectives import FramePair, LossWeights, combine, evaluate_pair, masked_mean

WRT_CHOICES = ("depth", "normals", "pose", "all")
TERMS = ("total", "photo", "feat", "depth", "norm", "orth", "smooth")


class GradientError(RuntimeError):
    """A non-finite value appeared while differentiating."""


@dataclass
class GradientBundle:
    """Gradients of the pair total; ``None`` for fields not requested.

    ``d_pose`` is taken w.r.t. a left perturbation ``exp(xi) o T`` at
    ``xi = 0`` with ``xi = (omega, v)``.
    """

    loss_value: float
    d_depth: Optional[np.ndarray] = None
    d_source_depth: Optional[np.ndarray] = None
    d_normals: Optional[np.ndarray] = None
    d_source_normals: Optional[np.ndarray] = None
    d_pose: Optional[np.ndarray] = None

    def flat(self) -> np.ndarray:
        parts = [
            p.ravel()
            for p in (self.d_depth, self.d_source_depth, self.d_normals, self.d_source_normals, self.d_pose)
            if p is not None
        ]
        return np.concatenate(parts) if parts else np.zeros(0)


def random_pair(size: int = 16, seed: int = 0, channel: int = 5) -> FramePair:
    """A seeded random pair for gradient checks.

    Images are blurred noise, depths lie in ``[2, 3]``, normals point
    towards the camera and the pose is a small generic motion.
    """
    rng = np.random.default_rng(seed)
    K = Intrinsics.centered(size, size, 0.875 * size)

    def image():
        return np.repeat(gaussian_filter(rng.uniform(size=(size, size)), 1.0)[None], 3, axis=0)

    def normals():
        n = rng.normal(size=(3, size, size))
        n[2] = -np.abs(n[2]) - 0.5
        return n / np.linalg.norm(n, axis=0, keepdims=True)

    xi = rng.uniform(-1, 1, 6) * np.array([0.02, 0.02, 0.02, 0.05, 0.05, 0.05])
    return FramePair(
        image(), image(), rng.uniform(2, 3, (size, size)), rng.uniform(2, 3, (size, size)),
        normals(), normals(), PoseSE3.exp(xi), K, feature_channel=channel,
    )


def _wants(wrt: str) -> tuple[bool, bool, bool]:
    if wrt not in WRT_CHOICES:
        raise ValueError(f"wrt must be one of {WRT_CHOICES}, got {wrt!r}")
    return wrt in ("depth", "all"), wrt in ("normals", "all"), wrt in ("pose", "all")


def frozen_mask(pair: FramePair, w: LossWeights) -> torch.Tensor:
    """The combined mask at the pair's current values."""
    with torch.no_grad():
        return evaluate_pair(pair, w).mask


def _check_finite(terms, names: Iterable[str]):
    for name in names:
        v = getattr(terms, name)
        sel = v[terms.mask] if v.ndim == 2 else v
        if not torch.all(torch.isfinite(sel)):
            raise GradientError(f"non-finite values in term {name!r}")


def term_value(terms, w: LossWeights, term: str = "total") -> torch.Tensor:
    """The weighted total, or one unweighted term, of an evaluation."""
    if term == "total":
        return combine(terms, w)[0]
    if term in ("orth", "smooth"):
        return getattr(terms, term)
    if term in TERMS:
        return masked_mean(getattr(terms, term), terms.mask)
    raise ValueError(f"term must be one of {TERMS}, got {term!r}")


def grad_total_loss(
    pair: FramePair, w: Optional[LossWeights] = None, wrt: str = "all", mask=None, term: str = "total"
) -> GradientBundle:
    """Exact gradient of the pair total loss.

    Args:
        pair: Inputs at which to differentiate.
        w: Loss weights (defaults when omitted).
        wrt: ``"depth"``, ``"normals"``, ``"pose"`` or ``"all"``.
        mask: Combined mask to hold fixed; computed at ``pair`` when omitted.
        term: Differentiate one unweighted term instead of the total.
    """
    w = w or LossWeights()
    want_d, want_n, want_p = _wants(wrt)
    if mask is None:
        mask = frozen_mask(pair, w)
    d_t = as_tensor(pair.target_depth).detach().clone().requires_grad_(want_d)
    d_s = as_tensor(pair.source_depth).detach().clone().requires_grad_(want_d)
    n_t = as_tensor(pair.target_normals).detach().clone().requires_grad_(want_n)
    n_s = as_tensor(pair.source_normals).detach().clone().requires_grad_(want_n)
    R0, t0 = pose_tensors(pair.pose_t_to_s)
    xi = torch.zeros(6, dtype=R0.dtype, requires_grad=want_p)
    dR, dt = torch_se3_exp(xi)
    R = dR @ R0
    t = dR @ t0 + dt

    terms = evaluate_pair(
        pair, w, target_depth=d_t, source_depth=d_s, target_normals=n_t,
        source_normals=n_s, rotation=R, translation=t, mask=mask,
    )
    _check_finite(terms, ("photo", "feat", "depth", "norm", "orth", "smooth"))
    total = term_value(terms, w, term)
    leaves = [x for x, on in ((d_t, want_d), (d_s, want_d), (n_t, want_n), (n_s, want_n), (xi, want_p)) if on]
    grads = torch.autograd.grad(total, leaves, allow_unused=True)
    grads = [torch.zeros_like(l) if g is None else g for g, l in zip(grads, leaves)]
    for g in grads:
        if not torch.all(torch.isfinite(g)):
            raise GradientError("non-finite gradient")
    out = iter(g.detach().numpy() for g in grads)
    bundle = GradientBundle(float(total.detach()))
    if want_d:
        bundle.d_depth, bundle.d_source_depth = next(out), next(out)
    if want_n:
        bundle.d_normals, bundle.d_source_normals = next(out), next(out)
    if want_p:
        bundle.d_pose = next(out)
    return bundle


def central_difference(f: Callable[[np.ndarray], float], x, step) -> np.ndarray:
    """Coordinate-wise central differences of a scalar function.

    ``step`` may be a scalar or an array of per-coordinate steps.
    """
    x = np.array(x, dtype=np.float64)
    flat = x.ravel()
    h = np.broadcast_to(np.asarray(step, dtype=np.float64), x.shape).ravel()
    g = np.empty_like(flat)
    for i in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += h[i]
        xm[i] -= h[i]
        g[i] = (f(xp.reshape(x.shape)) - f(xm.reshape(x.shape))) / (2 * h[i])
    return g.reshape(x.shape)


def _pair_loss(pair: FramePair, w: LossWeights, mask, term: str = "total", **overrides) -> float:
    with torch.no_grad():
        return float(term_value(evaluate_pair(pair, w, mask=mask, **overrides), w, term))


def fd_gradient(
    pair: FramePair, w: Optional[LossWeights] = None, wrt: str = "all", step: float = 1e-5, mask=None, term: str = "total"
) -> GradientBundle:
    """Central finite-difference gradient of the pair total loss.

    Field coordinates use a step of ``step * max(|value|, 1)``; pose
    tangent coordinates use ``step``. Cost is two loss evaluations per
    coordinate, so keep instances small (32x32 or less).
    """
    if not step > 0:
        raise ValueError("step must be positive")
    w = w or LossWeights()
    want_d, want_n, want_p = _wants(wrt)
    if mask is None:
        mask = frozen_mask(pair, w)
    base = dict(
        target_depth=np.asarray(as_tensor(pair.target_depth).detach()),
        source_depth=np.asarray(as_tensor(pair.source_depth).detach()),
        target_normals=np.asarray(as_tensor(pair.target_normals).detach()),
        source_normals=np.asarray(as_tensor(pair.source_normals).detach()),
    )

    def field_grad(name):
        x0 = base[name]

        def f(x):
            return _pair_loss(pair, w, mask, term, **{name: x})

        return central_difference(f, x0, step * np.maximum(np.abs(x0), 1.0))

    bundle = GradientBundle(_pair_loss(pair, w, mask, term))
    if want_d:
        bundle.d_depth = field_grad("target_depth")
        bundle.d_source_depth = field_grad("source_depth")
    if want_n:
        bundle.d_normals = field_grad("target_normals")
        bundle.d_source_normals = field_grad("source_normals")
    if want_p:
        T0 = pair.pose_t_to_s

        def f_pose(xi):
            T = PoseSE3.exp(xi) @ T0
            R, t = pose_tensors(T)
            return _pair_loss(pair, w, mask, term, rotation=R, translation=t)

        bundle.d_pose = central_difference(f_pose, np.zeros(6), step)
    return bundle


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6, resolution: float = 0.0) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, floor * max|n|, resolution)`` elementwise.

    ``resolution`` is the smallest gradient magnitude the finite-difference
    oracle can resolve to the requested relative accuracy; below it the
    error is effectively measured in absolute terms.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor * max(np.abs(n).max(initial=0.0), 1e-300))
    scale = np.maximum(scale, resolution)
    return np.abs(a - n) / scale


def fd_resolution(loss_value: float, step, tolerance: float) -> np.ndarray:
    """Gradient magnitude below which central-difference rounding exceeds ``tolerance``.

    Two loss evaluations of size ``|f|`` each carry rounding of order
    ``eps |f|``, so the difference quotient is uncertain by about
    ``4 eps |f| / h``.
    """
    noise = 4.0 * np.finfo(np.float64).eps * abs(loss_value) / np.asarray(step, dtype=np.float64)
    return noise / tolerance


def cell_boundary_exclusion(pair: FramePair, w: LossWeights, step: float = 1e-5, margin: float = 1e-3, mask=None) -> dict:
    """Coordinates whose finite-difference stencil meets a bilinear kink.

    Returns boolean arrays (True = exclude) keyed like :class:`GradientBundle`
    fields. A target-depth coordinate is excluded when its projected pixel
    lies within ``margin`` of a cell boundary or changes cell across the
    stencil. A pose coordinate is excluded when any masked pixel changes
    cell across its stencil. Source fields are sampled linearly and never
    excluded.
    """
    if mask is None:
        mask = frozen_mask(pair, w)
    m = np.asarray(mask)
    d0 = np.asarray(as_tensor(pair.target_depth).detach())

    def cells(**kw):
        with torch.no_grad():
            terms = evaluate_pair(pair, w, mask=mask, **kw)
        x, y = terms.extras["x"].numpy(), terms.extras["y"].numpy()
        return x, y

    x0, y0 = cells()
    near = lambda v: np.abs(v - np.round(v)) < margin  # noqa: E731
    h = step * np.maximum(np.abs(d0), 1.0)
    xp, yp = cells(target_depth=d0 + h)
    xm, ym = cells(target_depth=d0 - h)
    moved = (np.floor(xp) != np.floor(xm)) | (np.floor(yp) != np.floor(ym))
    ex_depth = (near(x0) | near(y0) | moved) & m

    ex_pose = np.zeros(6, dtype=bool)
    for i in range(6):
        e = np.zeros(6)
        e[i] = step
        out = []
        for sgn in (1.0, -1.0):
            R, t = pose_tensors(PoseSE3.exp(sgn * e) @ pair.pose_t_to_s)
            out.append(cells(rotation=R, translation=t))
        (xa, ya), (xb, yb) = out
        crossed = ((np.floor(xa) != np.floor(xb)) | (np.floor(ya) != np.floor(yb))) & m
        ex_pose[i] = bool(crossed.any())
    shape = d0.shape
    return {
        "d_depth": ex_depth,
        "d_source_depth": np.zeros(shape, dtype=bool),
        "d_normals": np.zeros((3,) + shape, dtype=bool),
        "d_source_normals": np.zeros((3,) + shape, dtype=bool),
        "d_pose": ex_pose,
    }


@dataclass
class GradCheckResult:
    max_rel_error: dict
    excluded: dict
    passed: bool
    tolerance: float


def check_gradients(
    pair: FramePair,
    w: Optional[LossWeights] = None,
    wrt: str = "all",
    step: float = 1e-5,
    tolerance: float = 1e-4,
    term: str = "total",
) -> GradCheckResult:
    """Compare :func:`grad_total_loss` with :func:`fd_gradient` field by field."""
    w = w or LossWeights()
    mask = frozen_mask(pair, w)
    ga = grad_total_loss(pair, w, wrt, mask=mask, term=term)
    gn = fd_gradient(pair, w, wrt, step, mask=mask, term=term)
    excl = cell_boundary_exclusion(pair, w, step, mask=mask)
    errs, excluded = {}, {}
    fields = {
        "d_depth": pair.target_depth,
        "d_source_depth": pair.source_depth,
        "d_normals": pair.target_normals,
        "d_source_normals": pair.source_normals,
    }
    for name in ("d_depth", "d_source_depth", "d_normals", "d_source_normals", "d_pose"):
        a, n = getattr(ga, name), getattr(gn, name)
        if a is None:
            continue
        keep = ~excl[name]
        if name == "d_pose":
            h = step
        else:
            h = step * np.maximum(np.abs(np.asarray(as_tensor(fields[name]).detach())), 1.0)
        rel = relative_error(a, n, resolution=fd_resolution(gn.loss_value, h, tolerance))
        errs[name] = float(rel[keep].max()) if keep.any() else 0.0
        excluded[name] = int((~keep).sum())
    passed = all(v < tolerance for v in errs.values())
    return GradCheckResult(errs, excluded, passed, tolerance)
