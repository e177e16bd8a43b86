"""Command-line entry point: synth, perturb, loss, check-grad, refine, eval, fuse, config init.

Every failure ends the process with a nonzero status and a single JSON line
on stderr, ``{"error": <kind>, "message": <text>}``, where ``kind`` is one of
``missing_file``, ``shape_mismatch``, ``malformed_manifest``,
``malformed_file``, ``invalid_argument`` or ``gradient_check_failed``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import __version__
from .differentiation import TERMS, check_gradients, random_pair
from .fusion import FusionError, fuse_pointcloud, windowed_depth_average
from .geometry import GeometryError, normals_from_depth
from .io import (
    FormatError,
    ManifestError,
    MissingFileError,
    ShapeMismatchError,
    list_fields,
    load_manifest,
    read_field,
    split_depth,
    write_field,
    write_ply,
    write_sequence,
)
from .metrics import METRIC_NAMES, MetricsError, compute_metrics, mean_metrics
from .objectives import FramePair, LossWeights, ObjectiveError, total_loss
from .refine import RefineConfig, RefineError, perturb_depth, refine_sequence
from .synthcolon import SceneError, default_scene, render_sequence

logger = logging.getLogger("colde")

EXIT_CODES = {
    "gradient_check_failed": 1,
    "invalid_argument": 2,
    "missing_file": 3,
    "shape_mismatch": 4,
    "malformed_manifest": 5,
    "malformed_file": 6,
}
CSV_COLUMNS = ("frame",) + METRIC_NAMES + ("scale",)


class CliError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("invalid_argument", message)


def _fail(kind: str, message: str) -> int:
    line = json.dumps({"error": kind, "message": " ".join(str(message).split())})
    print(line, file=sys.stderr)
    return EXIT_CODES[kind]


def _apply_threads():
    raw = os.environ.get("COLDE_THREADS")
    if raw is None or raw == "":
        return
    try:
        n = int(raw)
    except ValueError:
        raise CliError("invalid_argument", f"COLDE_THREADS must be a positive integer, got {raw!r}")
    if n < 1:
        raise CliError("invalid_argument", f"COLDE_THREADS must be a positive integer, got {raw!r}")
    torch.set_num_threads(n)


def _weights(path: Optional[str]) -> LossWeights:
    if path is None:
        return LossWeights()
    p = Path(path)
    if not p.exists():
        raise MissingFileError(f"missing weights file: {p}")
    try:
        return LossWeights.from_json(p)
    except (ValueError, TypeError) as exc:
        raise CliError("invalid_argument", f"{p}: {exc}")


def _frame_index(manifest, k: int) -> int:
    if not 0 <= k < len(manifest.frames):
        raise CliError("invalid_argument", f"frame {k} out of range [0, {len(manifest.frames)})")
    return k


# --------------------------------------------------------------------------
# actions
# --------------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = default_scene(
        args.frames,
        step=args.step,
        wobble=args.wobble,
        width=args.width,
        height=args.height,
        fold_amplitude=args.fold_amplitude,
        texture=args.texture,
        specular=args.specular,
        seed=args.seed,
    )
    seq = render_sequence(cfg)
    write_sequence(args.out, seq.frames, seq.intrinsics, cfg.to_dict(), png=not args.no_png)
    print(json.dumps({"out": str(args.out), "frames": len(seq), "width": cfg.width, "height": cfg.height}))
    return 0


def cmd_perturb(args) -> int:
    m = load_manifest(args.seq)
    depths, valids = m.load_depths()
    out = Path(args.out)
    for k, (f, d, v) in enumerate(zip(m.frames, depths, valids)):
        p = perturb_depth(d, args.scale, args.noise, seed=args.seed + k)
        write_field(out / Path(f.depth).name, np.stack([p, v.astype(np.float64)]))
    print(json.dumps({"out": str(out), "frames": len(depths), "scale": args.scale, "noise": args.noise}))
    return 0


def _pair_from_manifest(m, t: int, s: int, depth_dir, channel: int) -> FramePair:
    images = m.load_images()
    depths, _ = m.load_depths(depth_dir)
    normals = m.load_normals()
    for k in (t, s):
        if images[k].shape[-2:] != m.intrinsics.shape:
            raise ShapeMismatchError(f"frame {k}: image shape {images[k].shape} != intrinsics {m.intrinsics.shape}")
    n_t = normals[t] if normals[t] is not None and depth_dir is None else normals_from_depth(depths[t], m.intrinsics)
    n_s = normals[s] if normals[s] is not None and depth_dir is None else normals_from_depth(depths[s], m.intrinsics)
    T = m.poses[s].inverse() @ m.poses[t]
    return FramePair(
        images[t].astype(np.float64), images[s].astype(np.float64), depths[t], depths[s],
        n_t, n_s, T, m.intrinsics, feature_channel=channel,
    )


def cmd_loss(args) -> int:
    m = load_manifest(args.seq)
    t = _frame_index(m, args.target)
    s = _frame_index(m, args.source)
    channel = args.channel if args.channel is not None else int(np.random.default_rng(args.seed).integers(64))
    pair = _pair_from_manifest(m, t, s, args.depth, channel)
    out = total_loss(pair, _weights(args.weights)).to_dict()
    out.update(target=t, source=s, feature_channel=channel)
    print(json.dumps(out))
    return 0


def cmd_check_grad(args) -> int:
    w = _weights(args.weights)
    pair = random_pair(args.size, args.seed)
    terms = TERMS if args.term == "each" else (args.term,)
    failed = []
    for term in terms:
        res = check_gradients(pair, w, args.wrt, args.step, args.tolerance, term=term)
        worst = max(res.max_rel_error.values()) if res.max_rel_error else 0.0
        print(json.dumps({
            "term": term,
            "max_rel_error": worst,
            "per_field": res.max_rel_error,
            "excluded": res.excluded,
            "passed": res.passed,
        }))
        if not res.passed:
            failed.append(f"{term}={worst:.3g}")
    if failed:
        raise CliError("gradient_check_failed", f"relative error above {args.tolerance}: {', '.join(failed)}")
    return 0


def cmd_refine(args) -> int:
    m = load_manifest(args.seq)
    images = [im.astype(np.float64) for im in m.load_images()]
    gt, gt_valid = m.load_depths()
    init, _ = m.load_depths(args.init) if args.init else (gt, gt_valid)
    cfg = RefineConfig(
        max_iters=args.iters,
        learning_rate=args.lr,
        optimize=frozenset(args.optimize.split(",")),
        seed=args.seed,
        fixed_channel=args.fixed_channel,
        convergence_tol=args.tol,
    )
    normals = None
    if "normals" in cfg.optimize:
        normals = [normals_from_depth(d, m.intrinsics) for d in init]
    res = refine_sequence(
        images, init, m.poses, m.intrinsics, _weights(args.weights), cfg,
        normals=normals, gt_depths=gt, gt_valid=gt_valid,
    )
    out = Path(args.out)
    for f, d, v in zip(m.frames, res.depths, gt_valid):
        write_field(out / "depth" / Path(f.depth).name, np.stack([d, v.astype(np.float64)]))
    if "normals" in cfg.optimize:
        for f, n in zip(m.frames, res.normals):
            write_field(out / "normals" / Path(f.normals or f.depth).name, n)
    report = res.report.to_dict()
    report["config"] = cfg.to_dict()
    (out / "report.json").write_text(json.dumps(report, indent=2) + "\n")
    print(json.dumps({
        "out": str(out),
        "iterations": len(res.report.losses),
        "stop_reason": res.report.stop_reason,
        "initial_loss": res.report.totals[0] if res.report.losses else None,
        "final_loss": res.report.final_loss,
        "initial_metrics": res.report.initial_metrics,
        "final_metrics": res.report.final_metrics,
    }))
    return 0


def cmd_eval(args) -> int:
    pred_files = list_fields(args.pred)
    gt_files = list_fields(args.gt)
    if not gt_files:
        raise MissingFileError(f"no field files in {args.gt}")
    if [p.name for p in pred_files] != [g.name for g in gt_files]:
        missing = sorted({g.name for g in gt_files} - {p.name for p in pred_files})
        raise MissingFileError(f"prediction files do not match ground truth (missing: {', '.join(missing[:5]) or 'none'})")
    rows, items = [], []
    for k, (pf, gf) in enumerate(zip(pred_files, gt_files)):
        pred, _ = split_depth(read_field(pf, squeeze=False))
        gt, valid = split_depth(read_field(gf, squeeze=False))
        if pred.shape != gt.shape:
            raise ShapeMismatchError(f"{pf.name}: prediction {pred.shape} vs ground truth {gt.shape}")
        mt = compute_metrics(pred, gt, valid, scale_first=not args.no_median_scale)
        items.append(mt)
        rows.append({"frame": k, **{n: getattr(mt, n) for n in METRIC_NAMES}, "scale": mt.scale_applied})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "eval.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    agg = mean_metrics(items)
    agg["frames"] = len(items)
    agg["median_scaling"] = not args.no_median_scale
    (out / "eval.json").write_text(json.dumps(agg, indent=2) + "\n")
    print(json.dumps(agg))
    return 0


def cmd_fuse(args) -> int:
    m = load_manifest(args.seq)
    depths, valids = m.load_depths(args.depth)
    images = m.load_images()
    if not args.no_average:
        depths = windowed_depth_average(depths, m.poses, m.intrinsics, args.window, valids)
    cloud = fuse_pointcloud(
        list(zip(depths, images, m.poses)), m.intrinsics, valids, voxel_size=args.voxel or None
    )
    write_ply(args.out, cloud.points, cloud.colors)
    print(json.dumps({"out": str(args.out), "points": len(cloud), "averaged": not args.no_average}))
    return 0


def cmd_config_init(args) -> int:
    text = LossWeights().to_json(args.out)
    if not args.out:
        print(text)
    return 0


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="colde", description="Self-supervised depth objectives on synthetic colon sequences.")
    p.add_argument("--version", action="version", version=f"colde {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0, help="repeat for more logging")
    sub = p.add_subparsers(dest="action", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="render a synthetic sequence directory")
    s.add_argument("--frames", type=int, default=10)
    s.add_argument("--out", required=True)
    s.add_argument("--width", type=int, default=288)
    s.add_argument("--height", type=int, default=224)
    s.add_argument("--step", type=float, default=0.05, help="pull-back distance per frame")
    s.add_argument("--wobble", type=float, default=0.0)
    s.add_argument("--fold-amplitude", type=float, default=0.15)
    s.add_argument("--texture", choices=("sinusoidal-vessel", "none"), default="sinusoidal-vessel")
    s.add_argument("--specular", choices=("off", "phong"), default="off")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--no-png", action="store_true")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("perturb", help="write scaled, noisy copies of a sequence's depths")
    s.add_argument("--seq", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--scale", type=float, default=1.0)
    s.add_argument("--noise", type=float, default=0.0, help="log-normal sigma")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_perturb)

    s = sub.add_parser("loss", help="print the loss breakdown of one frame pair as JSON")
    s.add_argument("--seq", required=True)
    s.add_argument("--depth", help="directory of depth files overriding the manifest's")
    s.add_argument("--target", type=int, default=0)
    s.add_argument("--source", type=int, default=1)
    s.add_argument("--channel", type=int, help="feature channel; drawn from --seed when omitted")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--weights")
    s.set_defaults(func=cmd_loss)

    s = sub.add_parser("check-grad", help="compare analytic and finite-difference gradients")
    s.add_argument("--size", type=int, default=16)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--wrt", choices=("depth", "normals", "pose", "all"), default="all")
    s.add_argument("--term", choices=TERMS + ("each",), default="each")
    s.add_argument("--step", type=float, default=1e-5)
    s.add_argument("--tolerance", type=float, default=1e-4)
    s.add_argument("--weights")
    s.set_defaults(func=cmd_check_grad)

    s = sub.add_parser("refine", help="refine a sequence's depths with poses held fixed")
    s.add_argument("--seq", required=True)
    s.add_argument("--init", help="directory of initial depth files (default: the manifest depths)")
    s.add_argument("--out", required=True)
    s.add_argument("--iters", type=int, default=300)
    s.add_argument("--lr", type=float, default=1e-2)
    s.add_argument("--tol", type=float, default=1e-6)
    s.add_argument("--optimize", default="depth", help="comma list from {depth, normals}")
    s.add_argument("--fixed-channel", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--weights")
    s.set_defaults(func=cmd_refine)

    s = sub.add_parser("eval", help="depth metrics of predictions against ground truth")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--out", default=".")
    s.add_argument("--no-median-scale", action="store_true")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("fuse", help="stitch a sequence into a PLY point cloud")
    s.add_argument("--seq", required=True)
    s.add_argument("--depth", help="directory of depth files overriding the manifest's")
    s.add_argument("--out", required=True)
    s.add_argument("--window", type=int, default=7)
    s.add_argument("--no-average", action="store_true")
    s.add_argument("--voxel", type=float, default=0.02, help="voxel size; 0 keeps every point")
    s.set_defaults(func=cmd_fuse)

    s = sub.add_parser("config", help="configuration files")
    csub = s.add_subparsers(dest="config_action", required=True, parser_class=_Parser)
    c = csub.add_parser("init", help="write the default loss weights as JSON")
    c.add_argument("--out")
    c.set_defaults(func=cmd_config_init)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
        _apply_threads()
        return args.func(args)
    except CliError as exc:
        return _fail(exc.kind, str(exc))
    except MissingFileError as exc:
        return _fail("missing_file", str(exc))
    except FileNotFoundError as exc:
        return _fail("missing_file", f"{exc.strerror}: {exc.filename}")
    except ShapeMismatchError as exc:
        return _fail("shape_mismatch", str(exc))
    except ManifestError as exc:
        return _fail("malformed_manifest", str(exc))
    except FormatError as exc:
        return _fail("malformed_file", str(exc))
    except (
        FusionError, GeometryError, MetricsError, ObjectiveError, RefineError, SceneError, ValueError
    ) as exc:
        return _fail("invalid_argument", str(exc))


if __name__ == "__main__":
    sys.exit(main())
