"""On-disk formats: float32 field files, sequence manifests and PLY clouds.

Field files start with a 16-byte little-endian header ``(magic, height,
width, channels)`` followed by channel-first float32 samples. A sequence
directory holds one ``manifest.json`` naming every frame's files, its
camera-to-world pose, the intrinsics and the scene configuration.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .geometry import Intrinsics, PoseSE3

logger = logging.getLogger(__name__)

MAGIC = b"CLDF"
HEADER = struct.Struct("<4sIII")
MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1
SUPPORTED_VERSIONS = (1,)

_FRAME_KEYS = {"index", "image", "image_png", "depth", "normals", "pose"}
_TOP_KEYS = {"version", "intrinsics", "frames", "scene"}


class FormatError(ValueError):
    """Malformed field file or manifest."""


class ManifestError(FormatError):
    """Manifest JSON is unreadable, of an unknown version or missing fields."""


class ShapeMismatchError(FormatError):
    """Files disagree on image size or channel count."""


class MissingFileError(FileNotFoundError):
    """A file referenced by a manifest or command line does not exist."""


def write_field(path, data) -> Path:
    """Write a ``(H, W)`` or ``(C, H, W)`` array as float32 with a header."""
    arr = np.asarray(data)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise FormatError(f"fields must be 2-D or 3-D, got shape {arr.shape}")
    c, h, w = arr.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, h, w, c))
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return path


def read_field(path, squeeze: bool = True) -> np.ndarray:
    """Read a field file; single-channel fields come back as ``(H, W)``."""
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"missing field file: {path}")
    raw = path.read_bytes()
    if len(raw) < HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, h, w, c = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    n = h * w * c
    if len(raw) != HEADER.size + 4 * n:
        raise FormatError(f"{path}: expected {n} samples, file holds {(len(raw) - HEADER.size) // 4}")
    arr = np.frombuffer(raw, dtype="<f4", offset=HEADER.size).reshape(c, h, w).astype(np.float32)
    return arr[0] if squeeze and c == 1 else arr


def write_png(path, image) -> Path:
    """8-bit preview of a ``(C, H, W)`` image in ``[0, 1]``."""
    from PIL import Image

    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[0] if arr.shape[0] == 1 else np.moveaxis(arr[:3], 0, -1)
    u8 = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(u8).save(path)
    return path


@dataclass
class FrameRecord:
    index: int
    image: str
    depth: str
    normals: Optional[str]
    pose: PoseSE3
    image_png: Optional[str] = None


@dataclass
class Manifest:
    intrinsics: Intrinsics
    frames: list
    scene: Optional[dict] = None
    version: int = MANIFEST_VERSION
    root: Path = field(default=Path("."))

    def path(self, rel: str) -> Path:
        return self.root / rel

    def to_dict(self) -> dict:
        out = {
            "version": self.version,
            "intrinsics": self.intrinsics.to_dict(),
            "frames": [
                {
                    "index": f.index,
                    "image": f.image,
                    "image_png": f.image_png,
                    "depth": f.depth,
                    "normals": f.normals,
                    "pose": f.pose.to_dict(),
                }
                for f in self.frames
            ],
        }
        if self.scene is not None:
            out["scene"] = self.scene
        return out

    def save(self, directory=None) -> Path:
        root = Path(directory) if directory is not None else self.root
        root.mkdir(parents=True, exist_ok=True)
        p = root / MANIFEST_NAME
        p.write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        return p

    def load_images(self) -> list:
        return [read_field(self.path(f.image), squeeze=False) for f in self.frames]

    def load_depths(self, depth_dir=None) -> tuple[list, list]:
        """Depths and validity masks, from ``depth_dir`` if given.

        A second channel in a depth file is its validity mask; without one
        every pixel is valid.
        """
        if depth_dir is None:
            paths = [self.path(f.depth) for f in self.frames]
        else:
            d = field_dir(depth_dir)
            paths = [d / Path(f.depth).name for f in self.frames]
        depths, valids = [], []
        for p in paths:
            d, v = split_depth(read_field(p, squeeze=False))
            if d.shape != self.intrinsics.shape:
                raise ShapeMismatchError(f"{p}: depth shape {d.shape} != intrinsics {self.intrinsics.shape}")
            depths.append(d)
            valids.append(v)
        return depths, valids

    def load_normals(self) -> list:
        out = []
        for f in self.frames:
            if f.normals is None:
                out.append(None)
            else:
                out.append(read_field(self.path(f.normals), squeeze=False).astype(np.float64))
        return out

    @property
    def poses(self) -> list:
        return [f.pose for f in self.frames]


def split_depth(arr: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``(depth, valid)`` from a 1- or 2-channel depth field."""
    arr = np.asarray(arr)
    if arr.ndim == 2:
        arr = arr[None]
    depth = arr[0].astype(np.float64)
    valid = arr[1] > 0.5 if arr.shape[0] > 1 else np.ones(depth.shape, dtype=bool)
    return depth, valid


def load_manifest(directory) -> Manifest:
    """Parse and validate ``directory/manifest.json``."""
    root = Path(directory)
    p = root / MANIFEST_NAME
    if not p.exists():
        raise MissingFileError(f"missing manifest: {p}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{p}: invalid JSON ({exc.msg})") from exc
    if not isinstance(data, dict):
        raise ManifestError(f"{p}: manifest must be a JSON object")
    version = data.get("version")
    if version not in SUPPORTED_VERSIONS:
        raise ManifestError(f"{p}: unsupported manifest version {version!r}")
    extra = set(data) - _TOP_KEYS
    if extra:
        logger.warning("ignoring unknown manifest keys: %s", sorted(extra))
    try:
        K = Intrinsics.from_dict(data["intrinsics"])
        frames = []
        for i, fr in enumerate(data["frames"]):
            extra = set(fr) - _FRAME_KEYS
            if extra:
                logger.warning("frame %d: ignoring unknown keys %s", i, sorted(extra))
            frames.append(
                FrameRecord(
                    index=int(fr.get("index", i)),
                    image=fr["image"],
                    depth=fr["depth"],
                    normals=fr.get("normals"),
                    pose=PoseSE3.from_dict(fr["pose"]),
                    image_png=fr.get("image_png"),
                )
            )
    except (KeyError, TypeError) as exc:
        raise ManifestError(f"{p}: missing or malformed field {exc}") from exc
    except ValueError as exc:
        raise ManifestError(f"{p}: {exc}") from exc
    if not frames:
        raise ManifestError(f"{p}: no frames")
    return Manifest(K, frames, data.get("scene"), version, root)


def write_sequence(directory, frames, intrinsics: Intrinsics, scene: Optional[dict] = None, png: bool = True) -> Manifest:
    """Write rendered frames (anything with ``image``, ``gt_depth``,
    ``gt_normals``, ``valid`` and ``pose_world``) as a sequence directory."""
    root = Path(directory)
    records = []
    for k, fr in enumerate(frames):
        name = f"{k:06d}"
        image = f"image/{name}.bin"
        depth = f"depth/{name}.bin"
        normals = f"normals/{name}.bin"
        write_field(root / image, fr.image)
        write_field(root / depth, np.stack([fr.gt_depth, fr.valid.astype(np.float64)]))
        write_field(root / normals, fr.gt_normals)
        image_png = None
        if png:
            image_png = f"png/{name}.png"
            write_png(root / image_png, fr.image)
        records.append(FrameRecord(k, image, depth, normals, fr.pose_world, image_png))
    manifest = Manifest(intrinsics, records, scene, MANIFEST_VERSION, root)
    manifest.save()
    return manifest


def field_dir(directory) -> Path:
    """Directory holding depth fields.

    A sequence or refine output keeps its depths under ``depth/``; such a
    directory resolves to that subdirectory when it has no fields itself.
    """
    d = Path(directory)
    if not d.is_dir():
        raise MissingFileError(f"missing directory: {d}")
    if not any(d.glob("*.bin")) and (d / "depth").is_dir():
        return d / "depth"
    return d


def list_fields(directory) -> list:
    """Sorted field files of a directory, resolved as in :func:`field_dir`."""
    return sorted(field_dir(directory).glob("*.bin"))


# --------------------------------------------------------------------------
# PLY
# --------------------------------------------------------------------------


def write_ply(path, points, colors=None) -> Path:
    """Binary little-endian PLY with float32 xyz and uchar rgb."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if colors is None:
        rgb = np.full((len(pts), 3), 255, dtype=np.uint8)
    else:
        c = np.asarray(colors)
        rgb = c.astype(np.uint8) if c.dtype == np.uint8 else np.clip(np.round(c * 255), 0, 255).astype(np.uint8)
        rgb = rgb.reshape(-1, 3)
    if len(rgb) != len(pts):
        raise ShapeMismatchError(f"{len(pts)} points but {len(rgb)} colours")
    vertex = np.empty(
        len(pts),
        dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("red", "u1"), ("green", "u1"), ("blue", "u1")],
    )
    vertex["x"], vertex["y"], vertex["z"] = pts.T
    vertex["red"], vertex["green"], vertex["blue"] = rgb.T
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {len(pts)}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        "end_header\n"
    )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(vertex.tobytes())
    return path


def read_ply(path) -> tuple[np.ndarray, np.ndarray]:
    """Read a cloud written by :func:`write_ply`."""
    raw = Path(path).read_bytes()
    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply\n") or end < 0:
        raise FormatError(f"{path}: not a PLY file")
    header = raw[:end].decode("ascii").splitlines()
    if "format binary_little_endian 1.0" not in header:
        raise FormatError(f"{path}: only binary little-endian PLY is supported")
    n = next(int(line.split()[-1]) for line in header if line.startswith("element vertex"))
    dt = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("red", "u1"), ("green", "u1"), ("blue", "u1")])
    v = np.frombuffer(raw, dtype=dt, count=n, offset=end + len(b"end_header\n"))
    pts = np.stack([v["x"], v["y"], v["z"]], axis=1).astype(np.float64)
    rgb = np.stack([v["red"], v["green"], v["blue"]], axis=1)
    return pts, rgb
