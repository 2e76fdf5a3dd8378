"""On-disk RGB-D + feature sequences.

Layout of a dataset directory::

    color/000000.png     8-bit RGB
    depth/000000.png     16-bit, value = round(depth * depth_scale)
    feature/000000.bin   "FEAT" + uint32 H, W, D, then H*W*D little-endian f32
    label/000000.png     8-bit class ids, 255 = invalid
    groundtruth.txt      timestamp tx ty tz qx qy qz qw (camera-to-world)
    embeddings.bin       class embeddings in the feature format (H=C, W=1)
    manifest.txt         key=value
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import CameraIntrinsics, Frame, Pose

FEATURE_MAGIC = b"FEAT"
_FEAT_HEADER = struct.Struct("<4sIII")
DEFAULT_DEPTH_SCALE = 5000.0


class DatasetError(RuntimeError):
    pass


@dataclass
class DatasetManifest:
    frame_count: int
    intrinsics: CameraIntrinsics
    feature_dim: int
    depth_scale: float = DEFAULT_DEPTH_SCALE
    class_names: tuple = ()
    extra: dict = field(default_factory=dict)

    def to_text(self) -> str:
        c = self.intrinsics
        items = dict(frames=self.frame_count, width=c.width, height=c.height, fx=repr(c.fx),
                     fy=repr(c.fy), cx=repr(c.cx), cy=repr(c.cy), near=repr(c.near),
                     far=repr(c.far), depth_scale=repr(self.depth_scale),
                     feature_dim=self.feature_dim, classes=",".join(self.class_names))
        items.update(self.extra)
        return "".join(f"{k}={v}\n" for k, v in items.items())

    @classmethod
    def from_text(cls, text: str, source="manifest.txt") -> "DatasetManifest":
        kv = {}
        for n, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise DatasetError(f"{source}:{n}: expected key=value, got {line!r}")
            k, v = line.split("=", 1)
            kv[k.strip()] = v.strip()
        try:
            cam = CameraIntrinsics(float(kv.pop("fx")), float(kv.pop("fy")), float(kv.pop("cx")),
                                   float(kv.pop("cy")), int(kv.pop("width")), int(kv.pop("height")),
                                   float(kv.pop("near")), float(kv.pop("far")))
            frames = int(kv.pop("frames"))
            D = int(kv.pop("feature_dim"))
            scale = float(kv.pop("depth_scale"))
            classes = tuple(c for c in kv.pop("classes", "").split(",") if c)
        except KeyError as e:
            raise DatasetError(f"{source}: missing key {e.args[0]}") from None
        return cls(frames, cam, D, scale, classes, kv)


def write_feature_file(path, feat) -> None:
    feat = np.asarray(feat)
    H, W, D = feat.shape
    with open(path, "wb") as fh:
        fh.write(_FEAT_HEADER.pack(FEATURE_MAGIC, H, W, D))
        fh.write(np.ascontiguousarray(feat, dtype="<f4").tobytes())


def read_feature_file(path, what: str | None = None) -> np.ndarray:
    what = what or str(path)
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError:
        raise DatasetError(f"{what}: missing file {path}") from None
    if len(data) < _FEAT_HEADER.size:
        raise DatasetError(f"{what}: truncated header in {path}")
    magic, H, W, D = _FEAT_HEADER.unpack_from(data)
    if magic != FEATURE_MAGIC:
        raise DatasetError(f"{what}: bad magic {magic!r} in {path}")
    expected = _FEAT_HEADER.size + 4 * H * W * D
    if len(data) != expected:
        raise DatasetError(f"{what}: {path} holds {len(data)} bytes, expected {expected} "
                           f"for {H}x{W}x{D}")
    return np.frombuffer(data, dtype="<f4", offset=_FEAT_HEADER.size).reshape(H, W, D).astype(np.float32)


def _name(i: int, ext: str) -> str:
    return f"{i:06d}.{ext}"


def pose_to_tum(timestamp: float, pose: Pose) -> str:
    c2w = pose.inverse()
    w, x, y, z = c2w.rotation
    t = c2w.translation
    return " ".join(repr(float(v)) for v in (timestamp, t[0], t[1], t[2], x, y, z, w))


def read_trajectory(path) -> tuple[np.ndarray, list[Pose]]:
    """TUM trajectory file -> (timestamps, world-to-camera poses)."""
    stamps, poses = [], []
    try:
        lines = Path(path).read_text().splitlines()
    except FileNotFoundError:
        raise DatasetError(f"missing trajectory file {path}") from None
    for n, line in enumerate(lines, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        vals = line.replace(",", " ").split()
        if len(vals) != 8:
            raise DatasetError(f"{path}:{n}: expected 8 values, got {len(vals)}")
        ts, tx, ty, tz, qx, qy, qz, qw = map(float, vals)
        stamps.append(ts)
        poses.append(Pose([qw, qx, qy, qz], [tx, ty, tz]).inverse())
    return np.array(stamps), poses


def write_trajectory(path, timestamps, poses) -> None:
    with open(path, "w") as fh:
        fh.write("# timestamp tx ty tz qx qy qz qw\n")
        for ts, p in zip(timestamps, poses):
            fh.write(pose_to_tum(ts, p) + "\n")


def write_dataset(frames, poses, manifest: DatasetManifest, directory,
                  class_embeddings=None) -> Path:
    root = Path(directory)
    for sub in ("color", "depth", "feature", "label"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    if len(frames) != len(poses):
        raise ValueError("frames and poses must have the same length")
    scale = manifest.depth_scale
    for i, f in enumerate(frames):
        rgb = np.clip(np.rint(np.asarray(f.color) * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(rgb, mode="RGB").save(root / "color" / _name(i, "png"))
        q = np.rint(np.asarray(f.depth, dtype=np.float64) * scale)
        if q.max(initial=0) > 65535:
            raise ValueError(f"frame {i}: depth exceeds the 16-bit range at scale {scale}")
        Image.fromarray(q.astype(np.uint16)).save(root / "depth" / _name(i, "png"))
        write_feature_file(root / "feature" / _name(i, "bin"), f.feature_map)
        if f.label is not None:
            Image.fromarray(np.asarray(f.label, dtype=np.uint8), mode="L").save(
                root / "label" / _name(i, "png"))
    write_trajectory(root / "groundtruth.txt", [f.timestamp for f in frames], poses)
    if class_embeddings is not None:
        emb = np.asarray(class_embeddings, dtype=np.float32)
        write_feature_file(root / "embeddings.bin", emb[:, None, :])
    (root / "manifest.txt").write_text(manifest.to_text())
    return root


def _read_png(path, what):
    try:
        with Image.open(path) as im:
            return np.array(im)
    except FileNotFoundError:
        raise DatasetError(f"{what}: missing file {path}") from None
    except Exception as e:  # PIL raises assorted errors on corrupt data
        raise DatasetError(f"{what}: cannot decode {path}: {e}") from None


def read_manifest(directory) -> DatasetManifest:
    p = Path(directory) / "manifest.txt"
    try:
        return DatasetManifest.from_text(p.read_text(), str(p))
    except FileNotFoundError:
        raise DatasetError(f"missing manifest {p}") from None


def read_embeddings(directory) -> np.ndarray:
    emb = read_feature_file(Path(directory) / "embeddings.bin", "class embeddings")
    return emb[:, 0, :].astype(np.float64)


def read_frame(directory, i: int, manifest: DatasetManifest, timestamp: float) -> Frame:
    root = Path(directory)
    what = f"frame {i}"
    color = _read_png(root / "color" / _name(i, "png"), what).astype(np.float64) / 255.0
    depth = _read_png(root / "depth" / _name(i, "png"), what).astype(np.float64) / manifest.depth_scale
    feat = read_feature_file(root / "feature" / _name(i, "bin"), what)
    lp = root / "label" / _name(i, "png")
    label = _read_png(lp, what).astype(np.uint8) if lp.exists() else None
    cam = manifest.intrinsics
    if color.shape[:2] != cam.shape or depth.shape != cam.shape or feat.shape[:2] != cam.shape:
        raise DatasetError(f"{what}: image size does not match the manifest ({cam.shape})")
    if feat.shape[2] != manifest.feature_dim:
        raise DatasetError(f"{what}: feature dimension {feat.shape[2]} != {manifest.feature_dim}")
    return Frame(timestamp, color, depth, feat, label)


def read_dataset(directory):
    """Load ``(frames, poses, manifest)``; poses are world-to-camera."""
    root = Path(directory)
    if not root.is_dir():
        raise DatasetError(f"dataset directory {root} does not exist")
    manifest = read_manifest(root)
    stamps, poses = read_trajectory(root / "groundtruth.txt")
    if len(poses) != manifest.frame_count:
        raise DatasetError(f"groundtruth.txt lists {len(poses)} poses, manifest says "
                           f"{manifest.frame_count} frames")
    frames = [read_frame(root, i, manifest, float(stamps[i])) for i in range(manifest.frame_count)]
    return frames, poses, manifest
