"""Scene manifests, PLY point clouds and checkpoints, images, metric logs.

Manifest format (YAML; JSON is accepted as well)::

    width: 2000
    height: 1000
    points: sparse.ply          # relative to the manifest's directory
    frames:
      - name: pano_000          # optional, defaults to the image file stem
        image: images/pano_000.png
        T_cw: [1, 0, 0, 0,  0, 1, 0, 0,  0, 0, 1, 0,  0, 0, 0, 1]
    train: [pano_000]           # optional; names or integer indices
    test: []                    # optional

``T_cw`` is the world-to-camera transform, 16 numbers row-major.
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
import yaml

from plyfile import PlyData, PlyElement, PlyParseError

from .camera import EquirectCamera, Pose
from .errors import (
    DecodeError,
    InvalidPose,
    MissingProperty,
    ParseError,
    UnsupportedFormat,
    ValidationError,
    VersionMismatch,
)
from .scene import GaussianCloud, num_sh_coeffs, quat_to_rotmat
from .trainer import Dataset, View

CHECKPOINT_VERSION = 1

# ---------------------------------------------------------------------------
# PLY
# ---------------------------------------------------------------------------

def _read_plydata(path) -> PlyData:
    path = Path(path)
    try:
        with open(path, "rb") as f:
            magic = f.read(4)
    except OSError as exc:
        raise ParseError(f"{path}: {exc.strerror or exc}") from exc
    if magic.rstrip() != b"ply":
        raise UnsupportedFormat(f"{path}: not a PLY file")
    try:
        ply = PlyData.read(str(path))
    except PlyParseError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    except (ValueError, EOFError) as exc:
        raise ParseError(f"{path}: {exc}") from exc
    if not ply.text and ply.byte_order != "<":
        raise UnsupportedFormat(f"{path}: only ASCII and binary little-endian PLY are supported")
    return ply


def _vertex(ply: PlyData, path) -> np.ndarray:
    if "vertex" not in ply:
        raise ParseError(f"{path}: no vertex element")
    return ply["vertex"].data


def write_ply(path, vertices: np.ndarray, binary: bool = True, comments=()) -> None:
    """Write a structured array as the ``vertex`` element."""
    el = PlyElement.describe(vertices, "vertex")
    PlyData([el], text=not binary, byte_order="<", comments=list(comments)).write(str(path))


@dataclass
class SparsePoints:
    positions: np.ndarray  # (N, 3) float64
    colors: np.ndarray  # (N, 3) uint8

    def __len__(self):
        return len(self.positions)

    def colors_unit(self) -> np.ndarray:
        return self.colors.astype(np.float64) / 255.0


def load_ply(path) -> SparsePoints:
    """Colored point cloud with x, y, z and red, green, blue properties."""
    v = _vertex(_read_plydata(path), path)
    for name in ("x", "y", "z", "red", "green", "blue"):
        if name not in v.dtype.names:
            raise MissingProperty(name)
    for name in ("x", "y", "z"):
        if v.dtype[name].kind != "f":
            raise UnsupportedFormat(f"{path}: property {name} must be float or double")
    for name in ("red", "green", "blue"):
        if v.dtype[name] != np.uint8:
            raise UnsupportedFormat(f"{path}: property {name} must be uchar")
    positions = np.stack([v["x"], v["y"], v["z"]], axis=-1).astype(np.float64)
    colors = np.stack([v["red"], v["green"], v["blue"]], axis=-1).astype(np.uint8)
    return SparsePoints(positions, colors)


def save_points_ply(path, points: SparsePoints, binary: bool = True) -> None:
    dtype = [("x", "f4"), ("y", "f4"), ("z", "f4"), ("red", "u1"), ("green", "u1"), ("blue", "u1")]
    arr = np.zeros(len(points), dtype=dtype)
    for i, n in enumerate("xyz"):
        arr[n] = points.positions[:, i]
    for i, n in enumerate(("red", "green", "blue")):
        arr[n] = points.colors[:, i]
    write_ply(path, arr, binary=binary)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def _checkpoint_fields(n_rest: int) -> list[str]:
    names = ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
    names += [f"f_rest_{i}" for i in range(n_rest)]
    names += ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
    return names


def save_checkpoint(cloud: GaussianCloud, path) -> None:
    """Splat-viewer compatible PLY holding the raw parameters.

    float32 clouds are written with ``float`` properties, anything else with
    ``double``, so a save/load round trip is exact.
    """
    code = "f4" if cloud.positions.dtype == np.float32 else "f8"
    n = len(cloud)
    k = cloud.sh.shape[1]
    rest = np.transpose(cloud.sh[:, 1:, :], (0, 2, 1)).reshape(n, 3 * (k - 1))
    names = _checkpoint_fields(3 * (k - 1))
    arr = np.zeros(n, dtype=[(name, code) for name in names])
    arr["x"], arr["y"], arr["z"] = cloud.positions.T
    for c in range(3):
        arr[f"f_dc_{c}"] = cloud.sh[:, 0, c]
    for i in range(rest.shape[1]):
        arr[f"f_rest_{i}"] = rest[:, i]
    arr["opacity"] = cloud.opacity_logits
    for i in range(3):
        arr[f"scale_{i}"] = cloud.log_scales[:, i]
    for i in range(4):
        arr[f"rot_{i}"] = cloud.rotations[:, i]
    write_ply(path, arr, comments=[
        f"equisplat_checkpoint_version {CHECKPOINT_VERSION}",
        f"sh_degree {cloud.sh_degree}",
        f"active_sh_degree {cloud.active_sh_degree}",
    ])


def load_checkpoint(path) -> GaussianCloud:
    ply = _read_plydata(path)
    meta = {}
    for c in ply.comments:
        parts = c.split()
        if len(parts) == 2 and parts[1].lstrip("-").isdigit():
            meta[parts[0]] = int(parts[1])
    version = meta.get("equisplat_checkpoint_version")
    if version is not None and version != CHECKPOINT_VERSION:
        raise VersionMismatch(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    v = _vertex(ply, path)
    names = v.dtype.names
    n_rest = sum(1 for name in names if re.fullmatch(r"f_rest_\d+", name))
    if n_rest % 3:
        raise ParseError(f"{path}: f_rest count {n_rest} is not a multiple of 3")
    k = n_rest // 3 + 1
    degree = int(round(np.sqrt(k))) - 1
    if num_sh_coeffs(degree) != k:
        raise ParseError(f"{path}: {k} SH coefficients do not form a complete degree")
    if "sh_degree" in meta and meta["sh_degree"] != degree:
        raise ParseError(f"{path}: sh_degree comment disagrees with f_rest properties")
    for name in _checkpoint_fields(n_rest):
        if name not in names and name not in ("nx", "ny", "nz"):
            raise MissingProperty(name)
    dtype = v.dtype["x"]
    n = len(v)
    sh = np.zeros((n, k, 3), dtype=dtype)
    for c in range(3):
        sh[:, 0, c] = v[f"f_dc_{c}"]
    if k > 1:
        rest = np.stack([v[f"f_rest_{i}"] for i in range(n_rest)], axis=-1).reshape(n, 3, k - 1)
        sh[:, 1:, :] = np.transpose(rest, (0, 2, 1))
    return GaussianCloud(
        positions=np.stack([v["x"], v["y"], v["z"]], axis=-1).astype(dtype),
        sh=sh,
        rotations=np.stack([v[f"rot_{i}"] for i in range(4)], axis=-1).astype(dtype),
        log_scales=np.stack([v[f"scale_{i}"] for i in range(3)], axis=-1).astype(dtype),
        opacity_logits=np.asarray(v["opacity"]).astype(dtype),
        sh_degree=degree,
        active_sh_degree=meta.get("active_sh_degree", degree),
    )


def optimizer_state_path(checkpoint_path) -> Path:
    p = Path(checkpoint_path)
    return p.with_name(p.stem + ".optim.npz")


def save_optimizer_state(state: dict, path) -> None:
    with open(path, "wb") as f:
        np.savez(f, **state)


def load_optimizer_state(path) -> dict:
    with np.load(path) as data:
        return {k: data[k] for k in data.files}


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------


def load_image(path) -> np.ndarray:
    """8/16-bit PNG or 8-bit JPEG as float64 RGB in [0, 1] (no gamma change)."""
    path = Path(path)
    if not path.is_file():
        raise DecodeError(f"{path}: no such file")
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise DecodeError(f"{path}: cannot decode image")
    if img.dtype == np.uint8:
        scale = 255.0
    elif img.dtype == np.uint16:
        scale = 65535.0
    else:
        raise DecodeError(f"{path}: unsupported sample type {img.dtype}")
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=-1)
    elif img.shape[2] == 4:
        img = cv2.cvtColor(img, cv2.COLOR_BGRA2RGB)
    elif img.shape[2] == 3:
        img = cv2.cvtColor(img, cv2.COLOR_BGR2RGB)
    else:
        raise DecodeError(f"{path}: unsupported channel count {img.shape[2]}")
    return img.astype(np.float64) / scale


def quantize(img, bits: int = 8) -> np.ndarray:
    """[0, 1] floats to unsigned integers with round-half-up."""
    if bits not in (8, 16):
        raise ValueError("bits must be 8 or 16")
    top = 255.0 if bits == 8 else 65535.0
    q = np.floor(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * top + 0.5)
    return q.astype(np.uint8 if bits == 8 else np.uint16)


def save_image(img, path, bits: int = 8) -> None:
    """Write an RGB float image; 16-bit output needs a PNG path."""
    path = Path(path)
    data = quantize(img, bits)
    if data.ndim == 3:
        data = cv2.cvtColor(data, cv2.COLOR_RGB2BGR)
    if not cv2.imwrite(str(path), data):
        raise OSError(f"could not write {path}")


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


@dataclass
class Frame:
    name: str
    image: Path
    pose: Pose


@dataclass
class SceneManifest:
    path: Path
    width: int
    height: int
    frames: list
    points: Path | None
    train: list  # frame indices
    test: list

    @property
    def camera(self) -> EquirectCamera:
        return EquirectCamera(self.width, self.height)

    def train_frames(self) -> list:
        return [self.frames[i] for i in self.train]

    def test_frames(self) -> list:
        return [self.frames[i] for i in self.test]


def read_structured(path) -> dict:
    """Parse a YAML/JSON document, mapping syntax errors to ParseError with line info."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ParseError(f"{path}: {exc.strerror or exc}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{path}:{mark.line + 1}" if mark is not None else str(path)
        problem = getattr(exc, "problem", None) or str(exc)
        raise ParseError(f"{where}: {problem}") from exc
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ParseError(f"{path}: top level must be a mapping")
    return data


def _require(data: dict, key: str, kind, path, ctx: str = ""):
    if key not in data:
        raise ParseError(f"{path}: {ctx}missing field {key!r}")
    value = data[key]
    if kind is int and (isinstance(value, bool) or not isinstance(value, int)):
        raise ParseError(f"{path}: {ctx}field {key!r} must be an integer")
    if kind is str and not isinstance(value, str):
        raise ParseError(f"{path}: {ctx}field {key!r} must be a string")
    if kind is list and not isinstance(value, list):
        raise ParseError(f"{path}: {ctx}field {key!r} must be a list")
    return value


def load_manifest(path, check_files: bool = True) -> SceneManifest:
    path = Path(path)
    data = read_structured(path)
    base = path.parent
    width = _require(data, "width", int, path)
    height = _require(data, "height", int, path)
    if width < 2 or height < 2:
        raise ValidationError(f"{path}: image size must be at least 2x2")
    frames_raw = _require(data, "frames", list, path)

    frames = []
    for i, fr in enumerate(frames_raw):
        ctx = f"frames[{i}]: "
        if not isinstance(fr, dict):
            raise ParseError(f"{path}: {ctx}frame must be a mapping")
        image = base / _require(fr, "image", str, path, ctx)
        T = _require(fr, "T_cw", list, path, ctx)
        if len(T) == 4 and all(isinstance(row, list) and len(row) == 4 for row in T):
            T = [x for row in T for x in row]  # nested 4x4 rows
        if len(T) != 16 or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in T):
            raise ParseError(f"{path}: {ctx}T_cw must hold 16 numbers (flat or 4x4 rows)")
        name = fr.get("name", Path(fr["image"]).stem)
        if not isinstance(name, str):
            raise ParseError(f"{path}: {ctx}field 'name' must be a string")
        try:
            pose = Pose.from_matrix(np.array(T, dtype=np.float64))
        except InvalidPose as exc:
            raise ValidationError(f"{path}: frame {i} ({name}): {exc}") from exc
        if check_files and not image.is_file():
            raise ValidationError(f"{path}: frame {i} ({name}): image {image} does not exist")
        frames.append(Frame(name, image, pose))

    names = [f.name for f in frames]
    if len(set(names)) != len(names):
        raise ValidationError(f"{path}: duplicate frame names")

    points = None
    if "points" in data and data["points"] is not None:
        points = base / _require(data, "points", str, path)
        if check_files and not points.is_file():
            raise ValidationError(f"{path}: points file {points} does not exist")

    def resolve(key):
        entries = _require(data, key, list, path)
        out = []
        for e in entries:
            if isinstance(e, int) and not isinstance(e, bool):
                if not 0 <= e < len(frames):
                    raise ValidationError(f"{path}: {key} index {e} out of range")
                out.append(e)
            elif isinstance(e, str) and e in names:
                out.append(names.index(e))
            else:
                raise ValidationError(f"{path}: {key} entry {e!r} names no frame")
        return out

    test = resolve("test") if "test" in data else []
    if "train" in data:
        train = resolve("train")
    else:
        train = [i for i in range(len(frames)) if i not in set(test)]
    return SceneManifest(path, width, height, frames, points, train, test)


def manifest_dict(width, height, frames, points=None, train=None, test=None) -> dict:
    """Build a manifest document; ``frames`` holds (name, image_path, 4x4 T_cw)."""
    doc = {"width": int(width), "height": int(height)}
    if points is not None:
        doc["points"] = str(points)
    doc["frames"] = [
        {"name": name, "image": str(image), "T_cw": [float(x) for x in np.asarray(T).reshape(16)]}
        for name, image, T in frames
    ]
    if train is not None:
        doc["train"] = list(train)
    if test is not None:
        doc["test"] = list(test)
    return doc


def write_structured(doc: dict, path) -> None:
    with open(path, "w") as f:
        yaml.safe_dump(doc, f, sort_keys=False, default_flow_style=None)


def load_dataset(manifest: SceneManifest) -> Dataset:
    """Load the manifest's images into train/test views."""
    cam = manifest.camera

    def view(i):
        fr = manifest.frames[i]
        img = load_image(fr.image)
        if img.shape[:2] != (cam.height, cam.width):
            raise ValidationError(
                f"{fr.image}: size {img.shape[1]}x{img.shape[0]} differs from manifest {cam.width}x{cam.height}"
            )
        return View(img, fr.pose, fr.name)

    return Dataset(cam, [view(i) for i in manifest.train], [view(i) for i in manifest.test])


# ---------------------------------------------------------------------------
# metrics log
# ---------------------------------------------------------------------------


class MetricsLog:
    """Line-delimited JSON records."""

    def __init__(self, path):
        self.path = Path(path)
        self._f = open(self.path, "a")

    def write(self, record: dict) -> None:
        self._f.write(json.dumps(record, sort_keys=True) + "\n")
        self._f.flush()

    def close(self) -> None:
        self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_metrics_log(path) -> list[dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


# ---------------------------------------------------------------------------
# COLMAP text export
# ---------------------------------------------------------------------------


def _colmap_lines(path: Path):
    if not path.is_file():
        raise ParseError(f"{path}: file not found")
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            yield lineno, line.rstrip("\n")


def _floats(tokens, path, lineno, what):
    try:
        return [float(t) for t in tokens]
    except ValueError as exc:
        raise ParseError(f"{path}:{lineno}: bad {what}: {exc}") from exc


def read_colmap_text(colmap_dir):
    """Parse cameras.txt, images.txt and points3D.txt.

    Returns ``(width, height, images, points)`` where ``images`` is a list
    of ``(name, 4x4 T_cw)`` sorted by image id.
    """
    colmap_dir = Path(colmap_dir)
    sizes = {}
    cam_file = colmap_dir / "cameras.txt"
    for lineno, line in _colmap_lines(cam_file):
        if not line.strip() or line.startswith("#"):
            continue
        tok = line.split()
        if len(tok) < 4:
            raise ParseError(f"{cam_file}:{lineno}: expected CAMERA_ID MODEL WIDTH HEIGHT ...")
        try:
            sizes[int(tok[0])] = (int(tok[2]), int(tok[3]))
        except ValueError as exc:
            raise ParseError(f"{cam_file}:{lineno}: {exc}") from exc
    if not sizes:
        raise ParseError(f"{cam_file}: no cameras")

    img_file = colmap_dir / "images.txt"
    images = []
    expect_points_line = False
    for lineno, line in _colmap_lines(img_file):
        if line.startswith("#"):
            continue
        if expect_points_line:
            expect_points_line = False
            continue
        if not line.strip():
            continue
        tok = line.split()
        if len(tok) < 10:
            raise ParseError(f"{img_file}:{lineno}: expected IMAGE_ID QW QX QY QZ TX TY TZ CAMERA_ID NAME")
        vals = _floats(tok[1:8], img_file, lineno, "pose")
        try:
            image_id, cam_id = int(tok[0]), int(tok[8])
        except ValueError as exc:
            raise ParseError(f"{img_file}:{lineno}: {exc}") from exc
        if cam_id not in sizes:
            raise ParseError(f"{img_file}:{lineno}: unknown camera id {cam_id}")
        q = np.array(vals[:4])
        if np.linalg.norm(q) == 0:
            raise ParseError(f"{img_file}:{lineno}: zero quaternion")
        T = np.eye(4)
        T[:3, :3] = quat_to_rotmat(q)
        T[:3, 3] = vals[4:7]
        images.append((image_id, " ".join(tok[9:]), T, cam_id))
        expect_points_line = True
    if not images:
        raise ParseError(f"{img_file}: no images")
    used = {sizes[c] for _, _, _, c in images}
    if len(used) != 1:
        raise ValidationError(f"{img_file}: images use cameras of different sizes")
    width, height = used.pop()

    pts_file = colmap_dir / "points3D.txt"
    xyz, rgb = [], []
    for lineno, line in _colmap_lines(pts_file):
        if not line.strip() or line.startswith("#"):
            continue
        tok = line.split()
        if len(tok) < 7:
            raise ParseError(f"{pts_file}:{lineno}: expected POINT3D_ID X Y Z R G B ...")
        xyz.append(_floats(tok[1:4], pts_file, lineno, "position"))
        try:
            color = [int(t) for t in tok[4:7]]
        except ValueError as exc:
            raise ParseError(f"{pts_file}:{lineno}: bad color: {exc}") from exc
        if not all(0 <= c <= 255 for c in color):
            raise ParseError(f"{pts_file}:{lineno}: color out of range")
        rgb.append(color)
    points = SparsePoints(np.array(xyz, dtype=np.float64).reshape(-1, 3), np.array(rgb, dtype=np.uint8).reshape(-1, 3))

    images.sort(key=lambda item: item[0])
    return width, height, [(name, T) for _, name, T, _ in images], points


def convert_colmap(colmap_dir, images_dir, out_manifest, points_name: str = "points3D.ply") -> SceneManifest:
    """Write a manifest plus binary PLY next to it from a COLMAP text export."""
    out_manifest = Path(out_manifest)
    width, height, images, points = read_colmap_text(colmap_dir)
    out_dir = out_manifest.parent
    out_dir.mkdir(parents=True, exist_ok=True)
    points_path = out_dir / points_name
    save_points_ply(points_path, points)
    images_dir = Path(images_dir)
    frames = []
    for name, T in images:
        rel = os.path.relpath(images_dir / name, out_dir)
        frames.append((Path(name).stem, rel, T))
    write_structured(manifest_dict(width, height, frames, points=points_name), out_manifest)
    return load_manifest(out_manifest, check_files=False)
