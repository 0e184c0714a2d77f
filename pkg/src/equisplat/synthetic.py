"""Synthetic scenes with known ground truth, used for self-consistency runs."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .camera import EquirectCamera, Pose, rotation_y
from .rasterizer import render
from .scene import GaussianCloud, logit, rgb_to_sh_dc
from .trainer import Dataset, View


def random_gaussians(n: int, rng: np.random.Generator, radius=(2.5, 4.0), scale=(0.15, 0.4),
                     opacity=(0.7, 0.95), max_lat_deg: float = 60.0) -> GaussianCloud:
    """Gaussians scattered on a thick shell around the origin, away from the poles."""
    lon = rng.uniform(-np.pi, np.pi, n)
    lat = np.deg2rad(rng.uniform(-max_lat_deg, max_lat_deg, n))
    r = rng.uniform(*radius, n)
    pos = r[:, None] * np.stack([np.cos(lat) * np.sin(lon), np.sin(lat), np.cos(lat) * np.cos(lon)], -1)
    sh = np.zeros((n, 1, 3))
    sh[:, 0] = rgb_to_sh_dc(rng.uniform(0.1, 0.95, (n, 3)))
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    log_scales = np.log(rng.uniform(*scale, (n, 3)))
    opac = logit(rng.uniform(*opacity, n))
    return GaussianCloud(pos, sh, q, log_scales, opac, sh_degree=0)


def camera_poses(n: int, rng: np.random.Generator, spread: float = 0.3) -> list[Pose]:
    poses = []
    for _ in range(n):
        center = rng.uniform(-spread, spread, 3)
        R = rotation_y(rng.uniform(-np.pi, np.pi))
        poses.append(Pose(R, -R @ center))
    return poses


def make_toy_scene(seed: int = 0, n_gaussians: int = 20, n_train: int = 8, n_test: int = 2,
                   width: int = 256, height: int = 128, jitter: float = 0.1):
    """Ground-truth cloud, rendered dataset, and jittered initial points.

    Returns ``(gt_cloud, dataset, (positions, colors))`` with colors in [0, 1].
    """
    rng = np.random.default_rng(seed)
    gt = random_gaussians(n_gaussians, rng)
    cam = EquirectCamera(width, height)
    views = []
    for i, pose in enumerate(camera_poses(n_train + n_test, rng)):
        img = render(gt, pose, cam).image
        views.append(View(np.clip(img, 0.0, 1.0), pose, f"view_{i:03d}"))
    dataset = Dataset(cam, views[:n_train], views[n_train:])
    pos = gt.positions + rng.normal(scale=jitter, size=gt.positions.shape)
    colors = np.clip(gt.sh[:, 0] * 0.28209479177387814 + 0.5 + rng.normal(scale=0.05, size=(n_gaussians, 3)), 0, 1)
    return gt, dataset, (pos, colors)


def write_toy_dataset(directory, seed: int = 0, bits: int = 16, **scene_kwargs):
    """Write a toy scene as manifest + PNGs + sparse PLY; returns the manifest path."""
    from .dataio import SparsePoints, manifest_dict, quantize, save_image, save_points_ply, write_structured

    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    _, dataset, (pos, colors) = make_toy_scene(seed, **scene_kwargs)
    frames = []
    for view in dataset.train + dataset.test:
        rel = f"images/{view.name}.png"
        save_image(view.image, directory / rel, bits=bits)
        frames.append((view.name, rel, view.pose.matrix()))
    save_points_ply(directory / "points.ply", SparsePoints(pos, quantize(colors)))
    doc = manifest_dict(dataset.camera.width, dataset.camera.height, frames, points="points.ply",
                        train=[v.name for v in dataset.train], test=[v.name for v in dataset.test])
    path = directory / "manifest.yaml"
    write_structured(doc, path)
    return path


if __name__ == "__main__":
    import sys

    print(write_toy_dataset(sys.argv[1] if len(sys.argv) > 1 else "toy_scene"))
