"""Resampling panoramas into pinhole views for perspective-crop evaluation."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import map_coordinates

from .camera import PerspectiveCamera, perspective_rays, yaw_pitch_rotation

CUBE_FACES = (
    ("front", 0.0, 0.0),
    ("right", 90.0, 0.0),
    ("back", 180.0, 0.0),
    ("left", 270.0, 0.0),
    ("up", 0.0, -90.0),
    ("down", 0.0, 90.0),
)


def cube_map_views(size: int):
    """(name, camera, rotation) for the six 90-degree cube faces."""
    cam = PerspectiveCamera.from_fov(90.0, size, size)
    return [(name, cam, yaw_pitch_rotation(np.radians(yaw), np.radians(pitch))) for name, yaw, pitch in CUBE_FACES]


def sample_equirect(pano: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Bilinear lookup of ``pano`` (H, W, C) along unit directions (..., 3).

    Columns wrap around the seam; rows clamp at the poles.
    """
    pano = np.asarray(pano, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    lead = dirs.shape[:-1]
    dirs = dirs.reshape(-1, 3)
    H, W = pano.shape[:2]
    lon = np.arctan2(dirs[..., 0], dirs[..., 2])
    lat = np.arcsin(np.clip(dirs[..., 1], -1.0, 1.0))
    # continuous pixel coordinates, then array indices (pixel centers at i + 0.5)
    col = (lon / np.pi + 1.0) * W / 2 - 0.5
    row = (2 * lat / np.pi + 1.0) * H / 2 - 0.5
    col = np.mod(col, W)
    padded = np.concatenate([pano, pano[:, :1]], axis=1)
    coords = np.stack([np.clip(row, 0.0, H - 1.0), col])
    if pano.ndim == 2:
        return map_coordinates(padded, coords, order=1, mode="nearest").reshape(lead)
    out = [map_coordinates(padded[..., c], coords, order=1, mode="nearest") for c in range(pano.shape[2])]
    return np.stack(out, axis=-1).reshape(lead + (pano.shape[2],))


def perspective_crop(pano: np.ndarray, cam: PerspectiveCamera, rotation: np.ndarray | None = None) -> np.ndarray:
    """Pinhole view of a panorama; ``rotation`` maps crop rays into the panorama frame."""
    rays = perspective_rays(cam)
    if rotation is not None:
        rays = rays @ np.asarray(rotation, dtype=np.float64).T
    return sample_equirect(pano, rays)
