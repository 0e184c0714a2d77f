"""Equirectangular and pinhole camera models.

Camera space follows the usual SLAM convention: +X right, +Y down, +Z
forward. The X-Z plane is the equator of the panorama.

All functions broadcast over leading axes: a point argument of shape
``(..., 3)`` yields results with the same leading shape.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BehindCamera, InvalidPose, OutOfBounds, PoleDegenerate, ZeroRadius

POLE_EPSILON = 1e-4
ORTHO_TOL = 1e-6


@dataclass(frozen=True)
class Pose:
    """World-to-camera rigid transform ``t = R @ m + translation``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        trans = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(rot)) and np.all(np.isfinite(trans))):
            raise InvalidPose("pose contains non-finite values")
        if np.abs(rot.T @ rot - np.eye(3)).max() > ORTHO_TOL:
            raise InvalidPose("rotation is not orthonormal")
        if abs(np.linalg.det(rot) - 1.0) > ORTHO_TOL:
            raise InvalidPose("rotation has det != +1")
        rot.flags.writeable = False
        trans.flags.writeable = False
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T) -> "Pose":
        T = np.asarray(T, dtype=np.float64).reshape(4, 4)
        if not np.allclose(T[3], [0.0, 0.0, 0.0, 1.0], atol=1e-12, rtol=0.0):
            raise InvalidPose("bottom row of T_cw must be 0 0 0 1")
        return cls(T[:3, :3], T[:3, 3])

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation


@dataclass(frozen=True)
class EquirectCamera:
    width: int
    height: int

    def __post_init__(self):
        if int(self.width) != self.width or int(self.height) != self.height:
            raise ValueError("image size must be integral")
        if self.width < 2 or self.height < 2:
            raise ValueError("equirectangular image must be at least 2x2")


@dataclass(frozen=True)
class PerspectiveCamera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    @classmethod
    def from_fov(cls, fov_deg: float, width: int, height: int) -> "PerspectiveCamera":
        f = 0.5 * width / np.tan(np.deg2rad(fov_deg) / 2)
        return cls(f, f, width / 2, height / 2, width, height)


def world_to_camera(m, pose: Pose):
    """Return camera-space points ``t`` and their distances ``t_r``."""
    m = np.asarray(m, dtype=np.float64)
    t = m @ pose.rotation.T + pose.translation
    t_r = np.sqrt(t[..., 0] ** 2 + t[..., 1] ** 2 + t[..., 2] ** 2)
    return t, t_r


def project_equirect(t, cam: EquirectCamera):
    """Project camera-space points onto the panorama.

    Returns ``(p, lonlat, s)``: pixel coordinates, (lon, lat) in radians
    and uniform screen coordinates in [-1, 1).
    """
    t = np.asarray(t, dtype=np.float64)
    tx, ty, tz = t[..., 0], t[..., 1], t[..., 2]
    t_r = np.sqrt(tx * tx + ty * ty + tz * tz)
    if np.any(t_r == 0):
        raise ZeroRadius("cannot project the camera center")
    lon = np.arctan2(tx, tz)
    # atan2 returns +pi on the negative z axis; the panorama is [-pi, pi)
    lon = np.where(lon >= np.pi, lon - 2 * np.pi, lon)
    lat = np.arcsin(np.clip(ty / t_r, -1.0, 1.0))
    s = np.stack([lon / np.pi, 2 * lat / np.pi], axis=-1)
    p = np.stack([(s[..., 0] + 1) * cam.width / 2, (s[..., 1] + 1) * cam.height / 2], axis=-1)
    return p, np.stack([lon, lat], axis=-1), s


def pole_ok(t, pole_epsilon: float = POLE_EPSILON):
    """True where the equatorial distance is large enough for a stable Jacobian."""
    t = np.asarray(t, dtype=np.float64)
    rho2 = t[..., 0] ** 2 + t[..., 2] ** 2
    r2 = rho2 + t[..., 1] ** 2
    return rho2 > (pole_epsilon**2) * r2


def _jacobian(t, width, height):
    tx, ty, tz = t[..., 0], t[..., 1], t[..., 2]
    rho2 = tx * tx + tz * tz
    rho = np.sqrt(rho2)
    r2 = rho2 + ty * ty
    a = width / (2 * np.pi)
    b = height / np.pi
    J = np.zeros(t.shape[:-1] + (2, 3))
    J[..., 0, 0] = a * tz / rho2
    J[..., 0, 2] = -a * tx / rho2
    J[..., 1, 0] = -b * tx * ty / (r2 * rho)
    J[..., 1, 1] = b * rho / r2
    J[..., 1, 2] = -b * tz * ty / (r2 * rho)
    return J


def jacobian_equirect(t, cam: EquirectCamera, pole_epsilon: float = POLE_EPSILON):
    """Analytic 2x3 Jacobian dp/dt of :func:`project_equirect`."""
    t = np.asarray(t, dtype=np.float64)
    if not np.all(pole_ok(t, pole_epsilon)):
        raise PoleDegenerate("point too close to the camera's vertical axis")
    return _jacobian(t, cam.width, cam.height)


def _jacobian_derivative(t, width, height):
    tx, ty, tz = t[..., 0], t[..., 1], t[..., 2]
    rho2 = tx * tx + tz * tz
    rho = np.sqrt(rho2)
    rho3 = rho2 * rho
    r2 = rho2 + ty * ty
    r4 = r2 * r2
    a = width / (2 * np.pi)
    b = height / np.pi
    rho4 = rho2 * rho2

    dJ = np.zeros(t.shape[:-1] + (2, 3, 3))
    dJ[..., 0, 0, 0] = -2 * a * tx * tz / rho4
    dJ[..., 0, 0, 2] = a * (tx * tx - tz * tz) / rho4
    dJ[..., 0, 2, 0] = a * (tx * tx - tz * tz) / rho4
    dJ[..., 0, 2, 2] = 2 * a * tx * tz / rho4

    common = rho2 - ty * ty
    cross = b * tx * ty * tz * (3 * rho2 + ty * ty) / (rho3 * r4)
    dJ[..., 1, 0, 0] = b * ty * (rho2 * (2 * tx * tx - tz * tz) - ty * ty * tz * tz) / (rho3 * r4)
    dJ[..., 1, 0, 1] = -b * tx * common / (rho * r4)
    dJ[..., 1, 0, 2] = cross
    dJ[..., 1, 1, 0] = -b * tx * common / (rho * r4)
    dJ[..., 1, 1, 1] = -2 * b * ty * rho / r4
    dJ[..., 1, 1, 2] = -b * tz * common / (rho * r4)
    dJ[..., 1, 2, 0] = cross
    dJ[..., 1, 2, 1] = -b * tz * common / (rho * r4)
    dJ[..., 1, 2, 2] = -b * ty * (rho2 * (tx * tx - 2 * tz * tz) + tx * tx * ty * ty) / (rho3 * r4)
    return dJ


def jacobian_derivative(t, cam: EquirectCamera, pole_epsilon: float = POLE_EPSILON):
    """Second derivatives of the projection: ``dJ[..., i, j, k] = dJ_ij / dt_k``."""
    t = np.asarray(t, dtype=np.float64)
    if not np.all(pole_ok(t, pole_epsilon)):
        raise PoleDegenerate("point too close to the camera's vertical axis")
    return _jacobian_derivative(t, cam.width, cam.height)


def screen_jacobian(t):
    """ds/dt, the Jacobian of the uniform screen coordinates (2x3)."""
    t = np.asarray(t, dtype=np.float64)
    return _jacobian(t, 2.0, 2.0)


def unproject_equirect(p, cam: EquirectCamera):
    """Unit ray directions for continuous pixel coordinates ``p``."""
    p = np.asarray(p, dtype=np.float64)
    px, py = p[..., 0], p[..., 1]
    if np.any((px < 0) | (px >= cam.width) | (py < 0) | (py > cam.height)) or not np.all(np.isfinite(p)):
        raise OutOfBounds("pixel coordinate outside the panorama")
    return _rays_from_pixels(px, py, cam.width, cam.height)


def _rays_from_pixels(px, py, width, height):
    lon = px * (2 * np.pi / width) - np.pi
    lat = (py * (2.0 / height) - 1.0) * (np.pi / 2)
    cl = np.cos(lat)
    return np.stack([cl * np.sin(lon), np.sin(lat), cl * np.cos(lon)], axis=-1)


def pixel_center_rays(cam: EquirectCamera):
    """(H, W, 3) ray directions through every pixel center."""
    px = np.arange(cam.width) + 0.5
    py = np.arange(cam.height) + 0.5
    gx, gy = np.meshgrid(px, py)
    return _rays_from_pixels(gx, gy, cam.width, cam.height)


def project_perspective(t, cam: PerspectiveCamera):
    t = np.asarray(t, dtype=np.float64)
    if np.any(t[..., 2] <= 0):
        raise BehindCamera("point has t_z <= 0")
    return np.stack(
        [cam.fx * t[..., 0] / t[..., 2] + cam.cx, cam.fy * t[..., 1] / t[..., 2] + cam.cy], axis=-1
    )


def perspective_rays(cam: PerspectiveCamera):
    """(h, w, 3) unit rays through the pixel centers of a pinhole camera."""
    u = (np.arange(cam.width) + 0.5 - cam.cx) / cam.fx
    v = (np.arange(cam.height) + 0.5 - cam.cy) / cam.fy
    gu, gv = np.meshgrid(u, v)
    d = np.stack([gu, gv, np.ones_like(gu)], axis=-1)
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def rotation_y(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rotation_x(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def yaw_pitch_rotation(yaw: float, pitch: float) -> np.ndarray:
    """Crop-to-panorama rotation. Positive yaw turns right (+X), positive pitch looks down (+Y)."""
    return rotation_y(yaw) @ rotation_x(-pitch)
