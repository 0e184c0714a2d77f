"""Gaussian cloud storage, 3D covariances and spherical-harmonic color."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyPointCloud

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)

MAX_SH_DEGREE = 3
INIT_OPACITY = 0.1


def num_sh_coeffs(degree: int) -> int:
    return (degree + 1) ** 2


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p / (1.0 - p))


@dataclass
class GaussianCloud:
    """Raw (pre-activation) parameters of N Gaussians.

    ``log_scales`` and ``opacity_logits`` are stored before their exp/sigmoid
    activations and ``rotations`` are (w, x, y, z) quaternions that need not
    be normalized. Arrays keep whatever float dtype they were created with;
    float32 is the on-disk default.
    """

    positions: np.ndarray
    sh: np.ndarray  # (N, (sh_degree+1)**2, 3)
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    sh_degree: int = MAX_SH_DEGREE
    active_sh_degree: int | None = field(default=None)

    def __post_init__(self):
        n = len(self.positions)
        if not 0 <= self.sh_degree <= MAX_SH_DEGREE:
            raise ValueError(f"sh_degree must be in [0, {MAX_SH_DEGREE}]")
        self.positions = np.asarray(self.positions).reshape(n, 3)
        self.sh = np.asarray(self.sh).reshape(n, num_sh_coeffs(self.sh_degree), 3)
        self.rotations = np.asarray(self.rotations).reshape(n, 4)
        self.log_scales = np.asarray(self.log_scales).reshape(n, 3)
        self.opacity_logits = np.asarray(self.opacity_logits).reshape(n)
        if self.active_sh_degree is None:
            self.active_sh_degree = self.sh_degree
        self.active_sh_degree = min(self.active_sh_degree, self.sh_degree)

    PARAMS = ("positions", "sh", "rotations", "log_scales", "opacity_logits")

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def count(self) -> int:
        return len(self.positions)

    @classmethod
    def empty(cls, sh_degree: int = MAX_SH_DEGREE, dtype=np.float32) -> "GaussianCloud":
        k = num_sh_coeffs(sh_degree)
        return cls(
            np.zeros((0, 3), dtype),
            np.zeros((0, k, 3), dtype),
            np.zeros((0, 4), dtype),
            np.zeros((0, 3), dtype),
            np.zeros((0,), dtype),
            sh_degree=sh_degree,
        )

    def astype(self, dtype) -> "GaussianCloud":
        return GaussianCloud(
            *(getattr(self, name).astype(dtype) for name in self.PARAMS),
            sh_degree=self.sh_degree,
            active_sh_degree=self.active_sh_degree,
        )

    def copy(self) -> "GaussianCloud":
        return self.astype(self.positions.dtype)

    def subset(self, index) -> "GaussianCloud":
        return GaussianCloud(
            *(getattr(self, name)[index] for name in self.PARAMS),
            sh_degree=self.sh_degree,
            active_sh_degree=self.active_sh_degree,
        )

    @staticmethod
    def concat(a: "GaussianCloud", b: "GaussianCloud") -> "GaussianCloud":
        return GaussianCloud(
            *(np.concatenate([getattr(a, n), getattr(b, n)]) for n in GaussianCloud.PARAMS),
            sh_degree=a.sh_degree,
            active_sh_degree=a.active_sh_degree,
        )

    # activated views
    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales.astype(np.float64))

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits.astype(np.float64))

    @property
    def unit_rotations(self) -> np.ndarray:
        q = self.rotations.astype(np.float64)
        return q / np.linalg.norm(q, axis=-1, keepdims=True)

    def covariances(self) -> np.ndarray:
        return build_covariance3d(self.rotations, self.scales)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(getattr(self, n))) for n in self.PARAMS)


def quat_to_rotmat(q) -> np.ndarray:
    """Rotation matrices for (w, x, y, z) quaternions; normalizes internally."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quat_to_rotmat_backward(q, dR) -> np.ndarray:
    """Gradient w.r.t. the raw quaternion given dL/dR, including normalization."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    u = q / norm
    w, x, y, z = u[..., 0], u[..., 1], u[..., 2], u[..., 3]
    g = dR
    dw = 2 * (
        -z * g[..., 0, 1] + y * g[..., 0, 2] + z * g[..., 1, 0]
        - x * g[..., 1, 2] - y * g[..., 2, 0] + x * g[..., 2, 1]
    )
    dx = 2 * (
        y * g[..., 0, 1] + z * g[..., 0, 2] + y * g[..., 1, 0]
        - 2 * x * g[..., 1, 1] - w * g[..., 1, 2] + z * g[..., 2, 0]
        + w * g[..., 2, 1] - 2 * x * g[..., 2, 2]
    )
    dy = 2 * (
        -2 * y * g[..., 0, 0] + x * g[..., 0, 1] + w * g[..., 0, 2]
        + x * g[..., 1, 0] + z * g[..., 1, 2] - w * g[..., 2, 0]
        + z * g[..., 2, 1] - 2 * y * g[..., 2, 2]
    )
    dz = 2 * (
        -2 * z * g[..., 0, 0] - w * g[..., 0, 1] + x * g[..., 0, 2]
        + w * g[..., 1, 0] - 2 * z * g[..., 1, 1] + y * g[..., 1, 2]
        + x * g[..., 2, 0] + y * g[..., 2, 1]
    )
    du = np.stack([dw, dx, dy, dz], axis=-1)
    # project out the radial component of the normalization
    du = du - u * np.sum(du * u, axis=-1, keepdims=True)
    return du / norm


def build_covariance3d(q, scales) -> np.ndarray:
    """Sigma = R diag(S)^2 R^T for each Gaussian."""
    R = quat_to_rotmat(q)
    M = R * np.asarray(scales, dtype=np.float64)[..., None, :]
    return M @ np.swapaxes(M, -1, -2)


def sh_basis(dirs, degree: int) -> np.ndarray:
    """Real SH basis values, shape (..., (degree+1)**2)."""
    dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    out = [np.full(x.shape, SH_C0)]
    if degree >= 1:
        out += [-SH_C1 * y, SH_C1 * z, -SH_C1 * x]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out += [
            SH_C2[0] * x * y,
            SH_C2[1] * y * z,
            SH_C2[2] * (2 * zz - xx - yy),
            SH_C2[3] * x * z,
            SH_C2[4] * (xx - yy),
        ]
    if degree >= 3:
        out += [
            SH_C3[0] * y * (3 * xx - yy),
            SH_C3[1] * x * y * z,
            SH_C3[2] * y * (4 * zz - xx - yy),
            SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy),
            SH_C3[4] * x * (4 * zz - xx - yy),
            SH_C3[5] * z * (xx - yy),
            SH_C3[6] * x * (xx - 3 * yy),
        ]
    return np.stack(out, axis=-1)


def sh_basis_grad(dirs, degree: int) -> np.ndarray:
    """Derivatives of :func:`sh_basis` w.r.t. (x, y, z), shape (..., K, 3)."""
    dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    zero = np.zeros_like(x)
    rows = [(zero, zero, zero)]
    if degree >= 1:
        c = np.full_like(x, SH_C1)
        rows += [(zero, -c, zero), (zero, zero, c), (-c, zero, zero)]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        rows += [
            (SH_C2[0] * y, SH_C2[0] * x, zero),
            (zero, SH_C2[1] * z, SH_C2[1] * y),
            (-2 * SH_C2[2] * x, -2 * SH_C2[2] * y, 4 * SH_C2[2] * z),
            (SH_C2[3] * z, zero, SH_C2[3] * x),
            (2 * SH_C2[4] * x, -2 * SH_C2[4] * y, zero),
        ]
    if degree >= 3:
        rows += [
            (SH_C3[0] * 6 * x * y, SH_C3[0] * (3 * xx - 3 * yy), zero),
            (SH_C3[1] * y * z, SH_C3[1] * x * z, SH_C3[1] * x * y),
            (-2 * SH_C3[2] * x * y, SH_C3[2] * (4 * zz - xx - 3 * yy), 8 * SH_C3[2] * y * z),
            (-6 * SH_C3[3] * x * z, -6 * SH_C3[3] * y * z, SH_C3[3] * (6 * zz - 3 * xx - 3 * yy)),
            (SH_C3[4] * (4 * zz - 3 * xx - yy), -2 * SH_C3[4] * x * y, 8 * SH_C3[4] * x * z),
            (2 * SH_C3[5] * x * z, -2 * SH_C3[5] * y * z, SH_C3[5] * (xx - yy)),
            (SH_C3[6] * (3 * xx - 3 * yy), -6 * SH_C3[6] * x * y, zero),
        ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def eval_sh_raw(sh_coeffs, dirs, degree: int) -> np.ndarray:
    """Unclamped color: basis . coeffs + 0.5. Only the first (degree+1)**2 coefficients are used."""
    sh_coeffs = np.asarray(sh_coeffs, dtype=np.float64)
    k = num_sh_coeffs(degree)
    basis = sh_basis(dirs, degree)
    return np.einsum("...k,...kc->...c", basis, sh_coeffs[..., :k, :]) + 0.5


def eval_sh(sh_coeffs, view_dir, degree: int) -> np.ndarray:
    """View-dependent RGB, clamped at zero from below."""
    return np.maximum(eval_sh_raw(sh_coeffs, view_dir, degree), 0.0)


def rgb_to_sh_dc(rgb):
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / SH_C0


def init_from_points(positions, colors, sh_degree: int = MAX_SH_DEGREE, dtype=np.float32) -> GaussianCloud:
    """One isotropic Gaussian per input point.

    ``colors`` are RGB in [0, 1]. Scales come from the mean distance to the
    three nearest neighbours, opacity starts at 0.1 and rotation at identity.
    """
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    colors = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
    n = len(positions)
    if n == 0:
        raise EmptyPointCloud("cannot initialize from an empty point cloud")
    if len(colors) != n:
        raise ValueError("positions and colors differ in length")

    if n > 1:
        k = min(4, n)
        dist, _ = cKDTree(positions).query(positions, k=k)
        mean_dist = np.mean(dist[:, 1:], axis=1)
    else:
        mean_dist = np.zeros(1)
    # coincident points would otherwise give log(0)
    mean_dist = np.maximum(mean_dist, 1e-4)

    sh = np.zeros((n, num_sh_coeffs(sh_degree), 3))
    sh[:, 0] = rgb_to_sh_dc(colors)
    rotations = np.zeros((n, 4))
    rotations[:, 0] = 1.0
    log_scales = np.repeat(np.log(mean_dist)[:, None], 3, axis=1)
    opacity = np.full(n, logit(INIT_OPACITY))
    return GaussianCloud(
        positions.astype(dtype),
        sh.astype(dtype),
        rotations.astype(dtype),
        log_scales.astype(dtype),
        opacity.astype(dtype),
        sh_degree=sh_degree,
        active_sh_degree=0,
    )
