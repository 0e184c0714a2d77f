"""Analytic backward pass of the equirectangular rasterizer.

Per-pixel gradients are pushed back through alpha blending tile by tile
into per-instance buffers (an instance belongs to exactly one tile, so
tiles never write to the same slot). The per-Gaussian reduction then
runs in a fixed order, which keeps results identical for any thread
count. The geometric part of the chain (2D covariance, projection
Jacobian and its derivative, quaternion and scale activations) is
vectorized over Gaussians.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .camera import EquirectCamera, Pose, _jacobian_derivative, screen_jacobian
from .errors import StateMismatch
from .rasterizer import ALPHA_MAX, ALPHA_MIN, RenderOutput, _wrap_dx, state_fingerprint
from .scene import GaussianCloud, quat_to_rotmat, quat_to_rotmat_backward, sh_basis, sh_basis_grad


@dataclass
class GradientBuffer:
    """Raw-parameter gradients plus screen-space densification statistics.

    ``d_screen`` holds dL/ds (uniform screen units) from the most recent
    backward pass; ``screen_norm_sum`` and ``screen_hits`` accumulate
    across passes until :meth:`reset_screen_stats`.
    """

    d_positions: np.ndarray
    d_sh: np.ndarray
    d_rotations: np.ndarray
    d_log_scales: np.ndarray
    d_opacity_logits: np.ndarray
    d_screen: np.ndarray
    screen_norm_sum: np.ndarray
    screen_hits: np.ndarray

    @classmethod
    def zeros(cls, n: int, n_sh: int) -> "GradientBuffer":
        return cls(
            np.zeros((n, 3)),
            np.zeros((n, n_sh, 3)),
            np.zeros((n, 4)),
            np.zeros((n, 3)),
            np.zeros(n),
            np.zeros((n, 2)),
            np.zeros(n),
            np.zeros(n, dtype=np.int64),
        )

    def __len__(self):
        return len(self.d_positions)

    def param_grads(self) -> dict:
        return {
            "positions": self.d_positions,
            "sh": self.d_sh,
            "rotations": self.d_rotations,
            "log_scales": self.d_log_scales,
            "opacity_logits": self.d_opacity_logits,
        }

    def record_screen_hit(self, ids, d_screen) -> None:
        ids = np.asarray(ids)
        self.screen_norm_sum[ids] += np.linalg.norm(np.asarray(d_screen, dtype=np.float64).reshape(-1, 2), axis=-1)
        self.screen_hits[ids] += 1

    def reset_screen_stats(self) -> None:
        self.screen_norm_sum[:] = 0.0
        self.screen_hits[:] = 0


def d_screen_norm(buf: GradientBuffer, gaussian_id=None):
    """Mean of ||dL/ds|| over the passes that saw the Gaussian (0 if never hit)."""
    hits = buf.screen_hits if gaussian_id is None else buf.screen_hits[gaussian_id]
    sums = buf.screen_norm_sum if gaussian_id is None else buf.screen_norm_sum[gaussian_id]
    return np.where(hits > 0, sums / np.maximum(hits, 1), 0.0)


@numba.njit(parallel=True, cache=True)
def _blend_backward_kernel(tile_ranges, instance_ids, means, radii, conics, opac, colors, bg,
                           width, height, tile_size, tiles_x, final_T, n_contrib, d_image,
                           d_color_i, d_conic_i, d_mean_i, d_opac_i):
    n_tiles = tile_ranges.shape[0]
    for tile in numba.prange(n_tiles):
        ty = tile // tiles_x
        tx = tile - ty * tiles_x
        start = tile_ranges[tile, 0]
        for iy in range(ty * tile_size, min((ty + 1) * tile_size, height)):
            py = iy + 0.5
            for ix in range(tx * tile_size, min((tx + 1) * tile_size, width)):
                px = ix + 0.5
                T_final = final_T[iy, ix]
                T = T_final
                dr = d_image[iy, ix, 0]
                dg = d_image[iy, ix, 1]
                db = d_image[iy, ix, 2]
                bg_dot = bg[0] * dr + bg[1] * dg + bg[2] * db
                acc_r = 0.0
                acc_g = 0.0
                acc_b = 0.0
                last_alpha = 0.0
                last_r = 0.0
                last_g = 0.0
                last_b = 0.0
                for k in range(start + n_contrib[iy, ix] - 1, start - 1, -1):
                    gid = instance_ids[k]
                    dx = _wrap_dx(means[gid, 0] - px, width)
                    dy = means[gid, 1] - py
                    if abs(dx) > radii[gid] or abs(dy) > radii[gid]:
                        continue
                    ca = conics[gid, 0]
                    cb = conics[gid, 1]
                    cc = conics[gid, 2]
                    G = np.exp(-0.5 * (ca * dx * dx + cc * dy * dy) - cb * dx * dy)
                    raw_alpha = opac[gid] * G
                    alpha = min(ALPHA_MAX, raw_alpha)
                    if alpha < ALPHA_MIN:
                        continue
                    T = T / (1.0 - alpha)
                    w = alpha * T
                    d_color_i[k, 0] += w * dr
                    d_color_i[k, 1] += w * dg
                    d_color_i[k, 2] += w * db

                    acc_r = last_alpha * last_r + (1.0 - last_alpha) * acc_r
                    acc_g = last_alpha * last_g + (1.0 - last_alpha) * acc_g
                    acc_b = last_alpha * last_b + (1.0 - last_alpha) * acc_b
                    cr = colors[gid, 0]
                    cg = colors[gid, 1]
                    cbl = colors[gid, 2]
                    d_alpha = T * ((cr - acc_r) * dr + (cg - acc_g) * dg + (cbl - acc_b) * db)
                    d_alpha -= T_final / (1.0 - alpha) * bg_dot
                    last_alpha = alpha
                    last_r = cr
                    last_g = cg
                    last_b = cbl

                    if raw_alpha > ALPHA_MAX:
                        continue  # clamped: no gradient through o or G
                    d_opac_i[k] += G * d_alpha
                    dG = opac[gid] * d_alpha * G
                    d_mean_i[k, 0] += dG * (-ca * dx - cb * dy)
                    d_mean_i[k, 1] += dG * (-cc * dy - cb * dx)
                    d_conic_i[k, 0] += -0.5 * dx * dx * dG
                    d_conic_i[k, 1] += -dx * dy * dG
                    d_conic_i[k, 2] += -0.5 * dy * dy * dG


def blend_backward(render_out: RenderOutput, d_image):
    """Per-Gaussian gradients w.r.t. color, conic, pixel mean and activated opacity."""
    proj = render_out.projections
    grid = render_out.grid
    cam = render_out.camera
    n = len(proj)
    n_inst = grid.num_instances
    d_color_i = np.zeros((n_inst, 3))
    d_conic_i = np.zeros((n_inst, 3))
    d_mean_i = np.zeros((n_inst, 2))
    d_opac_i = np.zeros(n_inst)
    _blend_backward_kernel(
        grid.tile_ranges, grid.instance_ids, proj.means, proj.radii.astype(np.float64), proj.conics, proj.opacities, proj.colors,
        render_out.background, cam.width, cam.height, grid.tile_size, grid.tiles_x,
        render_out.transmittance, render_out.n_contrib, np.ascontiguousarray(d_image, dtype=np.float64),
        d_color_i, d_conic_i, d_mean_i, d_opac_i,
    )
    # fixed-order reduction over instances
    d_color = np.zeros((n, 3))
    d_conic = np.zeros((n, 3))
    d_mean = np.zeros((n, 2))
    d_opac = np.zeros(n)
    ids = grid.instance_ids
    np.add.at(d_color, ids, d_color_i)
    np.add.at(d_conic, ids, d_conic_i)
    np.add.at(d_mean, ids, d_mean_i)
    np.add.at(d_opac, ids, d_opac_i)
    return d_color, d_conic, d_mean, d_opac


def backward(
    render_out: RenderOutput,
    d_image,
    cloud: GaussianCloud,
    pose: Pose,
    cam: EquirectCamera,
    buffer: GradientBuffer | None = None,
) -> GradientBuffer:
    """Gradients of a scalar loss w.r.t. every raw Gaussian parameter.

    ``d_image`` is dL/d(rendered image). When ``buffer`` is given its
    parameter gradients are overwritten and its screen statistics keep
    accumulating; otherwise a fresh buffer is returned.
    """
    if render_out.grid is None:
        raise StateMismatch("backward needs the tiled render output, not the reference renderer's")
    if cam != render_out.camera or state_fingerprint(cloud, pose, cam) != render_out.fingerprint:
        raise StateMismatch("render output does not correspond to this cloud/pose/camera")
    d_image = np.asarray(d_image, dtype=np.float64)
    if d_image.shape != render_out.image.shape:
        raise StateMismatch(f"d_image shape {d_image.shape} != image shape {render_out.image.shape}")

    n = len(cloud)
    n_sh = cloud.sh.shape[1]
    if buffer is None or len(buffer) != n or buffer.d_sh.shape[1] != n_sh:
        buffer = GradientBuffer.zeros(n, n_sh)
    proj = render_out.projections
    vis = proj.visible

    d_color, d_conic, d_mean, d_opac = blend_backward(render_out, d_image)

    d_pos = np.zeros((n, 3))
    d_sh = np.zeros((n, n_sh, 3))
    d_rot = np.zeros((n, 4))
    d_lsc = np.zeros((n, 3))
    d_screen = np.zeros((n, 2))

    # opacity through the sigmoid
    o = proj.opacities
    d_logit = np.where(vis, d_opac * o * (1.0 - o), 0.0)

    idx = np.flatnonzero(vis)
    if len(idx):
        # color -> SH coefficients and view direction
        deg = proj.sh_degree
        k = (deg + 1) ** 2
        dirs = proj.dirs[idx]
        d_raw = d_color[idx] * (proj.color_raw[idx] > 0)
        basis = sh_basis(dirs, deg)
        d_sh[idx, :k] = basis[:, :, None] * d_raw[:, None, :]
        sh = cloud.sh[idx, :k].astype(np.float64)
        d_dir = np.einsum("nc,nkc,nkj->nj", d_raw, sh, sh_basis_grad(dirs, deg))
        dist = proj.depths[idx][:, None]
        d_pos[idx] += (d_dir - dirs * np.sum(d_dir * dirs, axis=-1, keepdims=True)) / dist

        # conic -> filtered 2D covariance (low-pass shift has unit derivative)
        conic = proj.conics[idx]
        Q = np.stack([conic[:, 0], conic[:, 1], conic[:, 1], conic[:, 2]], axis=-1).reshape(-1, 2, 2)
        dc = d_conic[idx]
        dQ = np.stack([dc[:, 0], 0.5 * dc[:, 1], 0.5 * dc[:, 1], dc[:, 2]], axis=-1).reshape(-1, 2, 2)
        d_cov2 = -Q @ dQ @ Q

        # cov2 = J V J^T
        J = proj.J[idx]
        V = proj.view_cov[idx]
        d_V = np.swapaxes(J, -1, -2) @ d_cov2 @ J
        d_J = 2.0 * d_cov2 @ J @ V

        # V = W Sigma W^T, Sigma = (R S)(R S)^T
        Wr = pose.rotation
        d_sigma = Wr.T @ d_V @ Wr
        q = cloud.rotations[idx].astype(np.float64)
        R = quat_to_rotmat(q)
        s = np.exp(cloud.log_scales[idx].astype(np.float64))
        M = R * s[:, None, :]
        d_M = 2.0 * d_sigma @ M
        d_s = np.sum(d_M * R, axis=1)
        d_R = d_M * s[:, None, :]
        d_lsc[idx] = d_s * s
        d_rot[idx] = quat_to_rotmat_backward(q, d_R)

        # mean path: dL/ds = (dp/ds)^T dL/dp, then ds/dt
        t = proj.t[idx]
        ds = d_mean[idx] * np.array([cam.width / 2.0, cam.height / 2.0])
        d_screen[idx] = ds
        d_t = np.einsum("ni,nij->nj", ds, screen_jacobian(t))
        # covariance path through dJ/dt
        d_t += np.einsum("nij,nijk->nk", d_J, _jacobian_derivative(t, cam.width, cam.height))
        d_pos[idx] += d_t @ Wr

        buffer.record_screen_hit(idx, ds)

    buffer.d_positions[:] = d_pos
    buffer.d_sh[:] = d_sh
    buffer.d_rotations[:] = d_rot
    buffer.d_log_scales[:] = d_lsc
    buffer.d_opacity_logits[:] = d_logit
    buffer.d_screen[:] = d_screen
    return buffer
