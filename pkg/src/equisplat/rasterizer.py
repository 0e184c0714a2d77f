"""Tile-based equirectangular Gaussian rasterizer.

The pipeline is project -> bin -> blend. Splats are sorted by their
Euclidean distance to the camera center rather than by z, so Gaussians
behind the camera are rendered like any other. Horizontal offsets are
taken modulo the image width so splats straddling the +-pi seam show up
on both image edges.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field

import numba
import numpy as np

from .camera import EquirectCamera, Pose, _jacobian, pole_ok, world_to_camera
from .scene import GaussianCloud, build_covariance3d, eval_sh_raw, num_sh_coeffs

TILE_SIZE = 16
LOWPASS = 0.3
ALPHA_MIN = 1.0 / 255.0
ALPHA_MAX = 0.99
T_MIN = 1e-4
NEAR_EPSILON = 0.01
POLE_EPSILON = 1e-4


THREADS_ENV = "EQUISPLAT_NUM_THREADS"


def set_num_threads(n: int | None = None) -> int:
    """Set the kernel thread count (default: $EQUISPLAT_NUM_THREADS, else all cores)."""
    if n is None:
        env = os.environ.get(THREADS_ENV)
        if not env:
            return numba.get_num_threads()
        n = int(env)
    n = max(1, min(int(n), numba.config.NUMBA_NUM_THREADS))
    numba.set_num_threads(n)
    return n


# try OpenMP before TBB; older system TBB builds only produce a warning
if "NUMBA_THREADING_LAYER_PRIORITY" not in os.environ:
    numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]
set_num_threads()


@dataclass
class Projections:
    """Screen-space state of every Gaussian in one view.

    Arrays are indexed by Gaussian id; culled Gaussians have
    ``visible == False`` and radius 0. The geometric intermediates (``t``,
    ``J``, ``view_cov``, ``dirs``, ``color_raw``) are kept for the backward
    pass.
    """

    visible: np.ndarray
    means: np.ndarray  # (N, 2) pixel centers
    cov2: np.ndarray  # (N, 3) filtered a, b, c
    conics: np.ndarray  # (N, 3)
    radii: np.ndarray  # (N,) int
    depths: np.ndarray  # (N,) t_r
    colors: np.ndarray  # (N, 3)
    opacities: np.ndarray  # (N,)
    t: np.ndarray
    J: np.ndarray
    view_cov: np.ndarray  # W Sigma W^T
    dirs: np.ndarray
    color_raw: np.ndarray
    sh_degree: int

    def __len__(self):
        return len(self.visible)


@dataclass
class SplatProjection:
    gaussian_id: int
    p: np.ndarray
    cov2: np.ndarray
    conic: np.ndarray
    radius: int
    depth: float
    color: np.ndarray
    alpha_base: float


@dataclass
class TileGrid:
    tile_size: int
    tiles_x: int
    tiles_y: int
    instance_ids: np.ndarray  # gaussian id of each instance, sorted by (tile, depth, id)
    tile_ranges: np.ndarray  # (tiles_x * tiles_y, 2) [start, end) into instance_ids

    @property
    def num_instances(self) -> int:
        return len(self.instance_ids)

    def tile_instances(self, tx: int, ty: int) -> np.ndarray:
        start, end = self.tile_ranges[ty * self.tiles_x + tx]
        return self.instance_ids[start:end]


@dataclass
class RenderOutput:
    image: np.ndarray  # (H, W, 3)
    transmittance: np.ndarray  # (H, W)
    n_contrib: np.ndarray  # (H, W) list position after the last contributor
    projections: Projections
    grid: TileGrid | None
    camera: EquirectCamera
    background: np.ndarray
    fingerprint: bytes = field(repr=False, default=b"")


def state_fingerprint(cloud: GaussianCloud, pose: Pose, cam: EquirectCamera) -> bytes:
    h = hashlib.blake2b(digest_size=16)
    h.update(np.array([len(cloud), cloud.sh_degree, cloud.active_sh_degree, cam.width, cam.height]).tobytes())
    h.update(pose.matrix().tobytes())
    for name in GaussianCloud.PARAMS:
        h.update(np.ascontiguousarray(getattr(cloud, name)).tobytes())
    return h.digest()


def project_gaussians(
    cloud: GaussianCloud,
    pose: Pose,
    cam: EquirectCamera,
    sh_degree: int | None = None,
    near_epsilon: float = NEAR_EPSILON,
    pole_epsilon: float = POLE_EPSILON,
    alpha_cull: float = ALPHA_MIN,
) -> Projections:
    """Project all Gaussians onto the panorama (vectorized)."""
    n = len(cloud)
    if sh_degree is None:
        sh_degree = cloud.active_sh_degree
    sh_degree = min(sh_degree, cloud.sh_degree)

    m = cloud.positions.astype(np.float64)
    t, t_r = world_to_camera(m, pose)
    opac = cloud.opacities
    visible = (t_r >= near_epsilon) & pole_ok(t, pole_epsilon) & (opac >= alpha_cull)

    means = np.zeros((n, 2))
    J = np.zeros((n, 2, 3))
    if np.any(visible):
        tv = t[visible]
        lon = np.arctan2(tv[:, 0], tv[:, 2])
        lon = np.where(lon >= np.pi, lon - 2 * np.pi, lon)
        lat = np.arcsin(np.clip(tv[:, 1] / t_r[visible], -1.0, 1.0))
        means[visible, 0] = (lon / np.pi + 1) * cam.width / 2
        means[visible, 1] = (2 * lat / np.pi + 1) * cam.height / 2
        J[visible] = _jacobian(tv, cam.width, cam.height)

    Wr = pose.rotation
    sigma = build_covariance3d(cloud.rotations, cloud.scales)
    view_cov = Wr @ sigma @ Wr.T
    cov = J @ view_cov @ np.swapaxes(J, -1, -2)
    a = cov[:, 0, 0] + LOWPASS
    b = cov[:, 0, 1]
    c = cov[:, 1, 1] + LOWPASS
    det = a * c - b * b
    conics = np.stack([c / det, -b / det, a / det], axis=-1)
    mid = 0.5 * (a + c)
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radii = np.where(visible, np.ceil(3.0 * np.sqrt(lam_max)), 0).astype(np.int64)

    safe_r = np.where(t_r > 0, t_r, 1.0)
    dirs = (m - pose.center) / safe_r[:, None]
    color_raw = eval_sh_raw(cloud.sh, dirs, sh_degree)
    colors = np.maximum(color_raw, 0.0)

    return Projections(
        visible=visible,
        means=means,
        cov2=np.stack([a, b, c], axis=-1),
        conics=np.where(visible[:, None], conics, 0.0),
        radii=radii,
        depths=t_r,
        colors=colors,
        opacities=opac,
        t=t,
        J=J,
        view_cov=view_cov,
        dirs=dirs,
        color_raw=color_raw,
        sh_degree=sh_degree,
    )


def project_gaussian(cloud: GaussianCloud, index: int, pose: Pose, cam: EquirectCamera):
    """Project a single Gaussian; returns ``None`` when it is culled."""
    proj = project_gaussians(cloud.subset(slice(index, index + 1)), pose, cam)
    if not proj.visible[0]:
        return None
    return SplatProjection(
        gaussian_id=index,
        p=proj.means[0],
        cov2=proj.cov2[0],
        conic=proj.conics[0],
        radius=int(proj.radii[0]),
        depth=float(proj.depths[0]),
        color=proj.colors[0],
        alpha_base=float(proj.opacities[0]),
    )


@numba.njit(cache=True)
def _tile_columns(cx, r, width, tile_size, tiles_x, out):
    """Write the (deduplicated) tile columns covered by [cx - r, cx + r] mod width."""
    if 2 * r >= width:
        for i in range(tiles_x):
            out[i] = True
        return
    lo = cx - r
    hi = cx + r
    for shift in (-width, 0.0, width):
        u0 = max(lo + shift, 0.0)
        u1 = min(hi + shift, width - 1e-9)
        if u0 > u1:
            continue
        for tx in range(int(u0 // tile_size), int(u1 // tile_size) + 1):
            out[tx] = True


@numba.njit(cache=True)
def _count_and_fill(means, radii, visible, width, height, tile_size, tiles_x, tiles_y, fill, tile_out, gid_out):
    cols = np.zeros(tiles_x, dtype=np.bool_)
    k = 0
    for g in range(len(radii)):
        if not visible[g] or radii[g] <= 0:
            continue
        r = radii[g]
        v0 = max(means[g, 1] - r, 0.0)
        v1 = min(means[g, 1] + r, height - 1e-9)
        if v0 > v1:
            continue
        cols[:] = False
        _tile_columns(means[g, 0], r, width, tile_size, tiles_x, cols)
        for ty in range(int(v0 // tile_size), int(v1 // tile_size) + 1):
            for tx in range(tiles_x):
                if cols[tx]:
                    if fill:
                        tile_out[k] = ty * tiles_x + tx
                        gid_out[k] = g
                    k += 1
    return k


def bin_to_tiles(proj: Projections, cam: EquirectCamera, tile_size: int = TILE_SIZE) -> TileGrid:
    """One instance per (Gaussian, overlapped tile), sorted by tile then depth then id."""
    tiles_x = -(-cam.width // tile_size)
    tiles_y = -(-cam.height // tile_size)
    args = (proj.means, proj.radii.astype(np.float64), proj.visible, float(cam.width), float(cam.height),
            tile_size, tiles_x, tiles_y)
    empty = np.zeros(0, dtype=np.int64)
    count = _count_and_fill(*args, False, empty, empty)
    tiles = np.empty(count, dtype=np.int64)
    gids = np.empty(count, dtype=np.int64)
    _count_and_fill(*args, True, tiles, gids)

    order = np.lexsort((gids, proj.depths[gids], tiles))
    tiles = tiles[order]
    gids = gids[order]
    n_tiles = tiles_x * tiles_y
    bounds = np.searchsorted(tiles, np.arange(n_tiles + 1))
    ranges = np.stack([bounds[:-1], bounds[1:]], axis=-1)
    return TileGrid(tile_size, tiles_x, tiles_y, gids, ranges)


@numba.njit(cache=True, inline="always")
def _wrap_dx(dx, width):
    half = 0.5 * width
    if dx > half:
        return dx - width
    if dx < -half:
        return dx + width
    return dx


@numba.njit(parallel=True, cache=True)
def _blend_forward_kernel(tile_ranges, instance_ids, means, radii, conics, opac, colors, bg,
                          width, height, tile_size, tiles_x, out_color, out_T, out_n):
    n_tiles = tile_ranges.shape[0]
    for tile in numba.prange(n_tiles):
        ty = tile // tiles_x
        tx = tile - ty * tiles_x
        start = tile_ranges[tile, 0]
        end = tile_ranges[tile, 1]
        for iy in range(ty * tile_size, min((ty + 1) * tile_size, height)):
            py = iy + 0.5
            for ix in range(tx * tile_size, min((tx + 1) * tile_size, width)):
                px = ix + 0.5
                T = 1.0
                r = 0.0
                g = 0.0
                b = 0.0
                last = 0
                for k in range(start, end):
                    gid = instance_ids[k]
                    dx = _wrap_dx(means[gid, 0] - px, width)
                    dy = means[gid, 1] - py
                    if abs(dx) > radii[gid] or abs(dy) > radii[gid]:
                        continue  # outside the splat's box; keeps the footprint independent of tile alignment
                    power = -0.5 * (conics[gid, 0] * dx * dx + conics[gid, 2] * dy * dy) - conics[gid, 1] * dx * dy
                    alpha = min(ALPHA_MAX, opac[gid] * np.exp(power))
                    if alpha < ALPHA_MIN:
                        continue
                    test_T = T * (1.0 - alpha)
                    if test_T < T_MIN:
                        break
                    w = alpha * T
                    r += colors[gid, 0] * w
                    g += colors[gid, 1] * w
                    b += colors[gid, 2] * w
                    T = test_T
                    last = k - start + 1
                out_color[iy, ix, 0] = r + T * bg[0]
                out_color[iy, ix, 1] = g + T * bg[1]
                out_color[iy, ix, 2] = b + T * bg[2]
                out_T[iy, ix] = T
                out_n[iy, ix] = last


def blend_forward(grid: TileGrid, proj: Projections, cam: EquirectCamera, background=(0.0, 0.0, 0.0)):
    """Alpha-blend every pixel center front to back. Returns (image, transmittance, n_contrib)."""
    h, w = cam.height, cam.width
    image = np.zeros((h, w, 3))
    trans = np.ones((h, w))
    n_contrib = np.zeros((h, w), dtype=np.int64)
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    _blend_forward_kernel(grid.tile_ranges, grid.instance_ids, proj.means, proj.radii.astype(np.float64),
                          proj.conics, proj.opacities, proj.colors, bg, w, h, grid.tile_size, grid.tiles_x, image, trans, n_contrib)
    return image, trans, n_contrib


def render(
    cloud: GaussianCloud,
    pose: Pose,
    cam: EquirectCamera,
    background=(0.0, 0.0, 0.0),
    tile_size: int = TILE_SIZE,
    sh_degree: int | None = None,
) -> RenderOutput:
    proj = project_gaussians(cloud, pose, cam, sh_degree=sh_degree)
    grid = bin_to_tiles(proj, cam, tile_size)
    image, trans, n_contrib = blend_forward(grid, proj, cam, background)
    return RenderOutput(
        image=image,
        transmittance=trans,
        n_contrib=n_contrib,
        projections=proj,
        grid=grid,
        camera=cam,
        background=np.asarray(background, dtype=np.float64).reshape(3),
        fingerprint=state_fingerprint(cloud, pose, cam),
    )


def reference_render(
    cloud: GaussianCloud,
    pose: Pose,
    cam: EquirectCamera,
    background=(0.0, 0.0, 0.0),
    sh_degree: int | None = None,
) -> RenderOutput:
    """Brute-force renderer: every pixel sees every Gaussian, no tiles, no radius cutoff.

    Meant as a correctness oracle on small images.
    """
    proj = project_gaussians(cloud, pose, cam, sh_degree=sh_degree)
    h, w = cam.height, cam.width
    px, py = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    color = np.zeros((h, w, 3))
    T = np.ones((h, w))
    done = np.zeros((h, w), dtype=bool)

    ids = np.flatnonzero(proj.visible)
    ids = ids[np.lexsort((ids, proj.depths[ids]))]
    for gid in ids:
        dx = proj.means[gid, 0] - px
        dx = np.where(dx > w / 2, dx - w, np.where(dx < -w / 2, dx + w, dx))
        dy = proj.means[gid, 1] - py
        ca, cb, cc = proj.conics[gid]
        G = np.exp(-0.5 * (ca * dx * dx + cc * dy * dy) - cb * dx * dy)
        alpha = np.minimum(ALPHA_MAX, proj.opacities[gid] * G)
        active = (alpha >= ALPHA_MIN) & ~done
        test_T = T * (1.0 - alpha)
        stop = active & (test_T < T_MIN)
        done |= stop
        contrib = active & ~stop
        color += np.where(contrib, alpha * T, 0.0)[..., None] * proj.colors[gid]
        T = np.where(contrib, test_T, T)

    bg = np.asarray(background, dtype=np.float64).reshape(3)
    return RenderOutput(
        image=color + T[..., None] * bg,
        transmittance=T,
        n_contrib=np.zeros((h, w), dtype=np.int64),
        projections=proj,
        grid=None,
        camera=cam,
        background=bg,
        fingerprint=state_fingerprint(cloud, pose, cam),
    )
