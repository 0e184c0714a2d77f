import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from equisplat.camera import EquirectCamera, Pose, rotation_y, world_to_camera
from equisplat.rasterizer import (
    ALPHA_MAX,
    bin_to_tiles,
    project_gaussian,
    project_gaussians,
    reference_render,
    render,
)
from equisplat.scene import GaussianCloud, logit, rgb_to_sh_dc

from conftest import random_cloud, random_pose

CAM = EquirectCamera(128, 64)


def single(position, color=(1.0, 0.0, 0.0), scale=0.2, opacity=0.9):
    return GaussianCloud(
        positions=np.array([position], dtype=np.float64),
        sh=rgb_to_sh_dc(np.array([color]))[:, None, :],
        rotations=np.array([[1.0, 0, 0, 0]]),
        log_scales=np.log(np.full((1, 3), scale)),
        opacity_logits=logit(np.array([opacity])),
        sh_degree=0,
    )


def test_empty_cloud_renders_background():
    out = render(GaussianCloud.empty(0, np.float64), Pose.identity(), CAM, background=(0.2, 0.4, 0.6))
    np.testing.assert_allclose(out.image, np.broadcast_to([0.2, 0.4, 0.6], (64, 128, 3)))
    np.testing.assert_array_equal(out.transmittance, 1.0)


def test_single_splat_lands_at_its_projection():
    cloud = single([0.0, 0.0, 3.0])
    out = render(cloud, Pose.identity(), CAM)
    row, col = np.unravel_index(np.argmax(out.image[..., 0]), out.image.shape[:2])
    assert (row, col) in {(31, 63), (31, 64), (32, 63), (32, 64)}
    assert out.image[..., 1].max() == 0.0


def test_alpha_is_clamped():
    cloud = single([0.0, 0.0, 3.0], opacity=0.99999, scale=1.0)
    out = render(cloud, Pose.identity(), CAM)
    assert out.transmittance.min() >= 1.0 - ALPHA_MAX - 1e-12


def test_background_composites_with_transmittance(rng):
    cloud = random_cloud(rng, 15)
    pose = random_pose(rng)
    black = render(cloud, pose, CAM)
    bg = np.array([0.3, 0.6, 0.9])
    colored = render(cloud, pose, CAM, background=bg)
    np.testing.assert_allclose(colored.image, black.image + black.transmittance[..., None] * bg, atol=1e-12)
    assert np.all((black.transmittance >= 0) & (black.transmittance <= 1))


def test_render_is_deterministic(rng):
    cloud = random_cloud(rng, 40)
    pose = random_pose(rng)
    a = render(cloud, pose, CAM).image
    b = render(cloud, pose, CAM).image
    np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("seed", range(5))
def test_matches_reference_renderer(seed):
    rng = np.random.default_rng(seed)
    cloud = random_cloud(rng, 20, opacity=(0.05, 0.3), scale=(0.05, 0.2))
    pose = random_pose(rng)
    fast = render(cloud, pose, CAM).image
    ref = reference_render(cloud, pose, CAM).image
    np.testing.assert_allclose(fast, ref, atol=1e-5)


def test_near_gaussians_are_culled():
    cloud = single([0.0, 0.0, 0.005])
    assert project_gaussian(cloud, 0, Pose.identity(), CAM) is None
    assert project_gaussian(single([0.0, 0.0, 2.0]), 0, Pose.identity(), CAM) is not None


def test_gaussian_behind_camera_is_rendered():
    cloud = single([0.0, 0.0, -3.0], color=(0.0, 1.0, 0.0))
    t, _ = world_to_camera(cloud.positions, Pose.identity())
    assert t[0, 2] < 0  # a z-depth near-plane test would cull this
    splat = project_gaussian(cloud, 0, Pose.identity(), CAM)
    assert splat is not None
    assert splat.depth == pytest.approx(3.0)
    out = render(cloud, Pose.identity(), CAM)
    # straddles the seam, so both image edges light up
    assert out.image[32, 0, 1] > 0.5
    assert out.image[32, -1, 1] > 0.5


def test_sorting_uses_distance_to_camera():
    # a is nearer by distance but b is nearer by z; b is large enough to
    # share a's tile
    a = single([0.0, 0.0, 2.0], color=(1.0, 0.0, 0.0))
    b = single([3.0, 0.0, 1.0], color=(0.0, 0.0, 1.0), scale=3.0)
    cloud = GaussianCloud.concat(b, a)
    proj = project_gaussians(cloud, Pose.identity(), CAM)
    grid = bin_to_tiles(proj, CAM)
    col, row = np.floor(proj.means[1]).astype(int)
    ids = grid.tile_instances(col // grid.tile_size, row // grid.tile_size)
    assert list(ids) == [1, 0]
    np.testing.assert_allclose(proj.depths, [np.sqrt(10.0), 2.0])


def test_tile_instances_are_depth_sorted(rng):
    cloud = random_cloud(rng, 60)
    pose = random_pose(rng)
    proj = project_gaussians(cloud, pose, CAM)
    grid = bin_to_tiles(proj, CAM)
    for ty in range(grid.tiles_y):
        for tx in range(grid.tiles_x):
            ids = grid.tile_instances(tx, ty)
            assert np.all(np.diff(proj.depths[ids]) >= 0)
            assert np.all(proj.visible[ids])


def test_binning_covers_each_splat_footprint(rng):
    cloud = random_cloud(rng, 30)
    proj = project_gaussians(cloud, random_pose(rng), CAM)
    grid = bin_to_tiles(proj, CAM)
    ts = grid.tile_size
    for g in np.flatnonzero(proj.visible):
        cx, cy = proj.means[g]
        tx = int(np.floor(cx % CAM.width) // ts)
        ty = int(min(max(cy, 0), CAM.height - 1) // ts)
        assert g in grid.tile_instances(tx, ty)


def yaw_shifted(pose: Pose, k: int, width: int) -> Pose:
    R = rotation_y(-2 * np.pi * k / width)
    return Pose(R @ pose.rotation, R @ pose.translation)


@given(st.integers(-40, 40), st.integers(0, 10_000))
def test_integer_yaw_shift_rolls_the_image(k, seed):
    rng = np.random.default_rng(seed)
    cloud = random_cloud(rng, 12)
    pose = random_pose(rng)
    a = render(cloud, pose, CAM).image
    b = render(cloud, yaw_shifted(pose, k, CAM.width), CAM).image
    np.testing.assert_allclose(b, np.roll(a, -k, axis=1), atol=1e-3)


def test_splat_is_confined_to_its_radius_box():
    cloud = single([0.0, 0.0, 2.0], scale=0.02, opacity=0.99)
    out = render(cloud, Pose.identity(), CAM)
    cx, cy = out.projections.means[0]
    r = out.projections.radii[0]
    px = np.arange(CAM.width) + 0.5
    py = np.arange(CAM.height) + 0.5
    outside = (np.abs(px[None, :] - cx) > r) | (np.abs(py[:, None] - cy) > r)
    assert outside.any() and (~outside).any()
    assert np.all(out.image[outside] == 0.0)
    assert np.all(out.transmittance[outside] == 1.0)
