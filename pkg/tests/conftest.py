import numpy as np
import pytest
from hypothesis import settings

from equisplat.camera import EquirectCamera, Pose, rotation_x, rotation_y
from equisplat.scene import GaussianCloud, logit, num_sh_coeffs

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_pose(rng, spread=0.3) -> Pose:
    R = rotation_y(rng.uniform(-np.pi, np.pi)) @ rotation_x(rng.uniform(-0.3, 0.3))
    center = rng.uniform(-spread, spread, 3)
    return Pose(R, -R @ center)


def random_cloud(rng, n, sh_degree=1, radius=(1.5, 3.0), scale=(0.05, 0.3), opacity=(0.1, 0.9),
                 dtype=np.float64, max_lat_deg=70.0) -> GaussianCloud:
    lon = rng.uniform(-np.pi, np.pi, n)
    lat = np.deg2rad(rng.uniform(-max_lat_deg, max_lat_deg, n))
    r = rng.uniform(*radius, n)
    pos = r[:, None] * np.stack([np.cos(lat) * np.sin(lon), np.sin(lat), np.cos(lat) * np.cos(lon)], -1)
    sh = rng.normal(scale=0.3, size=(n, num_sh_coeffs(sh_degree), 3))
    q = rng.normal(size=(n, 4))
    cloud = GaussianCloud(pos, sh, q, np.log(rng.uniform(*scale, (n, 3))), logit(rng.uniform(*opacity, n)),
                          sh_degree=sh_degree)
    return cloud.astype(dtype)


@pytest.fixture(scope="session")
def small_cam():
    return EquirectCamera(64, 32)


@pytest.fixture(scope="session")
def toy_dir(tmp_path_factory):
    from equisplat.synthetic import write_toy_dataset

    d = tmp_path_factory.mktemp("toy")
    return write_toy_dataset(d, width=128, height=64, n_gaussians=12, n_train=4, n_test=2)


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE_RESULTS = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, ok, title, detail in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {title}  ({detail})")
