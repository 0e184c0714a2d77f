"""Photometric optimization: loss, Adam, densification and the training loop."""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .camera import EquirectCamera, Pose
from .errors import DimensionMismatch, StateMismatch
from .gradients import GradientBuffer, backward
from .metrics import ssim_with_grad
from .rasterizer import render
from .scene import GaussianCloud, init_from_points, logit, quat_to_rotmat

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-15


@dataclass
class TrainConfig:
    iterations: int = 32000
    lambda_ssim: float = 0.2
    sh_degree: int = 3
    sh_warmup_interval: int = 1000
    densify_until: int = 15000
    densify_interval: int = 100
    opacity_reset_interval: int = 3000
    opacity_reset_value: float = 0.01
    densify_grad_threshold: float = 2e-4
    scale_split_threshold: float = 0.01
    split_factor: float = 1.6
    prune_opacity: float = 0.005
    prune_scale_world: float = 0.1
    prune_radius_px: float = 20.0
    lr_position: float = 1.6e-4
    lr_position_final: float = 1.6e-6
    lr_sh_dc: float = 2.5e-3
    lr_sh_rest: float = 2.5e-3 / 20
    lr_opacity: float = 5e-2
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    mask_bottom_fraction: float = 0.0
    background: tuple = (0.0, 0.0, 0.0)
    seed: int = 0
    log_interval: int = 100
    checkpoint_interval: int = 0

    def __post_init__(self):
        self.background = tuple(float(v) for v in self.background)
        self.validate()

    def validate(self) -> None:
        if not 0.0 <= self.lambda_ssim <= 1.0:
            raise ValueError("lambda_ssim must lie in [0, 1]")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if not 0 <= self.sh_degree <= 3:
            raise ValueError("sh_degree must be in [0, 3]")
        for name in ("densify_interval", "opacity_reset_interval", "sh_warmup_interval", "log_interval"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in (
            "densify_grad_threshold", "scale_split_threshold", "split_factor", "prune_opacity",
            "prune_scale_world", "prune_radius_px", "opacity_reset_value",
            "lr_position", "lr_position_final", "lr_sh_dc", "lr_sh_rest", "lr_opacity", "lr_scale",
            "lr_rotation",
        ):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.mask_bottom_fraction < 1.0:
            raise ValueError("mask_bottom_fraction must lie in [0, 1)")
        if len(self.background) != 3:
            raise ValueError("background must have three components")

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return cls(**values)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["background"] = list(self.background)
        return d


@dataclass
class View:
    image: np.ndarray  # (H, W, 3) in [0, 1]
    pose: Pose
    name: str = ""


@dataclass
class Dataset:
    camera: EquirectCamera
    train: list
    test: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def masked_rows(height: int, mask_bottom_fraction: float) -> int:
    """Number of image rows kept after dropping the bottom fraction."""
    return height - int(round(mask_bottom_fraction * height))


def loss(rendered, gt, lambda_ssim: float = 0.2, mask_bottom_fraction: float = 0.0):
    """(1 - lambda) * L1 + lambda * (1 - SSIM), ignoring the masked bottom rows.

    Returns the scalar loss and dL/d(rendered).
    """
    rendered = np.asarray(rendered, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if rendered.shape != gt.shape:
        raise DimensionMismatch(f"rendered {rendered.shape} vs ground truth {gt.shape}")
    keep = masked_rows(rendered.shape[0], mask_bottom_fraction)
    r, g = rendered[:keep], gt[:keep]
    diff = r - g
    l1 = np.mean(np.abs(diff))
    grad = np.zeros_like(rendered)
    grad[:keep] = (1.0 - lambda_ssim) * np.sign(diff) / diff.size
    value = (1.0 - lambda_ssim) * l1
    if lambda_ssim > 0:
        s, ds = ssim_with_grad(r, g)
        value += lambda_ssim * (1.0 - s)
        grad[:keep] -= lambda_ssim * ds
    return float(value), grad


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


def position_lr(cfg: TrainConfig, iteration: int, scene_extent: float) -> float:
    """Log-linear decay from lr_position to lr_position_final over the run."""
    frac = 0.0 if cfg.iterations <= 0 else np.clip(iteration / cfg.iterations, 0.0, 1.0)
    lr = np.exp((1 - frac) * np.log(cfg.lr_position) + frac * np.log(cfg.lr_position_final))
    return float(lr * scene_extent)


class Adam:
    """Adam over the raw cloud parameters, one moment pair per array."""

    def __init__(self, cloud: GaussianCloud, cfg: TrainConfig, scene_extent: float = 1.0):
        self.cfg = cfg
        self.scene_extent = scene_extent
        self.step_count = 0
        self.m = {name: np.zeros(getattr(cloud, name).shape) for name in GaussianCloud.PARAMS}
        self.v = {name: np.zeros(getattr(cloud, name).shape) for name in GaussianCloud.PARAMS}

    def learning_rates(self, iteration: int, n_sh: int) -> dict:
        sh_lr = np.full((1, n_sh, 1), self.cfg.lr_sh_rest)
        sh_lr[0, 0, 0] = self.cfg.lr_sh_dc
        return {
            "positions": position_lr(self.cfg, iteration, self.scene_extent),
            "sh": sh_lr,
            "rotations": self.cfg.lr_rotation,
            "log_scales": self.cfg.lr_scale,
            "opacity_logits": self.cfg.lr_opacity,
        }

    def step(self, cloud: GaussianCloud, grads: dict, iteration: int) -> None:
        self.step_count += 1
        t = self.step_count
        lrs = self.learning_rates(iteration, cloud.sh.shape[1])
        bc1 = 1 - ADAM_BETA1**t
        bc2 = 1 - ADAM_BETA2**t
        for name in GaussianCloud.PARAMS:
            g = np.asarray(grads[name], dtype=np.float64)
            m = self.m[name]
            v = self.v[name]
            m *= ADAM_BETA1
            m += (1 - ADAM_BETA1) * g
            v *= ADAM_BETA2
            v += (1 - ADAM_BETA2) * g * g
            update = lrs[name] * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
            param = getattr(cloud, name)
            param[...] = (param.astype(np.float64) - update).astype(param.dtype)

    def remap(self, source: np.ndarray) -> None:
        """Reorder moments after densification; ``source[i] == -1`` marks a new Gaussian."""
        new = source < 0
        idx = np.where(new, 0, source)
        for store in (self.m, self.v):
            for name, arr in store.items():
                out = arr[idx] if len(arr) else np.zeros((len(source),) + arr.shape[1:])
                out[new] = 0.0
                store[name] = out

    def reset(self, name: str) -> None:
        self.m[name][:] = 0.0
        self.v[name][:] = 0.0

    def state_dict(self) -> dict:
        state = {"step_count": np.array(self.step_count)}
        for name in GaussianCloud.PARAMS:
            state[f"m_{name}"] = self.m[name]
            state[f"v_{name}"] = self.v[name]
        return state

    def load_state_dict(self, state) -> None:
        self.step_count = int(state["step_count"])
        for name in GaussianCloud.PARAMS:
            self.m[name] = np.array(state[f"m_{name}"], dtype=np.float64)
            self.v[name] = np.array(state[f"v_{name}"], dtype=np.float64)


def adam_step(cloud: GaussianCloud, grads: GradientBuffer, state: Adam, iteration: int) -> None:
    state.step(cloud, grads.param_grads(), iteration)


# ---------------------------------------------------------------------------
# densification
# ---------------------------------------------------------------------------


@dataclass
class DensifyStats:
    grad_norm_sum: np.ndarray
    hits: np.ndarray
    max_radii: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "DensifyStats":
        return cls(np.zeros(n), np.zeros(n, dtype=np.int64), np.zeros(n))

    def update(self, d_screen: np.ndarray, visible: np.ndarray, radii: np.ndarray) -> None:
        self.grad_norm_sum[visible] += np.linalg.norm(d_screen[visible], axis=-1)
        self.hits[visible] += 1
        self.max_radii[visible] = np.maximum(self.max_radii[visible], radii[visible])

    def mean_grad(self) -> np.ndarray:
        return np.where(self.hits > 0, self.grad_norm_sum / np.maximum(self.hits, 1), 0.0)

    def reset(self, n: int | None = None) -> None:
        n = len(self.hits) if n is None else n
        self.grad_norm_sum = np.zeros(n)
        self.hits = np.zeros(n, dtype=np.int64)
        self.max_radii = np.zeros(n)


@dataclass
class EditSummary:
    before: int
    cloned: int
    split: int
    pruned: int
    after: int

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def _replace_arrays(cloud: GaussianCloud, new: GaussianCloud) -> None:
    for name in GaussianCloud.PARAMS:
        setattr(cloud, name, getattr(new, name))


def densify_and_prune(
    cloud: GaussianCloud,
    stats: DensifyStats,
    cfg: TrainConfig,
    scene_extent: float,
    rng: np.random.Generator | None = None,
    prune_large: bool = True,
    optimizer: Adam | None = None,
) -> tuple[EditSummary, np.ndarray]:
    """Clone/split high-gradient Gaussians, then prune. Edits ``cloud`` in place.

    Returns the edit summary and, for each Gaussian of the new cloud, the
    index it came from in the old cloud (-1 for newly created ones).
    ``prune_large`` enables the world-scale and screen-radius pruning.
    """
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    n0 = len(cloud)
    grads = stats.mean_grad()
    selected = grads >= cfg.densify_grad_threshold
    max_scale = cloud.scales.max(axis=1) if n0 else np.zeros(0)
    big = max_scale > cfg.scale_split_threshold * scene_extent
    clone_mask = selected & ~big
    split_mask = selected & big

    clones = cloud.subset(clone_mask)

    parents = cloud.subset(split_mask)
    n_split = len(parents)
    children = parents.subset(np.repeat(np.arange(n_split), 2))
    if n_split:
        std = np.repeat(parents.scales, 2, axis=0)
        R = quat_to_rotmat(np.repeat(parents.rotations, 2, axis=0))
        offsets = np.einsum("nij,nj->ni", R, rng.normal(size=std.shape) * std)
        dtype = cloud.positions.dtype
        children.positions = (children.positions.astype(np.float64) + offsets).astype(dtype)
        children.log_scales = (np.log(std / cfg.split_factor)).astype(dtype)

    kept = cloud.subset(~split_mask)
    source = np.concatenate([
        np.flatnonzero(~split_mask),
        np.full(len(clones) + len(children), -1, dtype=np.int64),
    ])
    merged = GaussianCloud.concat(GaussianCloud.concat(kept, clones), children)
    new_radii = np.concatenate([stats.max_radii[~split_mask], np.zeros(len(clones) + len(children))])

    prune = merged.opacities < cfg.prune_opacity
    if prune_large and len(merged):
        prune |= merged.scales.max(axis=1) > cfg.prune_scale_world * scene_extent
        prune |= new_radii > cfg.prune_radius_px
    final = merged.subset(~prune)
    source = source[~prune]
    _replace_arrays(cloud, final)
    stats.reset(len(cloud))
    if optimizer is not None:
        optimizer.remap(source)

    summary = EditSummary(n0, int(clone_mask.sum()), n_split, int(prune.sum()), len(cloud))
    assert summary.after == summary.before + summary.cloned + summary.split - summary.pruned
    return summary, source


def reset_opacity(cloud: GaussianCloud, ceiling: float = 0.01) -> None:
    """Clamp every activated opacity to at most ``ceiling``."""
    cap = logit(ceiling)
    logits = cloud.opacity_logits
    logits[...] = np.minimum(logits.astype(np.float64), cap).astype(logits.dtype)


def scene_extent(poses: Sequence[Pose]) -> float:
    """1.1 x the radius of the camera centers around their mean."""
    centers = np.array([p.center for p in poses])
    radius = float(np.max(np.linalg.norm(centers - centers.mean(axis=0), axis=1))) if len(centers) else 0.0
    # a single camera (or coincident ones) has no spread
    return radius * 1.1 if radius > 1e-6 else 1.0


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


class ViewSampler:
    """Seeded epoch-wise shuffle over view indices."""

    def __init__(self, n_views: int, rng: np.random.Generator):
        self.n = n_views
        self.rng = rng
        self.queue: list[int] = []

    def next(self) -> int:
        if not self.queue:
            self.queue = list(self.rng.permutation(self.n))
        return int(self.queue.pop(0))


@dataclass
class StepRecord:
    iteration: int
    view: int
    loss: float
    count: int
    edit: EditSummary | None = None
    opacity_reset: bool = False


class Trainer:
    """Stateful reconstruction loop; :func:`train` runs it to completion."""

    def __init__(self, dataset: Dataset, init_points, cfg: TrainConfig, cloud: GaussianCloud | None = None):
        if not dataset.train:
            raise ValueError("dataset has no training views")
        self.dataset = dataset
        self.cfg = cfg
        if cloud is None:
            positions, colors = init_points
            cloud = init_from_points(positions, colors, sh_degree=cfg.sh_degree)
        self.cloud = cloud
        self.extent = scene_extent([v.pose for v in dataset.train])
        self.optimizer = Adam(cloud, cfg, self.extent)
        self.stats = DensifyStats.zeros(len(cloud))
        self.buffer: GradientBuffer | None = None
        self.view_rng = np.random.default_rng(cfg.seed)
        self.densify_rng = np.random.default_rng([cfg.seed, 1])
        self.sampler = ViewSampler(len(dataset.train), self.view_rng)
        self.iteration = 0

    def state_dict(self) -> dict:
        """Everything besides the cloud that a bit-exact resume needs."""
        state = {f"adam_{k}": v for k, v in self.optimizer.state_dict().items()}
        state.update(
            iteration=np.array(self.iteration),
            stats_grad_norm_sum=self.stats.grad_norm_sum,
            stats_hits=self.stats.hits,
            stats_max_radii=self.stats.max_radii,
            sampler_queue=np.array(self.sampler.queue, dtype=np.int64),
            view_rng=np.array(json.dumps(self.view_rng.bit_generator.state)),
            densify_rng=np.array(json.dumps(self.densify_rng.bit_generator.state)),
        )
        return state

    def load_state_dict(self, state) -> None:
        n = len(self.cloud)
        if len(state["stats_hits"]) != n:
            raise StateMismatch(f"optimizer state holds {len(state['stats_hits'])} Gaussians, cloud has {n}")
        self.optimizer.load_state_dict({k[5:]: v for k, v in state.items() if k.startswith("adam_")})
        self.iteration = int(state["iteration"])
        self.stats = DensifyStats(
            np.array(state["stats_grad_norm_sum"], dtype=np.float64),
            np.array(state["stats_hits"], dtype=np.int64),
            np.array(state["stats_max_radii"], dtype=np.float64),
        )
        self.sampler.queue = [int(i) for i in state["sampler_queue"]]
        self.view_rng.bit_generator.state = json.loads(str(state["view_rng"]))
        self.densify_rng.bit_generator.state = json.loads(str(state["densify_rng"]))
        self.buffer = None

    def step(self) -> StepRecord:
        cfg = self.cfg
        self.iteration += 1
        j = self.iteration
        cloud = self.cloud
        if j % cfg.sh_warmup_interval == 0 and cloud.active_sh_degree < cloud.sh_degree:
            cloud.active_sh_degree += 1

        vi = self.sampler.next()
        view = self.dataset.train[vi]
        cam = self.dataset.camera
        out = render(cloud, view.pose, cam, background=cfg.background)
        value, d_image = loss(out.image, view.image, cfg.lambda_ssim, cfg.mask_bottom_fraction)
        self.buffer = backward(out, d_image, cloud, view.pose, cam, buffer=self.buffer)
        proj = out.projections
        self.stats.update(self.buffer.d_screen, proj.visible, proj.radii)
        grads = self.buffer.param_grads()

        record = StepRecord(j, vi, value, len(cloud))
        if j <= cfg.densify_until:
            if j % cfg.densify_interval == 0:
                summary, source = densify_and_prune(
                    cloud, self.stats, cfg, self.extent, self.densify_rng,
                    prune_large=j > cfg.opacity_reset_interval, optimizer=self.optimizer,
                )
                grads = _remap_grads(grads, source)
                self.buffer = None
                record.edit = summary
            if j % cfg.opacity_reset_interval == 0:
                reset_opacity(cloud, cfg.opacity_reset_value)
                self.optimizer.reset("opacity_logits")
                grads = dict(grads)
                grads["opacity_logits"] = np.zeros(len(cloud))
                record.opacity_reset = True

        self.optimizer.step(cloud, grads, j)
        record.count = len(cloud)
        return record


def _remap_grads(grads: dict, source: np.ndarray) -> dict:
    new = source < 0
    idx = np.where(new, 0, source)
    out = {}
    for name, g in grads.items():
        r = g[idx] if len(g) else np.zeros((len(source),) + g.shape[1:])
        r[new] = 0.0
        out[name] = r
    return out


def train(
    dataset: Dataset,
    init_points,
    cfg: TrainConfig,
    callback: Callable[[Trainer, StepRecord], None] | None = None,
) -> GaussianCloud:
    """Run the full reconstruction loop and return the optimized cloud.

    ``init_points`` is ``(positions (N, 3), colors (N, 3) in [0, 1])``.
    """
    trainer = Trainer(dataset, init_points, cfg)
    for _ in range(cfg.iterations):
        record = trainer.step()
        if callback is not None:
            callback(trainer, record)
    return trainer.cloud
