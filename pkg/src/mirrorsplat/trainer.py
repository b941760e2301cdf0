"""Four-stage progressive training: Init, mirror plane prediction, virtual
camera optimization (VCO) and fine-tuning.
"""

from __future__ import annotations

import csv
import dataclasses
import enum
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import losses as L
from .checkpoint import Checkpoint, config_hash
from .data import Dataset
from .gradients import SceneGrads, backward_pose, backward_scene, plane_euclidean_grad
from .mirror import (InsufficientMirrorPixels, PlaneEstimate, RansacConfig, TangentPlane, estimate_plane,
                     fuse_images, min_mirror_pixels, normals_to_world, surface_depth, virtual_camera)
from .rasterizer import render, render_with_state
from .scene import SH_C0, GaussianScene, MirrorDatasetView, Plane, logit, sigmoid

log = logging.getLogger(__name__)

METRICS_HEADER = ["step", "stage", "loss_total", "loss_rgb", "loss_n", "loss_smooth", "loss_pc", "psnr_holdout"]


class NumericalError(RuntimeError):
    pass


class Stage(str, enum.Enum):
    INIT = "Init"
    MPP = "MirrorPlanePrediction"
    VCO = "VirtualCameraOptimization"
    FINETUNE = "FineTune"


def _opt(default, help: str, origin: str = ""):
    return field(default=default, metadata={"help": help, "origin": origin})


@dataclass
class TrainConfig:
    """Every tunable of the training pipeline.

    ``origin`` metadata records where a default comes from: the mirror
    method itself, the 3D-GS reference implementation, or this codebase.
    """

    total_steps: int = _opt(60000, "total optimization steps", "method: 60,000 training steps")
    init_steps: int = _opt(3000, "vanilla 3D-GS warm-up steps", "chosen: 'a few thousand steps'")
    mpp_steps: int = _opt(1000, "mirror plane prediction steps", "method: MPP stage 1000 steps")
    vco_steps: int = _opt(10000, "virtual camera optimization steps (0 skips VCO)", "method: VCO 10,000 steps")
    lambda_s: float = _opt(0.01, "depth smoothness weight", "method: lambda_s = 0.01")
    lambda_n: float = _opt(0.005, "normal consistency weight", "method: lambda_n = 0.005")
    lambda_pc: float = _opt(0.01, "planar constraint weight", "method: lambda_pc = 0.01")
    gamma: float = _opt(0.1, "smoothness edge sensitivity", "method: gamma = 0.1")
    vco_learning_rate: float = _opt(5e-4, "Adam rate for the plane", "method: learning rate 0.0005")
    rgb_dssim_weight: float = _opt(0.2, "D-SSIM share of the photometric loss", "3D-GS default")
    mask_fill_color: float = _opt(0.5, "constant color painted over mirror pixels", "chosen: mid-gray")
    planar_samples: int = _opt(64, "mirror pixels sampled for the planar loss", "chosen")
    lr_means: float = _opt(1.6e-4, "initial position rate (times scene extent)", "3D-GS default")
    lr_means_final: float = _opt(1.6e-6, "final position rate (times scene extent)", "3D-GS default")
    lr_opacity: float = _opt(0.05, "opacity rate", "3D-GS default")
    lr_scale: float = _opt(5e-3, "log-scale rate", "3D-GS default")
    lr_rotation: float = _opt(1e-3, "quaternion rate", "3D-GS default")
    lr_sh: float = _opt(2.5e-3, "SH DC rate (higher bands use rate / 20)", "3D-GS default")
    adam_beta1: float = _opt(0.9, "Adam beta1", "Adam default")
    adam_beta2: float = _opt(0.999, "Adam beta2", "Adam default")
    adam_eps: float = _opt(1e-8, "Adam epsilon", "Adam default")
    densify_interval: int = _opt(100, "steps between densification passes", "3D-GS default")
    densify_from: int = _opt(500, "first step allowed to densify", "3D-GS default")
    densify_until: int = _opt(15000, "last step allowed to densify", "3D-GS default")
    densify_grad_threshold: float = _opt(2e-4, "mean screen-space gradient that triggers growth", "3D-GS default")
    percent_dense: float = _opt(0.01, "clone/split size boundary (fraction of extent)", "3D-GS default")
    prune_opacity: float = _opt(0.005, "opacity below which Gaussians are pruned", "3D-GS default")
    opacity_reset_interval: int = _opt(0, "Gaussian updates between opacity resets (0: never)", "chosen")
    max_gaussians: int = _opt(20000, "cap on the number of Gaussians", "chosen")
    densify_in_mpp: bool = _opt(True, "densify during mirror plane prediction", "chosen")
    finetune_mpp_losses: bool = _opt(False, "keep depth/normal losses while fine-tuning", "chosen")
    joint_camera_gaussians: bool = _opt(False, "VCO also updates Gaussians (ablation)", "ablation arm")
    vanilla: bool = _opt(False, "plain 3D-GS baseline: Init loss for every step", "baseline")
    plane_view: str = _opt("largest", "plane source view: largest | random", "chosen: largest mask")
    ransac_iterations: int = _opt(1000, "RANSAC hypotheses", "method: 1000 iterations")
    ransac_threshold: float = _opt(0.1, "RANSAC offset inlier distance", "method: threshold 0.1")
    clip_margin: float = _opt(0.05, "virtual renders drop Gaussians this close to the mirror", "chosen")
    init_opacity: float = _opt(0.1, "opacity of Gaussians seeded from points", "3D-GS default")
    sh_degree: int = _opt(1, "SH degree of trained Gaussians (0 or 1)", "chosen")
    eval_interval: int = _opt(500, "steps between held-out evaluations", "chosen")
    seed: int = _opt(0, "master random seed", "chosen")
    threads: int = _opt(0, "rasterizer threads (0: environment default)", "chosen")
    tile_size: int = _opt(16, "rasterizer tile edge in pixels", "3D-GS default")

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Desk-scale preset: 8000 steps split 2000 / 1000 / 2000 / 3000."""
        base = dict(total_steps=8000, init_steps=2000, mpp_steps=1000, vco_steps=2000,
                    densify_until=5000, max_gaussians=3000, eval_interval=250, tile_size=8)
        base.update(overrides)
        return cls(**base)

    @property
    def finetune_steps(self) -> int:
        return self.total_steps - self.init_steps - self.mpp_steps - self.vco_steps

    def validate(self) -> None:
        if min(self.init_steps, self.mpp_steps, self.vco_steps) < 0 or self.finetune_steps < 0:
            raise ValueError("stage step budgets must be non-negative and sum to at most total_steps")
        weights = [self.lambda_s, self.lambda_n, self.lambda_pc, self.gamma, self.rgb_dssim_weight]
        if min(weights) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.plane_view not in ("largest", "random"):
            raise ValueError("plane_view must be 'largest' or 'random'")
        if self.sh_degree not in (0, 1):
            raise ValueError("sh_degree must be 0 or 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def with_overrides(self, overrides: dict) -> "TrainConfig":
        """Apply ``{key: value}`` overrides; string values are parsed by field type."""
        valid = {f.name: f for f in fields(self)}
        unknown = sorted(set(overrides) - set(valid))
        if unknown:
            raise KeyError(f"unknown config key(s) {unknown}; valid keys: {sorted(valid)}")
        parsed = {k: _parse_value(valid[k], v) for k, v in overrides.items()}
        return dataclasses.replace(self, **parsed)


def _parse_value(f, value):
    kind = type(f.default)
    if not isinstance(value, str):
        return kind(value)
    if kind is bool:
        low = value.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{f.name}: expected a boolean, got {value!r}")
    if kind is int:
        x = float(value)
        if not x.is_integer():
            raise ValueError(f"{f.name}: expected an integer, got {value!r}")
        return int(x)
    return kind(value)


@dataclass(frozen=True)
class StageSpec:
    stage: Stage
    start: int
    end: int
    use_mask_fill: bool
    enable_depth_normal_losses: bool
    enable_fusion: bool
    grads_to_gaussians: bool
    grads_to_plane: bool

    @property
    def steps(self) -> int:
        return self.end - self.start


@dataclass(frozen=True)
class StageSchedule:
    stages: tuple[StageSpec, ...]

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "StageSchedule":
        if cfg.vanilla:
            return cls((StageSpec(Stage.INIT, 0, cfg.total_steps, False, False, False, True, False),))
        b1 = cfg.init_steps
        b2 = b1 + cfg.mpp_steps
        b3 = b2 + cfg.vco_steps
        joint = cfg.joint_camera_gaussians
        sched = cls((
            StageSpec(Stage.INIT, 0, b1, False, False, False, True, False),
            StageSpec(Stage.MPP, b1, b2, True, True, False, True, False),
            StageSpec(Stage.VCO, b2, b3, False, False, True, joint, True),
            StageSpec(Stage.FINETUNE, b3, cfg.total_steps, False, cfg.finetune_mpp_losses, True, True, False),
        ))
        sched.validate()
        return sched

    def validate(self) -> None:
        pos = 0
        order = [Stage.INIT, Stage.MPP, Stage.VCO, Stage.FINETUNE]
        last = -1
        for s in self.stages:
            if s.start != pos or s.end < s.start:
                raise ValueError("stages must be contiguous")
            k = order.index(s.stage)
            if k <= last:
                raise ValueError("stages out of order")
            last = k
            pos = s.end
            if s.steps and not (s.grads_to_gaussians or s.grads_to_plane):
                raise ValueError(f"{s.stage.value}: no parameter group receives gradients")
        for s in self.stages:
            if s.stage == Stage.FINETUNE and s.grads_to_plane:
                raise ValueError("the plane is frozen during fine-tuning")

    def stage_at(self, step: int) -> StageSpec:
        for s in self.stages:
            if s.start <= step < s.end:
                return s
        raise IndexError(f"step {step} is outside the schedule")

    def get(self, stage: Stage) -> StageSpec | None:
        return next((s for s in self.stages if s.stage == stage), None)


class Adam:
    """Adam over a dict of named arrays; moments are kept per array."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             lrs: dict[str, float]) -> dict[str, np.ndarray]:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        out = {}
        for k, p in params.items():
            g = grads[k]
            m = self.m.get(k)
            if m is None or m.shape != p.shape:
                m = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)
            m = b1 * m + (1 - b1) * g
            v = b2 * self.v[k] + (1 - b2) * g * g
            self.m[k], self.v[k] = m, v
            out[k] = p - lrs[k] * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return out

    def remap(self, keep: np.ndarray, n_new: int) -> None:
        """Reindex moments after densification; new rows start at zero."""
        for store in (self.m, self.v):
            for k, a in store.items():
                tail = np.zeros((n_new,) + a.shape[1:])
                store[k] = np.concatenate([a[keep], tail])

    def state(self, prefix: str) -> dict[str, np.ndarray]:
        out = {}
        for k in self.m:
            out[f"{prefix}.m.{k}"] = self.m[k]
            out[f"{prefix}.v.{k}"] = self.v[k]
        return out


GROUPS = ("means", "log_scales", "quats", "opacity_logits", "sh_dc", "sh_rest")


def _scene_params(scene: GaussianScene) -> dict[str, np.ndarray]:
    p = {k: np.array(getattr(scene, k)) for k in GROUPS[:4]}
    p["sh_dc"] = np.array(scene.sh[:, :1])
    p["sh_rest"] = np.array(scene.sh[:, 1:])
    return p


def _grad_params(g: SceneGrads) -> dict[str, np.ndarray]:
    p = {k: getattr(g, k) for k in GROUPS[:4]}
    p["sh_dc"] = g.sh[:, :1]
    p["sh_rest"] = g.sh[:, 1:]
    return p


def _scene_from_params(scene: GaussianScene, p: dict[str, np.ndarray]) -> GaussianScene:
    return scene.replace(means=p["means"], log_scales=p["log_scales"], quats=p["quats"],
                         opacity_logits=p["opacity_logits"],
                         sh=np.concatenate([p["sh_dc"], p["sh_rest"]], axis=1))


def camera_extent(views: list[MirrorDatasetView]) -> float:
    centers = np.array([v.extrinsics.center for v in views])
    return 1.1 * float(np.linalg.norm(centers - centers.mean(axis=0), axis=1).max()) or 1.0


def init_scene_from_points(points: np.ndarray | None, colors: np.ndarray | None, sh_degree: int = 1,
                           opacity: float = 0.1, rng: np.random.Generator | None = None,
                           extent: float = 1.0) -> GaussianScene:
    """Isotropic Gaussians at the given points, sized by nearest-neighbour spacing."""
    if points is None or len(points) == 0:
        rng = rng or np.random.default_rng(0)
        points = rng.uniform(-extent, extent, (500, 3))
        colors = rng.uniform(0, 1, (500, 3))
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    k = min(4, n)
    if n > 1:
        d, _ = cKDTree(points).query(points, k=k)
        dist2 = np.mean(d[:, 1:] ** 2, axis=1)
    else:
        dist2 = np.full(n, 1e-2)
    scale = np.sqrt(np.maximum(dist2, 1e-8))
    sh = np.zeros((n, (sh_degree + 1) ** 2, 3))
    sh[:, 0, :] = (np.asarray(colors) - 0.5) / SH_C0
    quats = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
    return GaussianScene(points, np.log(np.tile(scale[:, None], (1, 3))), quats,
                         np.full(n, float(logit(opacity))), sh, sh_degree)


class ViewSampler:
    """Seeded random permutation of views, reshuffled every epoch."""

    def __init__(self, views: list, rng: np.random.Generator):
        self.views = views
        self.rng = rng
        self.order: list[int] = []

    def __bool__(self):
        return bool(self.views)

    def next(self):
        if not self.order:
            self.order = list(self.rng.permutation(len(self.views)))
        return self.views[self.order.pop(0)]


@dataclass
class DensityStats:
    grad_accum: np.ndarray
    count: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "DensityStats":
        return cls(np.zeros(n), np.zeros(n))

    def add(self, grads: SceneGrads, visible: np.ndarray) -> None:
        self.grad_accum += grads.screen_grad_norm
        self.count += visible


@dataclass(frozen=True)
class DensifyThresholds:
    grad_threshold: float = 2e-4
    percent_dense: float = 0.01
    extent: float = 1.0
    prune_opacity: float = 0.005
    max_gaussians: int = 20000


def densify_and_prune(scene: GaussianScene, stats: DensityStats, thresholds: DensifyThresholds,
                      rng: np.random.Generator) -> tuple[GaussianScene, np.ndarray, int]:
    """Clone small and split large high-gradient Gaussians, then prune transparent ones.

    Returns (new scene, indices of surviving original Gaussians, number of
    appended Gaussians). Appended Gaussians follow the survivors in order.
    """
    n = len(scene)
    avg = np.where(stats.count > 0, stats.grad_accum / np.maximum(stats.count, 1), 0.0)
    high = avg >= thresholds.grad_threshold
    big = scene.scales.max(axis=1) > thresholds.percent_dense * thresholds.extent
    room = thresholds.max_gaussians - n
    cand = np.nonzero(high)[0]
    if cand.size and room <= 0:
        cand = cand[:0]
    elif cand.size:
        # each split adds one net Gaussian, each clone one; keep the strongest
        order = cand[np.argsort(-avg[cand], kind="stable")]
        cand = np.sort(order[:room])
    clone = cand[~big[cand]]
    split = cand[big[cand]]

    rots = scene.rotations
    new = {k: [] for k in ("means", "log_scales", "quats", "opacity_logits", "sh")}

    def sample_offsets(idx, count):
        z = rng.standard_normal((count, idx.size, 3)) * scene.scales[idx][None]
        return np.einsum("nij,knj->kni", rots[idx], z)

    if clone.size:
        off = sample_offsets(clone, 1)[0]
        new["means"].append(scene.means[clone] + off)
        new["log_scales"].append(scene.log_scales[clone])
        new["quats"].append(scene.quats[clone])
        new["opacity_logits"].append(scene.opacity_logits[clone])
        new["sh"].append(scene.sh[clone])
    if split.size:
        off = sample_offsets(split, 2)
        for k in range(2):
            new["means"].append(scene.means[split] + off[k])
            new["log_scales"].append(scene.log_scales[split] - np.log(1.6))
            new["quats"].append(scene.quats[split])
            new["opacity_logits"].append(scene.opacity_logits[split])
            new["sh"].append(scene.sh[split])
    keep = np.ones(n, dtype=bool)
    keep[split] = False
    keep &= scene.opacities >= thresholds.prune_opacity
    keep_idx = np.nonzero(keep)[0]
    added = {k: (np.concatenate(v) if v else np.zeros((0,) + getattr(scene, k).shape[1:]))
             for k, v in new.items()}
    if added["opacity_logits"].size:
        alive = sigmoid(added["opacity_logits"]) >= thresholds.prune_opacity
        added = {k: v[alive] for k, v in added.items()}
    n_new = len(added["means"])
    if keep.all() and n_new == 0:
        return scene, keep_idx, 0
    out = scene.replace(**{k: np.concatenate([getattr(scene, k)[keep_idx], added[k]]) for k in added})
    return out, keep_idx, n_new


@dataclass
class MetricsRow:
    step: int
    stage: str
    loss_total: float
    loss_rgb: float
    loss_n: float
    loss_smooth: float
    loss_pc: float
    psnr_holdout: float | None = None

    def as_csv(self) -> list[str]:
        vals = [self.loss_total, self.loss_rgb, self.loss_n, self.loss_smooth, self.loss_pc]
        ps = "" if self.psnr_holdout is None else repr(float(self.psnr_holdout))
        return [str(self.step), self.stage] + [repr(float(v)) for v in vals] + [ps]


@dataclass
class ViewMetrics:
    view: str
    psnr: float
    ssim: float
    psnr_mirror: float
    ssim_mirror: float


class Trainer:
    """Holds the evolving scene, plane and optimizer state for one run."""

    def __init__(self, dataset: Dataset, config: TrainConfig, scene: GaussianScene | None = None):
        config.validate()
        self.cfg = config
        self.ds = dataset
        self.schedule = StageSchedule.from_config(config)
        self.threads = config.threads or None
        self.rkw = dict(threads=self.threads, tile_size=config.tile_size)
        self.extent = camera_extent(dataset.train)
        if scene is None:
            scene = init_scene_from_points(dataset.points, dataset.point_colors, config.sh_degree,
                                           config.init_opacity, self._rng("init"), dataset.scene_scale)
        self.scene = scene
        self.opt = Adam(config.adam_beta1, config.adam_beta2, config.adam_eps)
        self.plane_opt = Adam(config.adam_beta1, config.adam_beta2, config.adam_eps)
        self.plane: TangentPlane | None = None
        self.plane_estimate: PlaneEstimate | None = None
        self.step = 0
        self.gaussian_steps = 0
        self.stats = DensityStats.zeros(len(scene))
        self.metrics: list[MetricsRow] = []
        self._real_cache: dict[str, np.ndarray] = {}
        self._samplers: dict[Stage, ViewSampler] = {}
        self._stage_rngs: dict[Stage, np.random.Generator] = {}
        # (scene, plane) at the end of each completed stage
        self.snapshots: dict[str, tuple[GaussianScene, Plane | None]] = {}

    # -- helpers -------------------------------------------------------------

    def _rng(self, purpose: str) -> np.random.Generator:
        tag = sum(ord(c) * 31**i for i, c in enumerate(purpose)) % (2**32)
        return np.random.default_rng([self.cfg.seed, tag])

    def _stage_rng(self, stage: Stage) -> np.random.Generator:
        if stage not in self._stage_rngs:
            self._stage_rngs[stage] = self._rng("loss:" + stage.value)
        return self._stage_rngs[stage]

    def _sampler(self, stage: Stage) -> ViewSampler:
        if stage not in self._samplers:
            views = self.ds.train
            if stage == Stage.VCO:
                views = [v for v in views if v.has_mirror]
            self._samplers[stage] = ViewSampler(views, self._rng("views:" + stage.value))
        return self._samplers[stage]

    def _lrs(self) -> dict[str, float]:
        cfg = self.cfg
        gauss_total = max(1, self.schedule_gaussian_steps())
        s = min(1.0, self.gaussian_steps / gauss_total)
        if cfg.lr_means > 0 and cfg.lr_means_final > 0:
            lr_mean = math.exp((1 - s) * math.log(cfg.lr_means) + s * math.log(cfg.lr_means_final)) * self.extent
        else:
            lr_mean = ((1 - s) * cfg.lr_means + s * cfg.lr_means_final) * self.extent
        return {"means": lr_mean, "log_scales": cfg.lr_scale, "quats": cfg.lr_rotation,
                "opacity_logits": cfg.lr_opacity, "sh_dc": cfg.lr_sh, "sh_rest": cfg.lr_sh / 20.0}

    def schedule_gaussian_steps(self) -> int:
        return sum(s.steps for s in self.schedule.stages if s.grads_to_gaussians)

    def _check_finite(self, value: float, what: str, view: MirrorDatasetView) -> None:
        if not np.isfinite(value):
            raise NumericalError(f"non-finite {what} at step {self.step} on view {view.name!r} "
                                 f"({len(self.scene)} Gaussians)")

    def _apply_scene_grads(self, grads: SceneGrads, visible: np.ndarray | None = None) -> None:
        if not grads.all_finite():
            raise NumericalError(f"non-finite Gaussian gradient at step {self.step}")
        params = _scene_params(self.scene)
        updated = self.opt.step(params, _grad_params(grads), self._lrs())
        self.scene = _scene_from_params(self.scene, updated)
        self.gaussian_steps += 1
        if visible is not None:
            self.stats.add(grads, visible)

    def _visible(self, *states) -> np.ndarray:
        vis = np.zeros(len(self.scene))
        for st in states:
            if st is not None:
                vis[st.proj.index] = 1.0
        return vis

    def _virtual(self, view: MirrorDatasetView):
        plane = self.plane.plane
        vcam = virtual_camera(view.camera, plane)
        out, state = render_with_state(self.scene, vcam, clip_plane=plane, clip_margin=self.cfg.clip_margin,
                                       **self.rkw)
        return vcam, out, state

    def _depth_normal_terms(self, out, view, guide, rng, want_pc: bool):
        cfg = self.cfg
        pseudo, valid = L.pseudo_normal(out.depth, view.intrinsics, out.alpha)
        l_n, g_n = L.loss_normal(out.normal, pseudo, valid)
        l_s, g_s = L.loss_smooth(out.depth, guide, cfg.gamma)
        l_pc = 0.0
        g_pc = np.zeros_like(out.normal)
        if want_pc and view.has_mirror:
            rows, cols = L.sample_mask_pixels(view.mask, cfg.planar_samples, rng)
            l_pc, g = L.loss_planar(out.normal[rows, cols])
            g_pc[rows, cols] = g
        g_depth = cfg.lambda_s * g_s
        g_normal = cfg.lambda_n * g_n + cfg.lambda_pc * g_pc
        return l_n, l_s, l_pc, g_depth, g_normal

    # -- stage steps -----------------------------------------------------------

    def train_step_init(self, view: MirrorDatasetView) -> L.LossBreakdown:
        out, state = render_with_state(self.scene, view.camera, **self.rkw)
        l_rgb, g = L.loss_rgb(out.color, view.image, self.cfg.rgb_dssim_weight)
        self._check_finite(l_rgb, "loss", view)
        grads = backward_scene(self.scene, view.camera, color=g, state=state, threads=self.threads)
        self._apply_scene_grads(grads, self._visible(state))
        return L.LossBreakdown.assemble(l_rgb, grad_color=g)

    def train_step_mpp(self, view: MirrorDatasetView) -> L.LossBreakdown:
        cfg = self.cfg
        gt = L.mask_fill(view.image, view.mask, cfg.mask_fill_color) if view.has_mirror else view.image
        out, state = render_with_state(self.scene, view.camera, **self.rkw)
        l_rgb, g_color = L.loss_rgb(out.color, gt, cfg.rgb_dssim_weight)
        l_n, l_s, l_pc, g_depth, g_normal = self._depth_normal_terms(
            out, view, gt, self._stage_rng(Stage.MPP), want_pc=True)
        lb = L.LossBreakdown.assemble(l_rgb, l_n, l_s, l_pc, cfg.lambda_n, cfg.lambda_s, cfg.lambda_pc,
                                      grad_color=g_color, grad_depth=g_depth, grad_normal=g_normal)
        self._check_finite(lb.total, "loss", view)
        grads = backward_scene(self.scene, view.camera, color=g_color, depth=g_depth, normal=g_normal,
                               state=state, threads=self.threads)
        self._apply_scene_grads(grads, self._visible(state))
        return lb

    def _real_color(self, view: MirrorDatasetView) -> np.ndarray:
        if self.cfg.joint_camera_gaussians:
            return render(self.scene, view.camera, **self.rkw).color
        if view.name not in self._real_cache:
            self._real_cache[view.name] = render(self.scene, view.camera, **self.rkw).color
        return self._real_cache[view.name]

    def _plane_update(self, view, vcam, state_v, g_virtual) -> None:
        plane = self.plane.plane
        pg = backward_pose(self.scene, vcam, color=g_virtual, state=state_v, threads=self.threads)
        g_n, g_o = plane_euclidean_grad(view.extrinsics, plane, pg.rotation_matrix, pg.translation)
        g = self.plane.grad_from_euclidean(g_n, g_o)
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite plane gradient at step {self.step}")
        x = self.plane_opt.step({"plane": self.plane.vector}, {"plane": g},
                                {"plane": self.cfg.vco_learning_rate})["plane"]
        self.plane.set_vector(x)

    def train_step_vco(self, view: MirrorDatasetView) -> L.LossBreakdown:
        if self.plane is None:
            raise RuntimeError("VCO needs an estimated plane")
        if not view.has_mirror:
            return L.LossBreakdown()
        if self.cfg.joint_camera_gaussians:
            return self._fused_step(view, update_plane=True)
        vcam, out_v, state_v = self._virtual(view)
        fused = fuse_images(self._real_color(view), out_v.color, view.mask)
        value, g = L.loss_vco(fused, view.image, view.mask, self.cfg.rgb_dssim_weight)
        self._check_finite(value, "loss", view)
        self._plane_update(view, vcam, state_v, g)
        return L.LossBreakdown.assemble(value, grad_color=g)

    def _fused_step(self, view: MirrorDatasetView, update_plane: bool) -> L.LossBreakdown:
        cfg = self.cfg
        out, state = render_with_state(self.scene, view.camera, **self.rkw)
        use_virtual = self.plane is not None and view.has_mirror
        if use_virtual:
            vcam, out_v, state_v = self._virtual(view)
            pred = fuse_images(out.color, out_v.color, view.mask)
        else:
            state_v = None
            pred = out.color
        l_rgb, g = L.loss_rgb(pred, view.image, cfg.rgb_dssim_weight)
        l_n = l_s = l_pc = 0.0
        g_depth = g_normal = None
        if cfg.finetune_mpp_losses and not update_plane:
            l_n, l_s, l_pc, g_depth, g_normal = self._depth_normal_terms(
                out, view, view.image, self._stage_rng(Stage.FINETUNE), want_pc=True)
        lb = L.LossBreakdown.assemble(l_rgb, l_n, l_s, l_pc, cfg.lambda_n, cfg.lambda_s, cfg.lambda_pc,
                                      grad_color=g)
        self._check_finite(lb.total, "loss", view)
        m = view.mask[..., None] if use_virtual else np.zeros(view.mask.shape + (1,), dtype=bool)
        g_real = np.where(m, 0.0, g)
        grads = backward_scene(self.scene, view.camera, color=g_real, depth=g_depth, normal=g_normal,
                               state=state, threads=self.threads)
        if use_virtual:
            g_virt = np.where(m, g, 0.0)
            grads = grads + backward_scene(self.scene, vcam, color=g_virt, state=state_v, threads=self.threads)
            if update_plane:
                self._plane_update(view, vcam, state_v, g_virt)
        self._apply_scene_grads(grads, self._visible(state, state_v))
        return lb

    def train_step_finetune(self, view: MirrorDatasetView) -> L.LossBreakdown:
        return self._fused_step(view, update_plane=False)

    # -- plane -------------------------------------------------------------------

    def qualifying_views(self) -> list[MirrorDatasetView]:
        out = []
        for v in self.ds.train:
            need = min_mirror_pixels(v.intrinsics.width, v.intrinsics.height)
            if int(v.mask.sum()) >= need:
                out.append(v)
        return out

    def estimate_plane_from(self, view: MirrorDatasetView, seed: int | None = None) -> PlaneEstimate:
        out = render(self.scene, view.camera, **self.rkw)
        normal_world = normals_to_world(out.normal, view.extrinsics)
        cfg = RansacConfig(iterations=self.cfg.ransac_iterations, threshold=self.cfg.ransac_threshold,
                           seed=self.cfg.seed if seed is None else seed)
        return estimate_plane(surface_depth(out.depth, out.alpha), normal_world, view.mask, view.camera, cfg, source_view=view.name)

    def run_plane_initialization(self) -> PlaneEstimate:
        """Estimate the mirror plane once from a qualifying training view."""
        if self.plane_estimate is not None:
            raise RuntimeError("plane already set; it is estimated only once")
        views = self.qualifying_views()
        if not views:
            best = max((int(v.mask.sum()) for v in self.ds.train), default=0)
            raise InsufficientMirrorPixels(f"insufficient mirror pixels: no train view qualifies "
                                           f"(largest mask has {best} pixels)")
        if self.cfg.plane_view == "random":
            view = views[int(self._rng("plane-view").integers(len(views)))]
        else:
            view = max(views, key=lambda v: (int(v.mask.sum()), -views.index(v)))
        est = self.estimate_plane_from(view)
        self.plane_estimate = est
        self.plane = TangentPlane.from_plane(est.plane)
        log.info("plane from %s: n=%s o=%.4f (%d/%d inliers)", view.name, np.round(est.plane.normal, 4),
                 est.plane.offset, est.inlier_count, est.points_used)
        return est

    def set_plane(self, plane: Plane) -> None:
        self.plane = TangentPlane.from_plane(plane)
        self.plane_opt = Adam(self.cfg.adam_beta1, self.cfg.adam_beta2, self.cfg.adam_eps)

    # -- densification / evaluation ---------------------------------------------

    def maybe_densify(self, spec: StageSpec) -> None:
        cfg = self.cfg
        # counted in Gaussian updates so a skipped VCO stage shifts nothing
        step = self.gaussian_steps
        if not spec.grads_to_gaussians or spec.stage == Stage.VCO:
            return
        if spec.stage == Stage.MPP and not cfg.densify_in_mpp:
            return
        if step % cfg.densify_interval or step < cfg.densify_from or step > cfg.densify_until:
            return
        th = DensifyThresholds(cfg.densify_grad_threshold, cfg.percent_dense, self.extent,
                               cfg.prune_opacity, cfg.max_gaussians)
        scene, keep, n_new = densify_and_prune(self.scene, self.stats, th, self._rng(f"densify:{step}"))
        if scene is not self.scene:
            self.opt.remap(keep, n_new)
            self.scene = scene
            self._real_cache.clear()
        self.stats = DensityStats.zeros(len(self.scene))
        if cfg.opacity_reset_interval and step % cfg.opacity_reset_interval == 0:
            self.reset_opacity()

    def reset_opacity(self, ceiling: float = 0.01) -> None:
        """Clamp every opacity to ``ceiling`` and restart its Adam moments."""
        logits = np.minimum(self.scene.opacity_logits, logit(ceiling))
        self.scene = self.scene.replace(opacity_logits=logits)
        for store in (self.opt.m, self.opt.v):
            if "opacity_logits" in store:
                store["opacity_logits"] = np.zeros_like(store["opacity_logits"])
        self._real_cache.clear()

    def render_pipeline(self, view: MirrorDatasetView) -> np.ndarray:
        """What the pipeline shows for a view: fused when a plane exists."""
        real = render(self.scene, view.camera, **self.rkw).color
        if self.plane is None or not view.has_mirror:
            return real
        plane = self.plane.plane
        virt = render(self.scene, virtual_camera(view.camera, plane), clip_plane=plane,
                      clip_margin=self.cfg.clip_margin, **self.rkw).color
        return fuse_images(real, virt, view.mask)

    def evaluate(self, views: list[MirrorDatasetView] | None = None) -> list[ViewMetrics]:
        views = self.ds.test if views is None else views
        rows = []
        for v in views:
            pred = self.render_pipeline(v)
            m = v.mask if v.has_mirror else None
            rows.append(ViewMetrics(v.name, L.psnr(pred, v.image), L.ssim(pred, v.image),
                                    L.psnr(pred, v.image, m) if m is not None else float("nan"),
                                    L.ssim(pred, v.image, m) if m is not None else float("nan")))
        return rows

    def holdout_psnr(self) -> float:
        views = self.ds.test or self.ds.train
        return float(np.mean([r.psnr for r in self.evaluate(views)]))

    # -- driver -----------------------------------------------------------------

    def checkpoint(self, stage: Stage | str) -> Checkpoint:
        opt = self.opt.state("gauss")
        opt.update(self.plane_opt.state("plane"))
        ck = Checkpoint(self.scene, getattr(stage, "value", stage), self.step, config_hash(self.cfg.to_dict()),
                        optimizer=opt, counters={"adam_t": self.opt.t, "plane_adam_t": self.plane_opt.t,
                                                 "gaussian_steps": self.gaussian_steps})
        if self.plane is not None:
            ck.plane_ref = self.plane.n_ref.copy()
            ck.plane_coords = self.plane.vector
        return ck

    def _record(self, spec: StageSpec, lb: L.LossBreakdown, evaluate: bool) -> None:
        row = MetricsRow(self.step, spec.stage.value, lb.total, lb.rgb, lb.normal_consistency, lb.smooth,
                         lb.planar_constraint, self.holdout_psnr() if evaluate else None)
        self.metrics.append(row)

    def _snapshot(self, spec: StageSpec) -> None:
        self.snapshots[spec.stage.value] = (self.scene, None if self.plane is None else self.plane.plane)

    def run(self) -> Checkpoint:
        cfg = self.cfg
        has_mirror = any(v.has_mirror for v in self.ds.train)
        steps = {Stage.INIT: self.train_step_init, Stage.MPP: self.train_step_mpp,
                 Stage.VCO: self.train_step_vco, Stage.FINETUNE: self.train_step_finetune}
        last_spec = None
        for spec in self.schedule.stages:
            if spec.stage == Stage.VCO:
                if has_mirror and self.plane is None and not cfg.vanilla:
                    self.run_plane_initialization()
                if self.plane is None or not self._sampler(Stage.VCO):
                    log.info("no mirror views: skipping virtual camera optimization")
                    self.step = spec.end
                    self._snapshot(spec)
                    continue
                self._real_cache.clear()
            if spec.stage == Stage.FINETUNE and has_mirror and self.plane is None and not cfg.vanilla:
                self.run_plane_initialization()
            sampler = self._sampler(spec.stage)
            for step in range(spec.start, spec.end):
                self.step = step
                lb = steps[spec.stage](sampler.next())
                self.maybe_densify(spec)
                last = step == self.schedule.stages[-1].end - 1
                evaluate = (step + 1) % cfg.eval_interval == 0 or last
                self._record(spec, lb, evaluate)
            last_spec = spec
            self.step = spec.end
            self._snapshot(spec)
        if self.metrics and self.metrics[-1].psnr_holdout is None:
            self.metrics[-1].psnr_holdout = self.holdout_psnr()
        return self.checkpoint(last_spec.stage if last_spec else Stage.INIT)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    metrics: list[MetricsRow]
    trainer: Trainer

    @property
    def final_psnr(self) -> float:
        vals = [m.psnr_holdout for m in self.metrics if m.psnr_holdout is not None]
        return vals[-1] if vals else float("nan")


def write_metrics(rows: list[MetricsRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for r in rows:
            w.writerow(r.as_csv())


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def run_training(dataset: Dataset, config: TrainConfig, out_dir=None,
                 scene: GaussianScene | None = None) -> TrainResult:
    """Run every stage; write ``metrics.csv`` and ``final.ckpt`` into ``out_dir``.

    On failure the last good state is saved as ``last_good.ckpt`` before the
    error propagates.
    """
    trainer = Trainer(dataset, config, scene)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    try:
        ck = trainer.run()
    except Exception:
        if out is not None:
            stage = trainer.schedule.stage_at(min(trainer.step, max(config.total_steps - 1, 0))).stage \
                if config.total_steps else Stage.INIT
            trainer.checkpoint(stage).save(out / "last_good.ckpt")
            write_metrics(trainer.metrics, out / "metrics.csv")
        raise
    if out is not None:
        ck.save(out / "final.ckpt")
        write_metrics(trainer.metrics, out / "metrics.csv")
    return TrainResult(ck, trainer.metrics, trainer)
