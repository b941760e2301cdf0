import numpy as np
import pytest

from mirrorsplat.checkpoint import Checkpoint
from mirrorsplat.data import Dataset
from mirrorsplat.losses import loss_rgb, mask_fill, psnr
from mirrorsplat.mirror import InsufficientMirrorPixels, normals_to_world, surface_depth
from mirrorsplat.rasterizer import render
from mirrorsplat.scene import MirrorDatasetView, Plane
from mirrorsplat.trainer import (METRICS_HEADER, Adam, DensifyThresholds, DensityStats, NumericalError, Stage,
                                 StageSchedule, StageSpec, TrainConfig, Trainer, densify_and_prune, read_metrics,
                                 run_training)
from support import camera, looking_camera, random_scene

TINY = dict(total_steps=40, init_steps=10, mpp_steps=10, vco_steps=10, densify_from=5, densify_interval=5,
            densify_until=40, eval_interval=20, threads=1, max_gaussians=3000)
ZERO_LR = dict(lr_means=0.0, lr_means_final=0.0, lr_opacity=0.0, lr_scale=0.0, lr_rotation=0.0, lr_sh=0.0)


def _views(scene, n, rng, size=32, mask=None):
    out = []
    for k in range(n):
        cam = looking_camera(rng, [0, 0, 2.5], size, size, 30.0, dist=(3.0, 4.0))
        img = render(scene, cam).color
        m = np.zeros((size, size), bool) if mask is None else mask.copy()
        out.append(MirrorDatasetView(img, m, cam.intrinsics, cam.extrinsics, f"v{k}"))
    return out


def _small_dataset(rng, n_views=6, n_gauss=50):
    gt = random_scene(rng, n_gauss, sh_degree=0, lo=(-0.8, -0.8, 1.7), hi=(0.8, 0.8, 3.3),
                      opacity_logit=(1.0, 3.0))
    views = _views(gt, n_views, rng)
    return Dataset(views[:-1], views[-1:], scene_scale=1.0), gt


# configuration and schedule

def test_desk_schedule_boundaries():
    sched = StageSchedule.from_config(TrainConfig.desk())
    assert [(s.stage, s.start, s.end) for s in sched.stages] == [
        (Stage.INIT, 0, 2000), (Stage.MPP, 2000, 3000), (Stage.VCO, 3000, 5000), (Stage.FINETUNE, 5000, 8000)]
    vco, ft = sched.get(Stage.VCO), sched.get(Stage.FINETUNE)
    assert not vco.grads_to_gaussians and vco.grads_to_plane and vco.enable_fusion
    assert ft.grads_to_gaussians and not ft.grads_to_plane and ft.enable_fusion
    mpp = sched.get(Stage.MPP)
    assert mpp.use_mask_fill and mpp.enable_depth_normal_losses and not mpp.enable_fusion
    assert sched.stage_at(1999).stage == Stage.INIT and sched.stage_at(2000).stage == Stage.MPP
    with pytest.raises(IndexError):
        sched.stage_at(8000)


def test_full_scale_defaults():
    cfg = TrainConfig()
    assert (cfg.total_steps, cfg.mpp_steps, cfg.vco_steps, cfg.vco_learning_rate) == (60000, 1000, 10000, 5e-4)
    assert (cfg.lambda_s, cfg.lambda_n, cfg.lambda_pc, cfg.gamma) == (0.01, 0.005, 0.01, 0.1)
    assert cfg.finetune_steps == 60000 - 3000 - 1000 - 10000


def test_schedule_invariants_enforced():
    a = StageSpec(Stage.INIT, 0, 10, False, False, False, True, False)
    with pytest.raises(ValueError, match="contiguous"):
        StageSchedule((a, StageSpec(Stage.MPP, 11, 20, True, True, False, True, False))).validate()
    with pytest.raises(ValueError, match="order"):
        StageSchedule((a, StageSpec(Stage.INIT, 10, 20, False, False, False, True, False))).validate()
    with pytest.raises(ValueError, match="no parameter group"):
        StageSchedule((StageSpec(Stage.INIT, 0, 10, False, False, False, False, False),)).validate()
    with pytest.raises(ValueError, match="frozen"):
        StageSchedule((StageSpec(Stage.FINETUNE, 0, 10, False, False, True, True, True),)).validate()


def test_config_overrides():
    cfg = TrainConfig.desk().with_overrides({"vco_steps": "0", "joint_camera_gaussians": "true", "gamma": "0.2"})
    assert cfg.vco_steps == 0 and cfg.joint_camera_gaussians is True and cfg.gamma == 0.2
    with pytest.raises(KeyError, match="valid keys"):
        cfg.with_overrides({"nope": 1})
    with pytest.raises(ValueError):
        cfg.with_overrides({"vanilla": "maybe"})
    with pytest.raises(ValueError):
        TrainConfig(init_steps=70000).validate()


def test_adam_against_hand_computation():
    opt = Adam()
    p = {"x": np.array([1.0, -2.0])}
    g1, g2 = np.array([0.5, -1.0]), np.array([0.1, 0.3])
    p1 = opt.step(p, {"x": g1}, {"x": 0.1})
    # first step moves each coordinate by lr against the gradient sign
    assert np.allclose(p1["x"], [0.9, -1.9], atol=1e-7)
    p2 = opt.step(p1, {"x": g2}, {"x": 0.1})
    m = 0.9 * 0.1 * g1 + 0.1 * g2
    v = 0.999 * 0.001 * g1**2 + 0.001 * g2**2
    expect = p1["x"] - 0.1 * (m / (1 - 0.81)) / (np.sqrt(v / (1 - 0.999**2)) + 1e-8)
    assert np.allclose(p2["x"], expect, atol=1e-15)


# densification

def test_densify_below_threshold_unchanged(rng):
    s = random_scene(rng, 20)
    stats = DensityStats(np.full(20, 1e-5), np.ones(20))
    out, keep, n_new = densify_and_prune(s, stats, DensifyThresholds(), np.random.default_rng(0))
    assert out is s and n_new == 0 and np.array_equal(keep, np.arange(20))


def test_densify_prunes_transparent(rng):
    s = random_scene(rng, 5, opacity_logit=(2.0, 3.0))
    s = s.replace(opacity_logits=np.where(np.arange(5) == 2, np.log(0.001 / 0.999), s.opacity_logits))
    out, keep, n_new = densify_and_prune(s, DensityStats.zeros(5), DensifyThresholds(), np.random.default_rng(0))
    assert len(out) == 4 and keep.tolist() == [0, 1, 3, 4] and n_new == 0


def test_clone_inherits_parent(rng):
    s = random_scene(rng, 3, scale=(0.001, 0.002), opacity_logit=(2.0, 3.0))
    stats = DensityStats(np.array([0.0, 1.0, 0.0]), np.ones(3))
    out, keep, n_new = densify_and_prune(s, stats, DensifyThresholds(extent=10.0), np.random.default_rng(7))
    assert n_new == 1 and len(out) == 4
    child = out.subset(np.array([False, False, False, True]))
    for k in ("log_scales", "quats", "opacity_logits", "sh"):
        assert np.array_equal(getattr(child, k)[0], getattr(s, k)[1])
    z = np.random.default_rng(7).standard_normal((1, 1, 3)) * s.scales[[1]][None]
    assert np.allclose(child.means[0], s.means[1] + s.rotations[1] @ z[0, 0], atol=1e-15)
    again = densify_and_prune(s, stats, DensifyThresholds(extent=10.0), np.random.default_rng(7))[0]
    assert np.array_equal(again.means, out.means)


def test_split_large(rng):
    s = random_scene(rng, 2, scale=(0.5, 0.6), opacity_logit=(2.0, 3.0))
    stats = DensityStats(np.array([1.0, 0.0]), np.ones(2))
    out, keep, n_new = densify_and_prune(s, stats, DensifyThresholds(), np.random.default_rng(0))
    assert keep.tolist() == [1] and n_new == 2 and len(out) == 3
    assert np.allclose(out.log_scales[1:], s.log_scales[0] - np.log(1.6))


def test_densify_respects_cap(rng):
    s = random_scene(rng, 10, scale=(0.001, 0.002), opacity_logit=(2.0, 3.0))
    stats = DensityStats(np.arange(10.0), np.ones(10))
    out, _, n_new = densify_and_prune(s, stats, DensifyThresholds(extent=10.0, max_gaussians=13),
                                      np.random.default_rng(0))
    assert len(out) == 13 and n_new == 3


# stage steps

def test_init_loss_decreases():
    ds, _ = _small_dataset(np.random.default_rng(0))
    rng = np.random.default_rng(1)
    start = random_scene(rng, 50, sh_degree=0, lo=(-0.8, -0.8, 1.7), hi=(0.8, 0.8, 3.3), opacity_logit=(-1, 0))
    tr = Trainer(ds, TrainConfig(threads=1, sh_degree=0, lr_means=1.6e-3, lr_means_final=1.6e-4), start)
    sampler = tr._sampler(Stage.INIT)
    losses = [tr.train_step_init(sampler.next()).total for _ in range(200)]
    assert np.mean(losses[-10:]) < 0.5 * np.mean(losses[:10])


def test_zero_learning_rates_leave_scene_unchanged(toy):
    tr = Trainer(toy, TrainConfig.desk(threads=1, **ZERO_LR))
    before = tr.scene
    for v in toy.train[:3]:
        tr.train_step_init(v)
        tr.train_step_mpp(v)
    for k in ("means", "log_scales", "quats", "opacity_logits", "sh"):
        assert np.array_equal(getattr(tr.scene, k), getattr(before, k))


def test_single_view_overfit():
    rng = np.random.default_rng(3)
    gt = random_scene(rng, 150, sh_degree=0, lo=(-1, -1, 2), hi=(1, 1, 3), opacity_logit=(0.5, 3.0))
    cam = camera(64, 64, 60.0)
    view = MirrorDatasetView(render(gt, cam).color, np.zeros((64, 64), bool), cam.intrinsics, cam.extrinsics, "v")
    ds = Dataset([view], [], 1.0)
    start = random_scene(np.random.default_rng(4), 150, sh_degree=0, lo=(-1, -1, 2), hi=(1, 1, 3),
                         opacity_logit=(-1, 0))
    tr = Trainer(ds, TrainConfig(threads=1, sh_degree=0, tile_size=8), start)
    for _ in range(2000):
        tr.train_step_init(view)
    assert psnr(render(tr.scene, cam).color, view.image) > 30


def test_mpp_with_zero_weights_is_masked_init(toy):
    view = next(v for v in toy.train if v.has_mirror)
    cfg = TrainConfig.desk(threads=1, lambda_n=0.0, lambda_s=0.0, lambda_pc=0.0)
    a = Trainer(toy, cfg)
    b = Trainer(toy, cfg, a.scene)
    a.train_step_mpp(view)
    filled = MirrorDatasetView(mask_fill(view.image, view.mask), view.mask, view.intrinsics, view.extrinsics,
                               view.name)
    b.train_step_init(filled)
    for k in ("means", "log_scales", "quats", "opacity_logits", "sh"):
        assert np.abs(getattr(a.scene, k) - getattr(b.scene, k)).max() < 1e-12


def test_nonfinite_loss_aborts(toy):
    v = toy.train[0]
    bad = MirrorDatasetView(np.full_like(v.image, np.nan), v.mask, v.intrinsics, v.extrinsics, "broken")
    tr = Trainer(toy, TrainConfig.desk(threads=1))
    with pytest.raises(NumericalError, match="broken"):
        tr.train_step_init(bad)


# plane handling

def _gt_trainer(toy_dir, toy, **cfg):
    ck = Checkpoint.load(toy_dir / "scene_gt.ckpt")
    return Trainer(toy, TrainConfig.desk(threads=1, **cfg), ck.scene), ck.plane


def test_plane_initialization_on_ground_truth(toy_dir, toy):
    tr, truth = _gt_trainer(toy_dir, toy)
    est = tr.run_plane_initialization()
    assert est.plane.angle_to(truth) < 3 and abs(est.plane.offset - truth.offset) < 0.05
    assert est.source_view == max(tr.qualifying_views(), key=lambda v: v.mask.sum()).name
    with pytest.raises(RuntimeError, match="once"):
        tr.run_plane_initialization()


def test_plane_initialization_without_mirror_views(toy):
    tr = Trainer(toy.without_masks(), TrainConfig.desk(threads=1))
    with pytest.raises(InsufficientMirrorPixels, match="insufficient mirror pixels"):
        tr.run_plane_initialization()


def test_vco_stationary_at_true_plane(toy_dir, toy):
    tr, truth = _gt_trainer(toy_dir, toy)
    tr.set_plane(truth)
    before = tr.scene
    sampler = tr._sampler(Stage.VCO)
    for _ in range(200):
        tr.train_step_vco(sampler.next())
    # unitless threshold, read as radians (Adam's normalized steps jitter around the optimum)
    drift = np.radians(tr.plane.plane.angle_to(truth))
    print(f"plane drift over 200 VCO steps from the true plane: {drift:.2e} rad")
    assert drift < 1e-3
    assert tr.scene is before


def test_finetune_keeps_plane_fixed(toy_dir, toy):
    tr, truth = _gt_trainer(toy_dir, toy)
    tr.set_plane(Plane.from_normal(truth.normal + [0, 0.05, 0], truth.offset + 0.02))
    vec = tr.plane.vector.copy()
    for v in toy.train[:5]:
        tr.train_step_finetune(v)
    assert np.array_equal(tr.plane.vector, vec)


def test_vco_skips_views_without_mirror(toy_dir, toy):
    tr, truth = _gt_trainer(toy_dir, toy)
    tr.set_plane(truth)
    vec = tr.plane.vector.copy()
    lb = tr.train_step_vco(next(v for v in toy.train if not v.has_mirror))
    assert lb.total == 0.0 and np.array_equal(tr.plane.vector, vec) and tr.plane_opt.t == 0
    assert all(v.has_mirror for v in tr._sampler(Stage.VCO).views)


def test_vco_loss_higher_off_plane(toy_dir, toy):
    tr, truth = _gt_trainer(toy_dir, toy)
    view = max(toy.train, key=lambda v: v.mask.sum())

    def loss_at(p):
        tr.set_plane(p)
        return loss_rgb(tr.render_pipeline(view), view.image)[0]

    assert loss_at(Plane(truth.normal, truth.offset + 0.1)) > loss_at(truth)


# whole-pipeline behaviour on a tiny schedule

@pytest.fixture(scope="module")
def tiny_run(toy, tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny")
    return run_training(toy, TrainConfig.desk(**TINY), out), out


def test_metrics_log(tiny_run):
    res, out = tiny_run
    rows = read_metrics(out / "metrics.csv")
    assert (out / "metrics.csv").read_text().splitlines()[0] == ",".join(METRICS_HEADER)
    assert [int(r["step"]) for r in rows] == list(range(40))
    stages = [r["stage"] for r in rows]
    assert stages == ["Init"] * 10 + ["MirrorPlanePrediction"] * 10 + ["VirtualCameraOptimization"] * 10 \
        + ["FineTune"] * 10
    evaluated = [int(r["step"]) for r in rows if r["psnr_holdout"]]
    assert evaluated == [19, 39]
    assert (out / "final.ckpt").exists()


def test_gating_is_exact(tiny_run):
    tr = tiny_run[0].trainer
    mpp_scene, mpp_plane = tr.snapshots["MirrorPlanePrediction"]
    vco_scene, vco_plane = tr.snapshots["VirtualCameraOptimization"]
    ft_scene, ft_plane = tr.snapshots["FineTune"]
    assert mpp_plane is None and vco_scene is mpp_scene
    assert ft_plane.offset == vco_plane.offset == tr.plane.plane.offset
    assert np.array_equal(ft_plane.normal, vco_plane.normal)


def test_plane_estimated_once(toy, monkeypatch):
    calls = []
    orig = Trainer.run_plane_initialization

    def counting(self):
        calls.append(self.step)
        return orig(self)

    monkeypatch.setattr(Trainer, "run_plane_initialization", counting)
    run_training(toy, TrainConfig.desk(**TINY))
    assert calls == [20]


def test_tiny_run_deterministic(toy, tiny_run, tmp_path):
    run_training(toy, TrainConfig.desk(**TINY), tmp_path)
    assert (tmp_path / "metrics.csv").read_bytes() == (tiny_run[1] / "metrics.csv").read_bytes()
    assert (tmp_path / "final.ckpt").read_bytes() == (tiny_run[1] / "final.ckpt").read_bytes()


def test_failure_saves_last_good(toy, tmp_path, monkeypatch):
    def boom(self, view):
        if self.step == 14:
            raise NumericalError("injected")
        return orig(self, view)

    orig = Trainer.train_step_mpp
    monkeypatch.setattr(Trainer, "train_step_mpp", boom)
    with pytest.raises(NumericalError):
        run_training(toy, TrainConfig.desk(**TINY), tmp_path)
    ck = Checkpoint.load(tmp_path / "last_good.ckpt")
    assert ck.stage == "MirrorPlanePrediction" and ck.step == 14
    assert len(read_metrics(tmp_path / "metrics.csv")) == 14


def test_empty_masks_skip_vco(toy):
    res = run_training(toy.without_masks(), TrainConfig.desk(**TINY))
    stages = {m.stage for m in res.metrics}
    assert "VirtualCameraOptimization" not in stages and res.trainer.plane is None
    assert len(res.metrics) == 30


def test_vanilla_single_stage(toy):
    res = run_training(toy, TrainConfig.desk(**TINY, vanilla=True))
    assert {m.stage for m in res.metrics} == {"Init"} and res.trainer.plane is None


# desk-scale runs (shared with the acceptance suite)

def test_desk_plane_estimate(desk_run, toy):
    tr = desk_run("full")[0].trainer
    truth = Plane(np.array(toy.ground_truth["normal"]), toy.ground_truth["offset"])
    est = tr.plane_estimate.plane
    print(f"post-MPP plane: {est.angle_to(truth):.3f} deg, offset error {abs(est.offset - truth.offset):.4f}")
    assert est.angle_to(truth) < 3 and abs(est.offset - truth.offset) < 0.05


def test_desk_mpp_mirror_normals(desk_run, toy):
    tr = desk_run("full")[0].trainer
    scene, _ = tr.snapshots["MirrorPlanePrediction"]
    truth = np.array(toy.ground_truth["normal"])
    errs = []
    for v in toy.train:
        if not v.has_mirror:
            continue
        out = render(scene, v.camera)
        n = normals_to_world(out.normal, v.extrinsics)[v.mask]
        n /= np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-12)
        errs.append(np.degrees(np.arccos(np.clip(np.abs(n @ truth), 0, 1))))
    mean_err = float(np.mean(np.concatenate(errs)))
    print(f"mean mirror-normal error after MPP: {mean_err:.2f} deg")
    assert mean_err <= 5


def test_desk_planar_loss_decreases(desk_run):
    rows = [m for m in desk_run("full")[0].metrics if m.stage == "MirrorPlanePrediction"]
    first, last = np.mean([m.loss_pc for m in rows[:100]]), np.mean([m.loss_pc for m in rows[-100:]])
    assert first > last


def test_desk_finetune_improves_mirror(desk_run, toy):
    tr = desk_run("full")[0].trainer
    final = np.nanmean([m.psnr_mirror for m in tr.evaluate()])
    scene, plane = tr.snapshots["VirtualCameraOptimization"]
    probe = Trainer(toy, tr.cfg, scene)
    probe.set_plane(plane)
    after_vco = np.nanmean([m.psnr_mirror for m in probe.evaluate()])
    print(f"held-out mirror PSNR: end of VCO {after_vco:.2f} dB, final {final:.2f} dB")
    assert final > after_vco


def test_desk_final_beats_masked_mpp(desk_run, toy):
    tr = desk_run("full")[0].trainer
    scene, _ = tr.snapshots["MirrorPlanePrediction"]
    mpp = np.mean([psnr(render(scene, v.camera).color, mask_fill(v.image, v.mask)) for v in toy.test])
    final = np.mean([m.psnr for m in tr.evaluate()])
    assert final >= mpp


def test_desk_run_metrics(desk_run):
    res, out = desk_run("full")
    steps = [m.step for m in res.metrics]
    assert steps == sorted(steps) and len(res.metrics) == 8000
    assert res.final_psnr > 25
