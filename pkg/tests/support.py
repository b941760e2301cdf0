"""Shared builders for the test-suite: random scenes, cameras, FD harness wiring."""

import numpy as np

from mirrorsplat.gradients import backward_pose, backward_scene, finite_diff_check
from mirrorsplat.mirror import TangentPlane, reflect_extrinsics, virtual_camera
from mirrorsplat.rasterizer import render, render_with_state
from mirrorsplat.scene import Camera, CameraExtrinsics, CameraIntrinsics, GaussianScene, Plane

PARAM_NAMES = ("means", "log_scales", "quats", "opacity_logits", "sh")


def random_scene(rng, n=30, sh_degree=1, lo=(-2, -2, 1.0), hi=(2, 2, 4.0), scale=(0.05, 0.3),
                 opacity_logit=(-2.0, 1.5)) -> GaussianScene:
    k = (sh_degree + 1) ** 2
    return GaussianScene(rng.uniform(lo, hi, (n, 3)), np.log(rng.uniform(*scale, (n, 3))),
                         rng.normal(size=(n, 4)), rng.uniform(*opacity_logit, n),
                         rng.normal(0, 0.5, (n, k, 3)), sh_degree)


def camera(width=32, height=32, focal=30.0, cx=None, cy=None, extr=None) -> Camera:
    cx = (width - 1) / 2 + 0.3 if cx is None else cx
    cy = (height - 1) / 2 - 0.4 if cy is None else cy
    return Camera(CameraIntrinsics(focal, focal, cx, cy, width, height), extr or CameraExtrinsics.identity())


def random_unit(rng, size=None):
    v = rng.normal(size=(3,) if size is None else (size, 3))
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def looking_camera(rng, scene_center, width=48, height=48, focal=40.0, dist=(3.0, 5.0)) -> Camera:
    eye = np.asarray(scene_center) + random_unit(rng) * rng.uniform(*dist)
    return camera(width, height, focal, extr=CameraExtrinsics.look_at(eye, scene_center, up=random_unit(rng)))


def flat_params(scene: GaussianScene) -> np.ndarray:
    return np.concatenate([getattr(scene, k).ravel() for k in PARAM_NAMES])


def unflat_params(scene: GaussianScene, x: np.ndarray) -> GaussianScene:
    out, o = {}, 0
    for k in PARAM_NAMES:
        a = getattr(scene, k)
        out[k] = x[o:o + a.size].reshape(a.shape)
        o += a.size
    return scene.replace(**out)


def scene_fd_report(scene, cam, rng, h=1e-5, coords=None, channels=("color", "depth", "normal")):
    """FD check of backward_scene for a random linear functional of the render buffers."""
    H, W = cam.height, cam.width
    weights = {"color": rng.normal(size=(H, W, 3)), "depth": rng.normal(size=(H, W)),
               "normal": rng.normal(size=(H, W, 3)), "alpha": rng.normal(size=(H, W))}
    weights = {k: v for k, v in weights.items() if k in channels}

    def loss(sc):
        o = render(sc, cam)
        return sum(np.sum(getattr(o, k) * w) for k, w in weights.items())

    grads = backward_scene(scene, cam, **weights)
    x0 = flat_params(scene)
    return finite_diff_check(lambda x: loss(unflat_params(scene, x)), x0, grads.flat(), h=h, coords=coords,
                             gate_fn=lambda x: render_with_state(unflat_params(scene, x), cam)[1].gate_signature())


def pose_fd_report(scene, cam, rng, h=1e-5):
    Wc = rng.normal(size=(cam.height, cam.width, 3))

    def at(x):
        return cam.with_extrinsics(cam.extrinsics.perturbed(x))

    pg = backward_pose(scene, cam, color=Wc)
    return finite_diff_check(lambda x: np.sum(render(scene, at(x)).color * Wc), np.zeros(6), pg.pose, h=h,
                             gate_fn=lambda x: render_with_state(scene, at(x))[1].gate_signature())


def tangent_plane(plane: Plane, x) -> Plane:
    """Plane at tangent coordinates x = (a1, a2, offset) around ``plane``."""
    return TangentPlane(plane.normal, x[:2], x[2]).plane


def plane_fd_report(scene, real_cam, plane, rng, h=1e-5):
    """FD check of the plane-chained pose gradient through reflect + render."""
    Wc = rng.normal(size=(real_cam.height, real_cam.width, 3))

    def vcam(x):
        p = tangent_plane(plane, x)
        return real_cam.with_extrinsics(reflect_extrinsics(real_cam.extrinsics, p))

    pg = backward_pose(scene, virtual_camera(real_cam, plane), color=Wc, plane=plane,
                       real_extrinsics=real_cam.extrinsics)
    x0 = np.array([0.0, 0.0, plane.offset])
    return finite_diff_check(lambda x: np.sum(render(scene, vcam(x)).color * Wc), x0, pg.plane, h=h,
                             gate_fn=lambda x: render_with_state(scene, vcam(x))[1].gate_signature())
