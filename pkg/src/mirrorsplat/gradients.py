"""Reverse-mode gradients of the splatting pipeline and a finite-difference harness."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .rasterizer import (N_FEATURES, RenderState, _run_chunks, _tile_chunks, get_num_threads,
                         render_with_state)
from .scene import SH_C0, SH_C1, Camera, CameraExtrinsics, GaussianScene, Plane, skew


@dataclass
class SceneGrads:
    """Per-Gaussian gradients in the stored parameterization."""

    means: np.ndarray
    log_scales: np.ndarray
    quats: np.ndarray
    opacity_logits: np.ndarray
    sh: np.ndarray
    # norm of the screen-space mean gradient, in NDC units (densification statistic)
    screen_grad_norm: np.ndarray

    @classmethod
    def zeros_like(cls, scene: GaussianScene) -> "SceneGrads":
        n = len(scene)
        return cls(np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 4)), np.zeros(n),
                   np.zeros_like(scene.sh), np.zeros(n))

    def params(self) -> dict[str, np.ndarray]:
        return {"means": self.means, "log_scales": self.log_scales, "quats": self.quats,
                "opacity_logits": self.opacity_logits, "sh": self.sh}

    def __add__(self, other: "SceneGrads") -> "SceneGrads":
        return SceneGrads(*(a + b for a, b in zip(self._all(), other._all())))

    def __mul__(self, k: float) -> "SceneGrads":
        return SceneGrads(*(a * k for a in self._all()))

    __rmul__ = __mul__

    def _all(self):
        return (self.means, self.log_scales, self.quats, self.opacity_logits, self.sh,
                self.screen_grad_norm)

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.params().values()])

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self._all())


@dataclass
class PoseGrads:
    """Gradient w.r.t. the left tangent update (rotation 3, translation 3).

    When a plane is attached, ``plane`` holds the gradient w.r.t. the 2-vector
    tangent of the normal followed by the offset.
    """

    pose: np.ndarray
    plane: np.ndarray | None = None
    rotation_matrix: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))


def _pack_upstream(h, w, color, depth, normal, alpha) -> np.ndarray:
    up = np.zeros((h, w, N_FEATURES))
    for sl, g in ((slice(0, 3), color), (slice(3, 4), depth), (slice(4, 7), normal), (slice(7, 8), alpha)):
        if g is None:
            continue
        g = np.asarray(g, dtype=np.float64).reshape(h, w, -1)
        bad = ~np.isfinite(g)
        if bad.any():
            y, x = np.argwhere(bad.any(axis=-1))[0]
            raise ValueError(f"non-finite upstream gradient at pixel (x={x}, y={y})")
        up[..., sl] = g
    return up


def _splat_grads(state: RenderState, upstream: np.ndarray, threads: int | None) -> np.ndarray:
    """Per-projected-splat gradients: mean2d(2) conic(3) opacity(1) features(8)."""
    grid, proj = state.grid, state.proj
    cam = state.camera
    entry_grads = np.zeros((grid.entries.size, _kernels.G_FEAT + N_FEATURES))
    means2d = np.ascontiguousarray(proj.means2d)
    conic = np.ascontiguousarray(proj.conic)
    opacity = np.ascontiguousarray(proj.opacity)

    def run(ids):
        _kernels.backward_tiles(ids, grid.ranges, grid.entries, means2d, conic, opacity, state.feats,
                                cam.width, cam.height, grid.tiles_x, grid.tile_size, state.n_last,
                                upstream, entry_grads)

    _run_chunks(run, _tile_chunks(grid.n_tiles, threads or get_num_threads()))
    return _kernels.reduce_entries(grid.entries, entry_grads, len(proj))


def _quat_backward(q_raw: np.ndarray, G: np.ndarray) -> np.ndarray:
    """d L / d q for R = R(q / |q|), given d L / d R."""
    norm = np.linalg.norm(q_raw, axis=1, keepdims=True)
    q = q_raw / norm
    w, x, y, z = q.T
    g = G
    gw = 2 * (-z * g[:, 0, 1] + y * g[:, 0, 2] + z * g[:, 1, 0] - x * g[:, 1, 2] - y * g[:, 2, 0] + x * g[:, 2, 1])
    gx = 2 * (y * g[:, 0, 1] + z * g[:, 0, 2] + y * g[:, 1, 0] - 2 * x * g[:, 1, 1] - w * g[:, 1, 2]
              + z * g[:, 2, 0] + w * g[:, 2, 1] - 2 * x * g[:, 2, 2])
    gy = 2 * (-2 * y * g[:, 0, 0] + x * g[:, 0, 1] + w * g[:, 0, 2] + x * g[:, 1, 0] + z * g[:, 1, 2]
              - w * g[:, 2, 0] + z * g[:, 2, 1] - 2 * y * g[:, 2, 2])
    gz = 2 * (-2 * z * g[:, 0, 0] - w * g[:, 0, 1] + x * g[:, 0, 2] + w * g[:, 1, 0] - 2 * z * g[:, 1, 1]
              + y * g[:, 1, 2] + x * g[:, 2, 0] + y * g[:, 2, 1])
    gq = np.stack([gw, gx, gy, gz], axis=1)
    return (gq - q * np.sum(q * gq, axis=1, keepdims=True)) / norm


def _chain(scene: GaussianScene, state: RenderState, sg: np.ndarray, want_scene: bool):
    """Push per-splat gradients back to Gaussian parameters and the camera.

    Returns (SceneGrads or None, dL/dW, dL/dt) where W, t are the
    world-to-camera rotation block and translation.
    """
    proj = state.proj
    intr = state.camera.intrinsics
    fx, fy = intr.fx, intr.fy
    W, t = proj.W, proj.t
    m = len(proj)

    g_mean2d = sg[:, 0:2]
    g_conic = sg[:, 2:5]
    g_opac = sg[:, 5]
    g_color = sg[:, 6:9]
    g_depth = sg[:, 9]
    g_normal = sg[:, 10:13]

    # conic -> screen covariance
    a, b, c = proj.conic.T
    Q = np.empty((m, 2, 2))
    Q[:, 0, 0], Q[:, 0, 1], Q[:, 1, 0], Q[:, 1, 1] = a, b, b, c
    GQ = np.empty((m, 2, 2))
    GQ[:, 0, 0] = g_conic[:, 0]
    GQ[:, 0, 1] = GQ[:, 1, 0] = 0.5 * g_conic[:, 1]
    GQ[:, 1, 1] = g_conic[:, 2]
    G2 = -Q @ GQ @ Q

    # screen covariance = M cov3d M^T with M = J W
    J = proj.J
    M = J @ W
    G_cov3d = np.transpose(M, (0, 2, 1)) @ G2 @ M
    G_M = 2.0 * G2 @ M @ proj.cov3d
    G_J = G_M @ W.T
    G_W = np.einsum("nji,njk->ik", J, G_M)

    x, y, z = proj.p_cam.T
    rx, ry = proj.jac_ratio.T
    inx, iny = proj.jac_inside.T
    g_p = np.zeros((m, 3))
    g_p[:, 0] = fx / z * g_mean2d[:, 0] - inx * fx / z**2 * G_J[:, 0, 2]
    g_p[:, 1] = fy / z * g_mean2d[:, 1] - iny * fy / z**2 * G_J[:, 1, 2]
    g_p[:, 2] = (-fx * x / z**2 * g_mean2d[:, 0] - fy * y / z**2 * g_mean2d[:, 1] + g_depth
                 - fx / z**2 * G_J[:, 0, 0] + (fx * rx / z**2 + inx * fx * x / z**3) * G_J[:, 0, 2]
                 - fy / z**2 * G_J[:, 1, 1] + (fy * ry / z**2 + iny * fy * y / z**3) * G_J[:, 1, 2])

    # normal feature: n_cam = flip * W r_k
    rows = np.arange(m)
    r_k = proj.rot[rows, :, proj.axis]
    gn = g_normal * proj.flip[:, None]
    G_W += gn.T @ r_k
    G_W += g_p.T @ scene.means[proj.index]
    g_t = g_p.sum(axis=0)

    # SH color
    idx = proj.index
    sh = scene.sh[idx]
    inside = (proj.color_raw > 0.0) & (proj.color_raw < 1.0)
    gc = g_color * inside
    g_sh = np.zeros_like(sh)
    g_sh[:, 0, :] = SH_C0 * gc
    g_dir = np.zeros((m, 3))
    if sh.shape[1] > 1:
        u = proj.view_dir
        g_sh[:, 1, :] = -SH_C1 * u[:, 1:2] * gc
        g_sh[:, 2, :] = SH_C1 * u[:, 2:3] * gc
        g_sh[:, 3, :] = -SH_C1 * u[:, 0:1] * gc
        g_u = SH_C1 * np.stack([-(gc * sh[:, 3, :]).sum(1), -(gc * sh[:, 1, :]).sum(1),
                                (gc * sh[:, 2, :]).sum(1)], axis=1)
        g_dir = (g_u - u * np.sum(u * g_u, axis=1, keepdims=True)) / proj.view_dist[:, None]
    # camera center C = -W^T t
    g_center = -g_dir.sum(axis=0)
    G_W += -np.outer(t, g_center)
    g_t += -W @ g_center

    if not want_scene:
        return None, G_W, g_t

    grads = SceneGrads.zeros_like(scene)
    g_mean = g_p @ W + g_dir
    s = proj.scales
    s2 = s**2
    rot = proj.rot
    G_rot = 2.0 * G_cov3d @ rot * s2[:, None, :]
    G_rot[rows, :, proj.axis] += gn @ W
    RtGR = np.transpose(rot, (0, 2, 1)) @ G_cov3d @ rot
    g_scale = 2.0 * s * np.diagonal(RtGR, axis1=1, axis2=2)
    op = proj.opacity

    np.add.at(grads.means, idx, g_mean)
    np.add.at(grads.log_scales, idx, g_scale * s)
    np.add.at(grads.quats, idx, _quat_backward(scene.quats[idx], G_rot))
    np.add.at(grads.opacity_logits, idx, g_opac * op * (1.0 - op))
    np.add.at(grads.sh, idx, g_sh)
    ndc = g_mean2d * np.array([0.5 * intr.width, 0.5 * intr.height])
    np.add.at(grads.screen_grad_norm, idx, np.linalg.norm(ndc, axis=1))
    return grads, G_W, g_t


def backward_scene(scene: GaussianScene, camera: Camera, *, color=None, depth=None, normal=None,
                   alpha=None, state: RenderState | None = None, threads: int | None = None) -> SceneGrads:
    """Gradients of a scalar loss w.r.t. every Gaussian parameter.

    ``color``/``depth``/``normal``/``alpha`` are the per-pixel upstream
    gradients of the loss w.r.t. the rendered buffers (None means zero).
    ``state`` is the forward state of the same render; it is recomputed when
    omitted.
    """
    if state is None:
        _, state = render_with_state(scene, camera, threads=threads)
    up = _pack_upstream(camera.height, camera.width, color, depth, normal, alpha)
    sg = _splat_grads(state, up, threads)
    grads, _, _ = _chain(scene, state, sg, want_scene=True)
    return grads


def scene_and_camera_grads(scene: GaussianScene, state: RenderState, *, color=None, depth=None,
                           normal=None, alpha=None, threads: int | None = None):
    """Both Gaussian gradients and raw (dL/dW, dL/dt) camera gradients in one pass."""
    cam = state.camera
    up = _pack_upstream(cam.height, cam.width, color, depth, normal, alpha)
    sg = _splat_grads(state, up, threads)
    return _chain(scene, state, sg, want_scene=True)


def pose_tangent_grad(extr: CameraExtrinsics, G_W: np.ndarray, g_t: np.ndarray) -> np.ndarray:
    """Map Euclidean (dL/dR, dL/dt) onto the left tangent update of the pose."""
    R, t = extr.rotation, extr.translation
    g_rot = np.array([np.sum(G_W * (skew(e) @ R)) + g_t @ (skew(e) @ t) for e in np.eye(3)])
    return np.concatenate([g_rot, g_t])


def plane_tangent_basis(n: np.ndarray) -> np.ndarray:
    """Orthonormal 3x2 basis of the tangent plane at unit vector n."""
    helper = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    b1 = np.cross(n, helper)
    b1 /= np.linalg.norm(b1)
    b2 = np.cross(n, b1)
    return np.stack([b1, b2], axis=1)


def plane_euclidean_grad(real: CameraExtrinsics, plane: Plane, G_W: np.ndarray, g_t: np.ndarray):
    """Chain virtual-camera (dL/dR', dL/dt') to (dL/dn, dL/do).

    The virtual camera is R' = R H, t' = t + 2 o R n with H = I - 2 n n^T.
    """
    R = real.rotation
    n, o = plane.normal, plane.offset
    G_H = R.T @ G_W
    Rt_g = R.T @ g_t
    g_n = -2.0 * (G_H + G_H.T) @ n + 2.0 * o * Rt_g
    g_o = 2.0 * n @ Rt_g
    return g_n, float(g_o)


def backward_pose(scene: GaussianScene, camera: Camera, *, color=None, plane: Plane | None = None,
                  real_extrinsics: CameraExtrinsics | None = None, state: RenderState | None = None,
                  clip_margin: float | None = None, threads: int | None = None) -> PoseGrads:
    """Gradient of a photometric loss w.r.t. the pose of ``camera``.

    Gaussian attribute gradients are not formed. If ``plane`` and the real
    camera's extrinsics are given, ``camera`` must be the virtual camera
    reflected through ``plane`` and the result is also chained to the plane's
    tangent coordinates (2-vector for the normal in the basis
    :func:`plane_tangent_basis`, then the offset).
    """
    if state is None:
        kwargs = {}
        if plane is not None and clip_margin is not None:
            kwargs = {"clip_plane": plane, "clip_margin": clip_margin}
        _, state = render_with_state(scene, camera, threads=threads, **kwargs)
    up = _pack_upstream(camera.height, camera.width, color, None, None, None)
    sg = _splat_grads(state, up, threads)
    _, G_W, g_t = _chain(scene, state, sg, want_scene=False)
    result = PoseGrads(pose=pose_tangent_grad(camera.extrinsics, G_W, g_t), rotation_matrix=G_W, translation=g_t)
    if plane is not None:
        if real_extrinsics is None:
            raise ValueError("plane chaining needs the real camera extrinsics")
        g_n, g_o = plane_euclidean_grad(real_extrinsics, plane, G_W, g_t)
        B = plane_tangent_basis(plane.normal)
        result.plane = np.concatenate([B.T @ g_n, [g_o]])
    return result


@dataclass
class FiniteDiffReport:
    coords: np.ndarray
    analytic: np.ndarray
    numeric: np.ndarray
    rel_error: np.ndarray
    skipped: np.ndarray
    tolerance: float
    gated: np.ndarray | None = None
    max_gated_fraction: float = 0.1

    @property
    def checked(self) -> np.ndarray:
        mask = ~self.skipped
        if self.gated is not None:
            mask &= ~self.gated
        return mask

    @property
    def max_rel_error(self) -> float:
        errs = self.rel_error[self.checked]
        return float(errs.max()) if errs.size else 0.0

    @property
    def n_gated(self) -> int:
        return 0 if self.gated is None else int(self.gated.sum())

    @property
    def passed(self) -> bool:
        if self.n_gated > self.max_gated_fraction * self.coords.size:
            return False
        return self.max_rel_error < self.tolerance

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return (f"{status}: {int(self.checked.sum())} coords checked, "
                f"{int(self.skipped.sum())} tiny, {self.n_gated} straddling a gate, "
                f"max rel err {self.max_rel_error:.3e} (tol {self.tolerance:g})")


def finite_diff_check(f, x0, analytic_grad, h: float = 1e-5, tolerance: float = 1e-3,
                      coords=None, tiny: float = 1e-8, gate_fn=None,
                      max_gated_fraction: float = 0.1) -> FiniteDiffReport:
    """Compare ``analytic_grad`` against central differences of scalar ``f``.

    Coordinates where both the analytic and numeric values are below ``tiny``
    in magnitude are skipped. Relative error is |a - n| / max(|a|, |n|).

    ``gate_fn(x)``, if given, returns a fingerprint of the discrete branch
    taken at x. When only one probe leaves the branch of x0, a second-order
    one-sided difference on the other side (probes at h and 2h) is used
    instead; if that is not possible either the coordinate straddles a
    non-differentiable gate and is reported but not scored. The check fails outright if more than
    ``max_gated_fraction`` of the coordinates are unscored this way.
    """
    x0 = np.asarray(x0, dtype=np.float64).ravel()
    analytic_grad = np.asarray(analytic_grad, dtype=np.float64).ravel()
    coords = np.arange(x0.size) if coords is None else np.asarray(coords)
    numeric = np.empty(coords.size)
    gated = np.zeros(coords.size, dtype=bool) if gate_fn is not None else None
    if gate_fn is not None:
        base = gate_fn(x0)
        f0 = f(x0)
    for j, i in enumerate(coords):
        xp = x0.copy()
        xm = x0.copy()
        xp[i] += h
        xm[i] -= h
        fp, fm = f(xp), f(xm)
        numeric[j] = (fp - fm) / (2 * h)
        if gate_fn is not None:
            same_p = gate_fn(xp) == base
            same_m = gate_fn(xm) == base
            if same_p != same_m:
                side = 1.0 if same_p else -1.0
                x2 = x0.copy()
                x2[i] += 2 * side * h
                if gate_fn(x2) == base:
                    f1 = fp if same_p else fm
                    numeric[j] = side * (4 * f1 - 3 * f0 - f(x2)) / (2 * h)
                else:
                    same_p = same_m = False
            gated[j] = not (same_p or same_m)
    a = analytic_grad[coords]
    scale = np.maximum(np.abs(a), np.abs(numeric))
    skipped = scale < tiny
    rel = np.where(skipped, 0.0, np.abs(a - numeric) / np.where(skipped, 1.0, scale))
    return FiniteDiffReport(coords, a, numeric, rel, skipped, tolerance, gated, max_gated_fraction)
