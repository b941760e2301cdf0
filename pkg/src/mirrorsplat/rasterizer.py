"""Tile-based forward splatting of color, depth and normal buffers."""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import _kernels
from ._kernels import ALPHA_MAX, ALPHA_MIN, T_MIN
from .scene import SH_C0, SH_C1, Camera, Gaussian, GaussianScene, Plane, RenderOutput

log = logging.getLogger(__name__)

NEAR = 0.01
LOWPASS = 0.3
FRUSTUM_GUARD = 1.3
TILE_SIZE = 16
MAX_COND = 1e12
N_FEATURES = 8  # color(3) depth(1) normal(3) one(1)

_threads = max(1, int(os.environ.get("MIRRORSPLAT_THREADS", "1")))


def set_num_threads(n: int) -> None:
    """Size of the tile thread pool used by render and backward passes."""
    global _threads
    _threads = max(1, int(n))


def get_num_threads() -> int:
    return _threads


def evaluate_sh(color_coeffs, view_dir) -> np.ndarray:
    """Color of degree-0/1 real SH coefficients seen along ``view_dir``.

    Works on a single Gaussian ((K, 3) coeffs, (3,) dir) or batched
    ((N, K, 3), (N, 3)). The result is offset by 0.5 and clamped to [0, 1].
    """
    return np.clip(_sh_raw(np.asarray(color_coeffs, float), np.asarray(view_dir, float)), 0.0, 1.0)


def _sh_raw(sh, d):
    out = 0.5 + SH_C0 * sh[..., 0, :]
    if sh.shape[-2] > 1:
        x, y, z = d[..., 0:1], d[..., 1:2], d[..., 2:3]
        out = out + SH_C1 * (-y * sh[..., 1, :] + z * sh[..., 2, :] - x * sh[..., 3, :])
    return out


@dataclass(frozen=True)
class ProjectedGaussian:
    screen_mean: np.ndarray
    z_depth: float
    cov2d: np.ndarray  # 2x2
    color: np.ndarray
    opacity: float
    normal_cam: np.ndarray
    world_index: int


@dataclass
class Projection:
    """Screen-space splats of the Gaussians that survived culling.

    Holds the intermediate quantities the backward pass reuses.
    """

    index: np.ndarray  # world indices (M,)
    means2d: np.ndarray  # (M, 2)
    depth: np.ndarray  # (M,)
    cov2d: np.ndarray  # (M, 3) as (xx, xy, yy)
    conic: np.ndarray  # (M, 3)
    opacity: np.ndarray  # (M,)
    color: np.ndarray  # (M, 3)
    normal_cam: np.ndarray  # (M, 3)
    # cached for the backward pass
    p_cam: np.ndarray
    J: np.ndarray  # (M, 2, 3)
    cov3d: np.ndarray
    rot: np.ndarray
    scales: np.ndarray
    axis: np.ndarray
    flip: np.ndarray
    view_dir: np.ndarray
    view_dist: np.ndarray
    color_raw: np.ndarray
    W: np.ndarray
    t: np.ndarray
    center: np.ndarray
    jac_ratio: np.ndarray  # (M, 2) x/z, y/z as used in J, after clamping
    jac_inside: np.ndarray  # (M, 2) True where the ratio was not clamped

    def __len__(self):
        return self.index.shape[0]

    def features(self) -> np.ndarray:
        f = np.empty((len(self), N_FEATURES))
        f[:, 0:3] = self.color
        f[:, 3] = self.depth
        f[:, 4:7] = self.normal_cam
        f[:, 7] = 1.0
        return f


def _support_radius(opacity):
    """Mahalanobis radius beyond which a splat's alpha drops under the skip threshold."""
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.sqrt(np.maximum(2.0 * np.log(np.maximum(opacity, 1e-300) / ALPHA_MIN), 0.0))
    return np.maximum(r, 3.0)


def project(scene: GaussianScene, camera: Camera, clip_plane: Plane | None = None,
            clip_margin: float = 0.0) -> Projection:
    """Project every Gaussian into the camera and drop the culled ones.

    A Gaussian is culled when its camera-frame z is at or behind the near
    plane, when its opacity can never reach the alpha skip threshold, when its
    support ellipse misses every pixel centre, or when ``clip_plane`` is given
    and its mean is not more than ``clip_margin`` in front of that plane.
    """
    intr, extr = camera.intrinsics, camera.extrinsics
    W = extr.rotation
    t = extr.translation
    center = extr.center
    fx, fy, cx, cy = intr.fx, intr.fy, intr.cx, intr.cy

    means = scene.means
    p_cam = means @ W.T + t
    opacity = scene.opacities
    keep = (p_cam[:, 2] > NEAR) & (opacity >= ALPHA_MIN)
    if clip_plane is not None:
        keep &= clip_plane.signed_distance(means) > clip_margin
    idx = np.nonzero(keep)[0]

    p = p_cam[idx]
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    means2d = np.stack([fx * x / z + cx, fy * y / z + cy], axis=1)
    # the Jacobian is evaluated with x/z, y/z clamped to a widened frustum so
    # splats far off to the side of a near camera do not blow up on screen
    ratio = np.stack([x / z, y / z], axis=1)
    lo = np.array([(-0.5 - cx) / fx, (-0.5 - cy) / fy])
    hi = np.array([(intr.width - 0.5 - cx) / fx, (intr.height - 0.5 - cy) / fy])
    mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
    clamped = np.clip(ratio, mid - FRUSTUM_GUARD * half, mid + FRUSTUM_GUARD * half)
    inside = clamped == ratio
    J = np.zeros((idx.size, 2, 3))
    J[:, 0, 0] = fx / z
    J[:, 0, 2] = -fx * clamped[:, 0] / z
    J[:, 1, 1] = fy / z
    J[:, 1, 2] = -fy * clamped[:, 1] / z

    rot = scene.rotations[idx]
    scales = scene.scales[idx]
    cov3d = np.einsum("nij,nj,nkj->nik", rot, scales**2, rot)
    M = J @ W
    c2 = M @ cov3d @ np.transpose(M, (0, 2, 1))
    a = c2[:, 0, 0] + LOWPASS
    b = 0.5 * (c2[:, 0, 1] + c2[:, 1, 0])
    c = c2[:, 1, 1] + LOWPASS
    det = a * c - b * b

    tr = a + c
    disc = np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    lmax = 0.5 * tr + disc
    lmin = 0.5 * tr - disc
    degenerate = ~(lmin > 0) | (lmax > MAX_COND * np.maximum(lmin, 1e-300))
    if degenerate.any():
        log.warning("skipping %d splats with degenerate screen covariance", int(degenerate.sum()))

    op = opacity[idx]
    r = _support_radius(op)
    rx = r * np.sqrt(np.maximum(a, 0.0))
    ry = r * np.sqrt(np.maximum(c, 0.0))
    mx, my = means2d[:, 0], means2d[:, 1]
    onscreen = (
        (np.ceil(mx - rx) <= np.minimum(np.floor(mx + rx), intr.width - 1))
        & (np.floor(mx + rx) >= 0)
        & (np.ceil(my - ry) <= np.minimum(np.floor(my + ry), intr.height - 1))
        & (np.floor(my + ry) >= 0)
    )
    sel = onscreen & ~degenerate

    idx = idx[sel]
    p = p[sel]
    J = J[sel]
    rot = rot[sel]
    scales = scales[sel]
    cov3d = cov3d[sel]
    means2d = means2d[sel]
    clamped, inside = clamped[sel], inside[sel]
    a, b, c, det = a[sel], b[sel], c[sel], det[sel]

    conic = np.stack([c / det, -b / det, a / det], axis=1)

    axis = np.argmin(scales, axis=1)
    n_world = rot[np.arange(idx.size), :, axis]
    n_cam = n_world @ W.T
    flip = np.where(np.einsum("ij,ij->i", n_cam, p) > 0, -1.0, 1.0)
    n_cam = n_cam * flip[:, None]

    d = means[idx] - center
    dist = np.linalg.norm(d, axis=1)
    view_dir = d / dist[:, None]
    color_raw = _sh_raw(scene.sh[idx], view_dir)

    return Projection(
        index=idx, means2d=means2d, depth=p[:, 2].copy(),
        cov2d=np.stack([a, b, c], axis=1), conic=conic, opacity=op[sel],
        color=np.clip(color_raw, 0.0, 1.0), normal_cam=n_cam,
        p_cam=p, J=J, cov3d=cov3d, rot=rot, scales=scales, axis=axis, flip=flip,
        view_dir=view_dir, view_dist=dist, color_raw=color_raw, W=W, t=t, center=center,
        jac_ratio=clamped, jac_inside=inside,
    )


def project_gaussian(g: Gaussian, camera: Camera) -> ProjectedGaussian | None:
    """Project a single Gaussian; returns None when it is culled."""
    proj = project(GaussianScene.from_gaussians([g]), camera)
    if len(proj) == 0:
        return None
    a, b, c = proj.cov2d[0]
    return ProjectedGaussian(
        screen_mean=proj.means2d[0], z_depth=float(proj.depth[0]),
        cov2d=np.array([[a, b], [b, c]]), color=proj.color[0], opacity=float(proj.opacity[0]),
        normal_cam=proj.normal_cam[0], world_index=0,
    )


def blend_weight(pg: ProjectedGaussian, pixel) -> float:
    """Alpha of one splat at one pixel, 0 when below the skip threshold."""
    cov = np.asarray(pg.cov2d, dtype=np.float64)
    if np.linalg.cond(cov) > MAX_COND:
        log.warning("degenerate screen covariance; splat skipped")
        return 0.0
    d = np.asarray(pixel, dtype=np.float64) - pg.screen_mean
    alpha = pg.opacity * np.exp(-0.5 * d @ np.linalg.solve(cov, d))
    alpha = min(alpha, ALPHA_MAX)
    return float(alpha) if alpha >= ALPHA_MIN else 0.0


@dataclass
class TileGrid:
    """Per-tile splat lists, each sorted front to back.

    ``entries[ranges[t, 0]:ranges[t, 1]]`` are the projection indices for tile t.
    """

    tile_size: int
    tiles_x: int
    tiles_y: int
    ranges: np.ndarray
    entries: np.ndarray
    entry_depth: np.ndarray

    @property
    def n_tiles(self) -> int:
        return self.tiles_x * self.tiles_y

    def tile_list(self, tile: int) -> list[tuple[int, float]]:
        s, e = self.ranges[tile]
        return list(zip(self.entries[s:e].tolist(), self.entry_depth[s:e].tolist()))


def build_tile_grid(proj: Projection, width: int, height: int, tile_size: int = TILE_SIZE) -> TileGrid:
    tiles_x = -(-width // tile_size)
    tiles_y = -(-height // tile_size)
    n_tiles = tiles_x * tiles_y
    m = len(proj)
    if m == 0:
        return TileGrid(tile_size, tiles_x, tiles_y, np.zeros((n_tiles, 2), np.int64),
                        np.zeros(0, np.int64), np.zeros(0))
    r = _support_radius(proj.opacity)
    rx = r * np.sqrt(proj.cov2d[:, 0]) + 1e-9
    ry = r * np.sqrt(proj.cov2d[:, 2]) + 1e-9
    mx, my = proj.means2d[:, 0], proj.means2d[:, 1]
    px0 = np.clip(np.ceil(mx - rx), 0, width - 1).astype(np.int64)
    px1 = np.clip(np.floor(mx + rx), 0, width - 1).astype(np.int64)
    py0 = np.clip(np.ceil(my - ry), 0, height - 1).astype(np.int64)
    py1 = np.clip(np.floor(my + ry), 0, height - 1).astype(np.int64)
    tx0, tx1 = px0 // tile_size, px1 // tile_size
    ty0, ty1 = py0 // tile_size, py1 // tile_size
    nx = tx1 - tx0 + 1
    ny = ty1 - ty0 + 1
    counts = nx * ny
    splat = np.repeat(np.arange(m), counts)
    local = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    tx = tx0[splat] + local % nx[splat]
    ty = ty0[splat] + local // nx[splat]
    tile = ty * tiles_x + tx
    depth = proj.depth[splat]
    # ties in depth fall back to the world index of the Gaussian
    order = np.lexsort((proj.index[splat], depth, tile))
    tile = tile[order]
    entries = splat[order]
    bounds = np.searchsorted(tile, np.arange(n_tiles + 1))
    ranges = np.stack([bounds[:-1], bounds[1:]], axis=1).astype(np.int64)
    return TileGrid(tile_size, tiles_x, tiles_y, ranges, entries.astype(np.int64), depth[order])


def _tile_chunks(n_tiles: int, threads: int) -> list[np.ndarray]:
    ids = np.arange(n_tiles, dtype=np.int64)
    if threads <= 1 or n_tiles <= 1:
        return [ids]
    return [c for c in np.array_split(ids, min(threads, n_tiles)) if c.size]


def _run_chunks(fn, chunks):
    if len(chunks) == 1:
        fn(chunks[0])
        return
    with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
        list(pool.map(fn, chunks))


@dataclass
class RenderState:
    """Everything a backward pass needs from the forward render."""

    camera: Camera
    proj: Projection
    grid: TileGrid
    feats: np.ndarray
    n_last: np.ndarray
    counts: np.ndarray  # per pixel: contributing splats, alpha-clamped splats
    n_gaussians: int
    t_final: np.ndarray | None = None

    def gate_signature(self) -> bytes:
        """Fingerprint of every discrete decision taken by the forward pass.

        Two renders with equal signatures lie on the same smooth branch of the
        pipeline (same depth order, alpha gates, early stops, normal signs, SH
        clamps). Tile membership is left out: a splat only enters or leaves a
        tile where its alpha is already below the cutoff.
        """
        p = self.proj
        order = p.index[np.lexsort((p.index, p.depth))]
        stopped = self.t_final < _kernels.T_MIN if self.t_final is not None else self.n_last
        parts = [order, self.counts, stopped, p.axis, p.flip, p.jac_inside, (p.color_raw > 0) & (p.color_raw < 1)]
        return b"".join(np.ascontiguousarray(a).tobytes() for a in parts)


def render_with_state(scene: GaussianScene, camera: Camera, *, clip_plane: Plane | None = None,
                      clip_margin: float = 0.0, tile_size: int = TILE_SIZE,
                      threads: int | None = None) -> tuple[RenderOutput, RenderState]:
    w, h = camera.width, camera.height
    proj = project(scene, camera, clip_plane, clip_margin)
    grid = build_tile_grid(proj, w, h, tile_size)
    feats = np.ascontiguousarray(proj.features())
    out = np.zeros((h, w, N_FEATURES))
    t_final = np.ones((h, w))
    n_last = np.zeros((h, w), dtype=np.int64)
    counts = np.zeros((h, w, 2), dtype=np.int64)
    means2d = np.ascontiguousarray(proj.means2d)
    conic = np.ascontiguousarray(proj.conic)
    opacity = np.ascontiguousarray(proj.opacity)

    def run(ids):
        _kernels.forward_tiles(ids, grid.ranges, grid.entries, means2d, conic, opacity, feats,
                               w, h, grid.tiles_x, tile_size, out, t_final, n_last, counts)

    _run_chunks(run, _tile_chunks(grid.n_tiles, threads or _threads))
    result = RenderOutput(color=out[..., 0:3], depth=out[..., 3], normal=out[..., 4:7], alpha=1.0 - t_final)
    state = RenderState(camera, proj, grid, feats, n_last, counts, len(scene), t_final)
    return result, state


def render(scene: GaussianScene, camera: Camera, *, clip_plane: Plane | None = None,
           clip_margin: float = 0.0, tile_size: int = TILE_SIZE, threads: int | None = None) -> RenderOutput:
    """Render color, z-depth, camera-frame normal and alpha buffers.

    Splats are composited front to back per pixel; a pixel stops accumulating
    once its transmittance falls under 1e-4. Pixels no splat reaches keep the
    black, zero-depth, zero-alpha background.
    """
    if len(scene) == 0:
        raise ValueError("cannot render an empty scene")
    return render_with_state(scene, camera, clip_plane=clip_plane, clip_margin=clip_margin,
                             tile_size=tile_size, threads=threads)[0]


def render_bruteforce(scene: GaussianScene, camera: Camera, *, clip_plane: Plane | None = None,
                      clip_margin: float = 0.0) -> RenderOutput:
    """Reference compositor: every splat is tested at every pixel, no tiling."""
    w, h = camera.width, camera.height
    proj = project(scene, camera, clip_plane, clip_margin)
    order = np.lexsort((proj.index, proj.depth))
    feats = proj.features()
    ys, xs = np.mgrid[0:h, 0:w]
    px = xs.ravel().astype(np.float64)
    py = ys.ravel().astype(np.float64)
    acc = np.zeros((px.size, N_FEATURES))
    T = np.ones(px.size)
    active = np.ones(px.size, dtype=bool)
    for m in order.tolist():
        dx = px - proj.means2d[m, 0]
        dy = py - proj.means2d[m, 1]
        ca, cb, cc = proj.conic[m]
        power = -0.5 * (ca * dx * dx + cc * dy * dy) - cb * dx * dy
        alpha = np.minimum(proj.opacity[m] * np.exp(power), ALPHA_MAX)
        use = active & (power <= 0) & (alpha >= ALPHA_MIN)
        a = np.where(use, alpha, 0.0)
        acc += (a * T)[:, None] * feats[m]
        T = np.where(use, T * (1.0 - a), T)
        active &= T >= T_MIN
    acc = acc.reshape(h, w, N_FEATURES)
    return RenderOutput(color=acc[..., 0:3], depth=acc[..., 3], normal=acc[..., 4:7],
                        alpha=1.0 - T.reshape(h, w))
