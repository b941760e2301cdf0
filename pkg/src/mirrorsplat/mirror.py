"""Mirror geometry: reflections, virtual cameras, plane estimation and fusion."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .gradients import plane_tangent_basis
from .scene import Camera, CameraExtrinsics, GaussianScene, Plane, quat_multiply

# minimum mirror pixels for a view to qualify: 30000 px of a ~1600x405 frame,
# rescaled to the image area, never below an absolute floor
MIN_PIXEL_FRACTION = 30000 / 648000
MIN_PIXEL_FLOOR = 500


class InsufficientMirrorPixels(ValueError):
    pass


class DegenerateNormals(ValueError):
    pass


def householder(n) -> np.ndarray:
    n = np.asarray(n, dtype=np.float64)
    return np.eye(3) - 2.0 * np.outer(n, n)


def reflect_point(x, plane: Plane) -> np.ndarray:
    """Mirror image x - 2 (n^T x - o) n; works on (3,) or (N, 3)."""
    x = np.asarray(x, dtype=np.float64)
    d = x @ plane.normal - plane.offset
    return x - 2.0 * np.multiply.outer(d, plane.normal)


def reflect_extrinsics(extr: CameraExtrinsics, plane: Plane) -> CameraExtrinsics:
    """World-to-camera transform of the virtual camera mirrored through ``plane``.

    The virtual camera maps a world point x to the same camera coordinates
    the real camera gives its mirror image, i.e. R' = R H and
    t' = t + 2 o R n with H = I - 2 n n^T. Equivalently the camera-to-world
    pose is left-multiplied by the 4x4 reflection [H, 2 o n; 0, 1]. R' has
    determinant -1.
    """
    R, t = extr.rotation, extr.translation
    n, o = plane.normal, plane.offset
    return CameraExtrinsics(R @ householder(n), t + 2.0 * o * (R @ n))


def virtual_camera(camera: Camera, plane: Plane) -> Camera:
    return camera.with_extrinsics(reflect_extrinsics(camera.extrinsics, plane))


def reflect_scene(scene: GaussianScene, plane: Plane) -> GaussianScene:
    """Mirror every Gaussian through ``plane``.

    Rotations become H R diag(-1, 1, 1), which keeps det = +1 and leaves the
    covariance equal to H Sigma H. In quaternions that is (0, n) * q * (0, 1, 0, 0),
    which makes the map an exact involution. Degree-1 SH lobes are reflected
    so view-dependent color follows the mirrored view direction.
    """
    n = plane.normal
    means = reflect_point(scene.means, plane)
    qn = np.concatenate([[0.0], n])
    qx = np.array([0.0, 1.0, 0.0, 0.0])
    quats = quat_multiply(quat_multiply(qn, scene.quats), qx)
    sh = scene.sh.copy()
    if scene.sh_degree >= 1:
        # band-1 value is C1 * w . d with w = (-s3, -s1, s2) per channel
        w = np.stack([-sh[:, 3, :], -sh[:, 1, :], sh[:, 2, :]], axis=1)
        w = np.einsum("ij,njc->nic", householder(n), w)
        sh[:, 3, :] = -w[:, 0, :]
        sh[:, 1, :] = -w[:, 1, :]
        sh[:, 2, :] = w[:, 2, :]
    return scene.replace(means=means, quats=quats, sh=sh)


def fuse_images(real: np.ndarray, virtual: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Virtual render inside the mirror mask, real render elsewhere (hard switch)."""
    real = np.asarray(real)
    virtual = np.asarray(virtual)
    mask = np.asarray(mask, dtype=bool)
    if real.shape != virtual.shape or real.shape[:2] != mask.shape:
        raise ValueError(f"shape mismatch: real {real.shape}, virtual {virtual.shape}, mask {mask.shape}")
    m = mask if real.ndim == 2 else mask[..., None]
    return np.where(m, virtual, real)


def backproject(depth: np.ndarray, mask: np.ndarray, camera: Camera) -> np.ndarray:
    """World points of masked pixels with positive depth, shape (N, 3)."""
    intr, extr = camera.intrinsics, camera.extrinsics
    sel = np.asarray(mask, dtype=bool) & (depth > 0)
    v, u = np.nonzero(sel)
    d = depth[v, u]
    p_cam = np.stack([(u - intr.cx) / intr.fx * d, (v - intr.cy) / intr.fy * d, d], axis=1)
    return (p_cam - extr.translation) @ extr.rotation


def surface_depth(depth: np.ndarray, alpha: np.ndarray, min_alpha: float = 1e-3) -> np.ndarray:
    """Alpha-normalized depth; composited depth alone is pulled toward the camera where alpha < 1."""
    alpha = np.asarray(alpha, dtype=np.float64)
    return np.where(alpha > min_alpha, depth / np.maximum(alpha, min_alpha), 0.0)


def normals_to_world(normal_cam: np.ndarray, extr: CameraExtrinsics) -> np.ndarray:
    return normal_cam @ extr.rotation


def min_mirror_pixels(width: int, height: int, fraction: float = MIN_PIXEL_FRACTION,
                      floor: int = MIN_PIXEL_FLOOR) -> int:
    return max(int(floor), int(np.ceil(fraction * width * height)))


@dataclass(frozen=True)
class RansacConfig:
    iterations: int = 1000
    threshold: float = 0.1
    min_pixel_fraction: float = MIN_PIXEL_FRACTION
    min_pixel_floor: int = MIN_PIXEL_FLOOR
    seed: int = 0


@dataclass(frozen=True)
class PlaneEstimate:
    plane: Plane
    inlier_count: int
    points_used: int
    source_view: str | int | None = None


def ransac_offset(n: np.ndarray, points: np.ndarray, iterations: int, threshold: float,
                  rng: np.random.Generator) -> tuple[float, int]:
    """One-point RANSAC for the offset of a plane with known normal.

    Each hypothesis takes o = n^T x from a single sampled point and counts
    points with |n^T x_j - o| < threshold; the winner is refined as the mean
    of n^T x over its inliers. Returns (offset, inlier count of the winner).
    """
    s = points @ n
    order = np.sort(s)
    picks = rng.integers(0, s.size, size=iterations)
    hyp = s[picks]
    counts = np.searchsorted(order, hyp + threshold, "left") - np.searchsorted(order, hyp - threshold, "right")
    best = int(np.argmax(counts))
    inliers = np.abs(s - hyp[best]) < threshold
    return float(s[inliers].mean()), int(counts[best])


def fit_plane(points: np.ndarray, normals: np.ndarray, cfg: RansacConfig = RansacConfig(),
              facing: np.ndarray | None = None) -> tuple[Plane, int]:
    """Plane from per-point normals (averaged) and points (RANSAC on the offset).

    ``facing``, a point such as the camera centre, fixes the normal's sign so
    that it lies on the positive side of the plane.
    """
    normals = np.asarray(normals, dtype=np.float64)
    lengths = np.linalg.norm(normals, axis=1)
    valid = lengths > 1e-12
    mean = (normals[valid] / lengths[valid, None]).sum(axis=0) / max(int(valid.sum()), 1)
    if np.linalg.norm(mean) < 1e-6:
        raise DegenerateNormals("degenerate normals: mean normal vanishes")
    n = mean / np.linalg.norm(mean)
    rng = np.random.default_rng(cfg.seed)
    o, count = ransac_offset(n, points, cfg.iterations, cfg.threshold, rng)
    plane = Plane(n, o)
    if facing is not None and plane.signed_distance(facing) < 0:
        plane = plane.flipped()
    return plane, count


def estimate_plane(depth: np.ndarray, normal_world: np.ndarray, mask: np.ndarray, camera: Camera,
                   cfg: RansacConfig = RansacConfig(), source_view=None) -> PlaneEstimate:
    """Mirror plane from one view's depth and world-frame normal maps.

    The normal is the mean of the renormalized masked normals; the offset
    comes from one-point RANSAC over the backprojected masked pixels. The
    returned normal points toward the camera.
    """
    mask = np.asarray(mask, dtype=bool)
    need = min_mirror_pixels(camera.width, camera.height, cfg.min_pixel_fraction, cfg.min_pixel_floor)
    if int(mask.sum()) < need:
        raise InsufficientMirrorPixels(
            f"insufficient mirror pixels: {int(mask.sum())} masked, need {need}")
    sel = mask & (depth > 0)
    points = backproject(depth, sel, camera)
    normals = normal_world[sel]
    plane, count = fit_plane(points, normals, cfg, facing=camera.extrinsics.center)
    return PlaneEstimate(plane, count, points.shape[0], source_view)


@dataclass
class TangentPlane:
    """Plane with normal n(a) = normalize(n_ref + B a) and free offset.

    ``a`` (2,) and ``offset`` are the optimized coordinates; the basis B is
    fixed at construction so optimizer moments stay meaningful.
    """

    n_ref: np.ndarray
    a: np.ndarray = field(default_factory=lambda: np.zeros(2))
    offset: float = 0.0

    def __post_init__(self):
        self.n_ref = np.asarray(self.n_ref, dtype=np.float64) / np.linalg.norm(self.n_ref)
        self.a = np.asarray(self.a, dtype=np.float64).copy()
        self.basis = plane_tangent_basis(self.n_ref)

    @classmethod
    def from_plane(cls, plane: Plane) -> "TangentPlane":
        return cls(plane.normal.copy(), np.zeros(2), plane.offset)

    @property
    def plane(self) -> Plane:
        v = self.n_ref + self.basis @ self.a
        return Plane(v / np.linalg.norm(v), self.offset)

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.a, [self.offset]])

    def set_vector(self, x) -> None:
        self.a = np.asarray(x[:2], dtype=np.float64).copy()
        self.offset = float(x[2])

    def grad_from_euclidean(self, g_n: np.ndarray, g_o: float) -> np.ndarray:
        """Chain (dL/dn, dL/do) to (dL/da, dL/do)."""
        v = self.n_ref + self.basis @ self.a
        norm = np.linalg.norm(v)
        n = v / norm
        dn_da = (np.eye(3) - np.outer(n, n)) @ self.basis / norm
        return np.concatenate([dn_da.T @ g_n, [g_o]])
