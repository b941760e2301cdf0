"""Gaussian scene representation and the camera / plane value types."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199

QUAT_TOL = 1e-6
ORTHO_TOL = 1e-6


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices from (w, x, y, z) quaternions; input is normalized first.

    Accepts shape (4,) or (N, 4).
    """
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q, -1, 0)
    R = np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return R.reshape(q.shape[:-1] + (3, 3))


def rotmat_to_quat(R: np.ndarray) -> np.ndarray:
    """Inverse of :func:`quat_to_rotmat` for a single proper rotation, w >= 0."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    return q if q[0] >= 0 else -q


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a * b for (w, x, y, z) quaternions, broadcasting."""
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=np.float64), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=np.float64), -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(omega: np.ndarray) -> np.ndarray:
    """Rodrigues' formula."""
    omega = np.asarray(omega, dtype=np.float64)
    theta = np.linalg.norm(omega)
    K = skew(omega)
    if theta < 1e-12:
        return np.eye(3) + K
    return np.eye(3) + np.sin(theta) / theta * K + (1 - np.cos(theta)) / theta**2 * (K @ K)


def num_sh_coeffs(degree: int) -> int:
    return (degree + 1) ** 2


def build_covariance(scale, rotation) -> np.ndarray:
    """Covariance R diag(scale^2) R^T of one Gaussian.

    Args:
        scale: positive per-axis standard deviations, shape (3,).
        rotation: unit (w, x, y, z) quaternion.
    """
    R = quat_to_rotmat(rotation)
    s = np.asarray(scale, dtype=np.float64)
    cov = (R * s**2) @ R.T
    return 0.5 * (cov + cov.T)


def shortest_axis_normal(g: "Gaussian") -> np.ndarray:
    # argmin returns the first index on ties
    k = int(np.argmin(g.scale))
    return g.rotation_matrix[:, k].copy()


@dataclass(frozen=True)
class Gaussian:
    """One Gaussian in its stored (pre-activation) parameterization."""

    mean: np.ndarray
    log_scale: np.ndarray
    quat: np.ndarray
    opacity_logit: float
    color_coeffs: np.ndarray  # ((degree+1)^2, 3)

    @classmethod
    def create(cls, mean, scale, quat=(1.0, 0.0, 0.0, 0.0), opacity=0.5, color_coeffs=None):
        if color_coeffs is None:
            color_coeffs = np.zeros((1, 3))
        return cls(
            mean=np.asarray(mean, dtype=np.float64),
            log_scale=np.log(np.asarray(scale, dtype=np.float64)),
            quat=np.asarray(quat, dtype=np.float64),
            opacity_logit=float(logit(opacity)),
            color_coeffs=np.atleast_2d(np.asarray(color_coeffs, dtype=np.float64)),
        )

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_logit))

    @property
    def rotation(self) -> np.ndarray:
        return self.quat / np.linalg.norm(self.quat)

    @property
    def rotation_matrix(self) -> np.ndarray:
        return quat_to_rotmat(self.quat)

    @property
    def covariance(self) -> np.ndarray:
        return build_covariance(self.scale, self.rotation)


_PARAM_FIELDS = ("means", "log_scales", "quats", "opacity_logits", "sh")


@dataclass(frozen=True, eq=False)
class GaussianScene:
    """Struct-of-arrays container for N Gaussians.

    Arrays are copied and frozen on construction so a scene can be shared with
    a running render while the trainer builds the next one.
    """

    means: np.ndarray  # (N, 3)
    log_scales: np.ndarray  # (N, 3)
    quats: np.ndarray  # (N, 4), (w, x, y, z)
    opacity_logits: np.ndarray  # (N,)
    sh: np.ndarray  # (N, K, 3)
    sh_degree: int = 1

    def __post_init__(self):
        for name in _PARAM_FIELDS:
            arr = np.array(getattr(self, name), dtype=np.float64, copy=True)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        if self.sh_degree not in (0, 1):
            raise ValueError(f"sh_degree must be 0 or 1, got {self.sh_degree}")
        n = self.means.shape[0]
        k = num_sh_coeffs(self.sh_degree)
        expected = {
            "means": (n, 3), "log_scales": (n, 3), "quats": (n, 4),
            "opacity_logits": (n,), "sh": (n, k, 3),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    def __len__(self) -> int:
        return self.means.shape[0]

    def __getitem__(self, i: int) -> Gaussian:
        return Gaussian(
            mean=self.means[i].copy(),
            log_scale=self.log_scales[i].copy(),
            quat=self.quats[i].copy(),
            opacity_logit=float(self.opacity_logits[i]),
            color_coeffs=self.sh[i].copy(),
        )

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @classmethod
    def from_gaussians(cls, gaussians, sh_degree: int | None = None) -> "GaussianScene":
        gaussians = list(gaussians)
        if sh_degree is None:
            sh_degree = int(round(np.sqrt(gaussians[0].color_coeffs.shape[0]))) - 1
        return cls(
            means=np.stack([g.mean for g in gaussians]),
            log_scales=np.stack([g.log_scale for g in gaussians]),
            quats=np.stack([g.quat for g in gaussians]),
            opacity_logits=np.array([g.opacity_logit for g in gaussians]),
            sh=np.stack([g.color_coeffs for g in gaussians]),
            sh_degree=sh_degree,
        )

    @classmethod
    def empty(cls, sh_degree: int = 1) -> "GaussianScene":
        k = num_sh_coeffs(sh_degree)
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0),
                   np.zeros((0, k, 3)), sh_degree)

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in _PARAM_FIELDS}

    def replace(self, **changes) -> "GaussianScene":
        return replace(self, **changes)

    def subset(self, index) -> "GaussianScene":
        return self.replace(**{name: getattr(self, name)[index] for name in _PARAM_FIELDS})

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    @property
    def rotations(self) -> np.ndarray:
        return quat_to_rotmat(self.quats)

    def covariances(self) -> np.ndarray:
        R = self.rotations
        s2 = self.scales**2
        return np.einsum("nij,nj,nkj->nik", R, s2, R)

    def normals(self) -> np.ndarray:
        """World-frame shortest-axis directions, ties to the lowest axis."""
        k = np.argmin(self.scales, axis=1)
        return self.rotations[np.arange(len(self)), :, k]


def validate_scene(scene: GaussianScene) -> list[str]:
    """Diagnose invariant violations; an empty list means the scene is valid."""
    problems = []
    for i in range(len(scene)):
        fields = {
            "mean": scene.means[i], "log_scale": scene.log_scales[i], "quat": scene.quats[i],
            "opacity_logit": scene.opacity_logits[i], "color_coeffs": scene.sh[i],
        }
        bad = [name for name, v in fields.items() if not np.all(np.isfinite(v))]
        if bad:
            problems.append(f"gaussian {i}: non-finite {', '.join(bad)}")
            continue
        qn = np.linalg.norm(scene.quats[i])
        if abs(qn - 1.0) > QUAT_TOL:
            problems.append(f"gaussian {i}: quaternion norm {qn:.8g} is not unit")
            continue
        cov = build_covariance(np.exp(scene.log_scales[i]), scene.quats[i])
        if np.linalg.eigvalsh(cov).min() <= 0:
            problems.append(f"gaussian {i}: covariance not positive definite")
    return problems


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(f"principal point ({self.cx}, {self.cy}) outside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def scaled(self, factor: float, width: int, height: int) -> "CameraIntrinsics":
        return CameraIntrinsics(self.fx * factor, self.fy * factor, self.cx * factor,
                                self.cy * factor, width, height)


@dataclass(frozen=True, eq=False)
class CameraExtrinsics:
    """World-to-camera transform x_cam = R x_world + t.

    Real cameras have det(R) = +1; virtual cameras produced by a mirror
    reflection carry det(R) = -1, so only orthogonality is enforced here.
    """

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if R.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        if np.abs(R.T @ R - np.eye(3)).max() > ORTHO_TOL:
            raise ValueError("rotation is not orthonormal")
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "CameraExtrinsics":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, M) -> "CameraExtrinsics":
        M = np.asarray(M, dtype=np.float64).reshape(4, 4)
        return cls(M[:3, :3], M[:3, 3])

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0)) -> "CameraExtrinsics":
        """OpenCV-style camera (x right, y down, z forward) at eye facing target."""
        eye = np.asarray(eye, dtype=np.float64)
        z = np.asarray(target, dtype=np.float64) - eye
        z /= np.linalg.norm(z)
        x = np.cross(z, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(x) < 1e-9:
            x = np.cross(z, np.array([1.0, 0.0, 0.0]))
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        R = np.stack([x, y, z])
        return cls(R, -R @ eye)

    @property
    def is_proper(self) -> bool:
        return abs(np.linalg.det(self.rotation) - 1.0) <= ORTHO_TOL

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @property
    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def perturbed(self, xi) -> "CameraExtrinsics":
        """Left-multiplied update: R <- exp(w) R, t <- exp(w) t + v with xi = (w, v)."""
        xi = np.asarray(xi, dtype=np.float64)
        dR = so3_exp(xi[:3])
        return CameraExtrinsics(dR @ self.rotation, dR @ self.translation + xi[3:])


@dataclass(frozen=True)
class Camera:
    intrinsics: CameraIntrinsics
    extrinsics: CameraExtrinsics

    @property
    def width(self) -> int:
        return self.intrinsics.width

    @property
    def height(self) -> int:
        return self.intrinsics.height

    def with_extrinsics(self, extrinsics: CameraExtrinsics) -> "Camera":
        return Camera(self.intrinsics, extrinsics)


@dataclass(frozen=True, eq=False)
class Plane:
    """Plane n^T x - o = 0 with unit normal n."""

    normal: np.ndarray
    offset: float

    def __post_init__(self):
        n = np.array(self.normal, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(n) - 1.0) > 1e-9:
            raise ValueError(f"plane normal must be unit length, got norm {np.linalg.norm(n)}")
        n.flags.writeable = False
        object.__setattr__(self, "normal", n)
        object.__setattr__(self, "offset", float(self.offset))

    @classmethod
    def from_normal(cls, normal, offset) -> "Plane":
        n = np.asarray(normal, dtype=np.float64)
        norm = np.linalg.norm(n)
        return cls(n / norm, offset / norm)

    @classmethod
    def through_point(cls, normal, point) -> "Plane":
        n = np.asarray(normal, dtype=np.float64)
        n = n / np.linalg.norm(n)
        return cls(n, float(n @ np.asarray(point, dtype=np.float64)))

    def signed_distance(self, x) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) @ self.normal - self.offset

    def flipped(self) -> "Plane":
        return Plane(-self.normal, -self.offset)

    def angle_to(self, other: "Plane") -> float:
        """Angle in degrees between the two normals."""
        c = np.clip(self.normal @ other.normal, -1.0, 1.0)
        return float(np.degrees(np.arccos(c)))


@dataclass(frozen=True)
class RenderOutput:
    color: np.ndarray  # (H, W, 3)
    depth: np.ndarray  # (H, W)
    normal: np.ndarray  # (H, W, 3), camera frame, not renormalized
    alpha: np.ndarray  # (H, W)

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape


@dataclass(frozen=True, eq=False)
class MirrorDatasetView:
    image: np.ndarray  # (H, W, 3) linear [0, 1]
    mask: np.ndarray  # (H, W) bool, True on mirror pixels
    intrinsics: CameraIntrinsics
    extrinsics: CameraExtrinsics
    name: str = ""

    def __post_init__(self):
        if self.image.shape[:2] != self.mask.shape:
            raise ValueError(f"view {self.name!r}: mask shape {self.mask.shape} != image {self.image.shape[:2]}")
        if self.image.shape[:2] != (self.intrinsics.height, self.intrinsics.width):
            raise ValueError(f"view {self.name!r}: image size does not match intrinsics")

    @property
    def camera(self) -> Camera:
        return Camera(self.intrinsics, self.extrinsics)

    @property
    def has_mirror(self) -> bool:
        return bool(self.mask.any())
