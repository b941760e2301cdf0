"""Dataset ingestion, image I/O and the synthetic mirror-room generator.

Manifest schema (JSON, paths relative to the manifest's directory)::

    {
      "version": 1,
      "pose_convention": "world_to_camera",   # x_cam = R x_world + t
      "scene_scale": 1.0,                     # radius hint for learning rates
      "points": "points.ply",                 # optional initial point cloud
      "ground_truth": "ground_truth.json",    # optional plane + scene sidecar
      "views": [
        {"name": "train_000", "split": "train",
         "image_path": "images/train_000.png",
         "mask_path": "masks/train_000.png",  # optional, >127 marks mirror
         "camera": {"fx": 48.0, "fy": 48.0, "cx": 31.5, "cy": 31.5,
                    "width": 64, "height": 64,
                    "world_to_camera": [16 floats, row-major 4x4]}}
      ]
    }

Images are 8-bit sRGB PNGs and are decoded to linear [0, 1] buffers.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .checkpoint import save_scene, to_float32
from .mirror import fuse_images, min_mirror_pixels, reflect_extrinsics, reflect_scene
from .rasterizer import render
from .scene import (SH_C0, Camera, CameraExtrinsics, CameraIntrinsics, GaussianScene,
                    MirrorDatasetView, Plane, logit, rotmat_to_quat)

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1
DEFAULT_MAX_WIDTH = 1600
DEPTH_SCALE = 1000.0


class DatasetError(ValueError):
    pass


class ManifestError(DatasetError):
    pass


class MissingFileError(DatasetError):
    pass


class MalformedMatrixError(DatasetError):
    pass


class SizeMismatchError(DatasetError):
    pass


class ImageIOError(OSError):
    pass


# --- image encoding ---------------------------------------------------------

def srgb_to_linear(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.where(x <= 0.04045, x / 12.92, ((x + 0.055) / 1.055) ** 2.4)


def linear_to_srgb(x: np.ndarray) -> np.ndarray:
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
    return np.where(x <= 0.0031308, 12.92 * x, 1.055 * x ** (1 / 2.4) - 0.055)


def to_bytes(x: np.ndarray) -> np.ndarray:
    """[0, 1] -> uint8 with round-half-up (0.5 -> 128)."""
    return np.floor(np.clip(x, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_image(buffer: np.ndarray, path, srgb: bool = False) -> None:
    """Write an (H, W) or (H, W, 3) buffer in [0, 1] as an 8-bit PNG."""
    data = linear_to_srgb(buffer) if srgb else buffer
    try:
        Image.fromarray(to_bytes(data)).save(path, format="PNG")
    except OSError as exc:
        raise ImageIOError(f"cannot write image {path}: {exc}") from exc


def read_image(path, srgb: bool = False) -> np.ndarray:
    """Read an 8-bit PNG into floats in [0, 1] (optionally sRGB-decoded)."""
    try:
        with Image.open(path) as im:
            mode = "L" if im.mode in ("L", "1", "I;16", "I") else "RGB"
            arr = np.asarray(im.convert(mode), dtype=np.float64) / 255.0
    except FileNotFoundError as exc:
        raise MissingFileError(f"missing image file {path}") from exc
    except OSError as exc:
        raise ImageIOError(f"cannot read image {path}: {exc}") from exc
    return srgb_to_linear(arr) if srgb else arr


def depth_scale_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".scale.txt")


def write_depth(depth: np.ndarray, path, scale: float = DEPTH_SCALE) -> None:
    """16-bit PNG of round(depth * scale) plus a sidecar holding the scale."""
    q = np.floor(np.clip(np.asarray(depth, dtype=np.float64) * scale, 0, 65535) + 0.5).astype(np.uint16)
    try:
        Image.fromarray(q).save(path, format="PNG")
        depth_scale_path(path).write_text(f"{scale!r}\n")
    except OSError as exc:
        raise ImageIOError(f"cannot write depth {path}: {exc}") from exc


def read_depth(path) -> np.ndarray:
    try:
        scale = float(depth_scale_path(path).read_text().strip())
        with Image.open(path) as im:
            q = np.asarray(im, dtype=np.float64)
    except OSError as exc:
        raise ImageIOError(f"cannot read depth {path}: {exc}") from exc
    return q / scale


# --- point clouds -----------------------------------------------------------

def write_points_ply(path, points: np.ndarray, colors: np.ndarray) -> None:
    """ASCII PLY with float xyz and uchar rgb (colors given in [0, 1])."""
    points = np.asarray(points, dtype=np.float64)
    rgb = to_bytes(colors)
    lines = ["ply", "format ascii 1.0", f"element vertex {len(points)}",
             "property float x", "property float y", "property float z",
             "property uchar red", "property uchar green", "property uchar blue", "end_header"]
    lines += [f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {c[0]} {c[1]} {c[2]}" for p, c in zip(points, rgb)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_points_ply(path) -> tuple[np.ndarray, np.ndarray]:
    try:
        text = Path(path).read_text().splitlines()
    except OSError as exc:
        raise MissingFileError(f"missing point cloud {path}") from exc
    if not text or text[0] != "ply" or "end_header" not in text:
        raise DatasetError(f"{path}: not an ASCII PLY file")
    start = text.index("end_header") + 1
    count = next(int(l.split()[2]) for l in text if l.startswith("element vertex"))
    rows = np.array([l.split() for l in text[start:start + count]], dtype=np.float64).reshape(-1, 6)
    return rows[:, :3], rows[:, 3:] / 255.0


# --- manifest ---------------------------------------------------------------

@dataclass
class Dataset:
    train: list[MirrorDatasetView]
    test: list[MirrorDatasetView]
    scene_scale: float = 1.0
    points: np.ndarray | None = None
    point_colors: np.ndarray | None = None
    ground_truth: dict | None = None
    root: Path | None = None

    @property
    def views(self) -> list[MirrorDatasetView]:
        return self.train + self.test

    def split(self, name: str) -> list[MirrorDatasetView]:
        if name not in ("train", "test"):
            raise DatasetError(f"unknown split {name!r}")
        return self.train if name == "train" else self.test

    def without_masks(self) -> "Dataset":
        def strip(views):
            return [MirrorDatasetView(v.image, np.zeros_like(v.mask), v.intrinsics, v.extrinsics, v.name)
                    for v in views]
        return Dataset(strip(self.train), strip(self.test), self.scene_scale, self.points,
                       self.point_colors, self.ground_truth, self.root)


def camera_record(camera: Camera) -> dict:
    i = camera.intrinsics
    return {"fx": i.fx, "fy": i.fy, "cx": i.cx, "cy": i.cy, "width": i.width, "height": i.height,
            "world_to_camera": [float(v) for v in camera.extrinsics.matrix.ravel()]}


def parse_camera(record: dict, name: str = "") -> Camera:
    try:
        intr = CameraIntrinsics(float(record["fx"]), float(record["fy"]), float(record["cx"]),
                                float(record["cy"]), int(record["width"]), int(record["height"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"view {name!r}: bad intrinsics: {exc}") from exc
    m = np.asarray(record.get("world_to_camera"), dtype=np.float64) if record.get("world_to_camera") is not None else None
    if m is None or m.size != 16 or not np.all(np.isfinite(m)):
        raise MalformedMatrixError(f"view {name!r}: world_to_camera must be 16 finite numbers")
    m = m.reshape(4, 4)
    if not np.allclose(m[3], [0, 0, 0, 1]):
        raise MalformedMatrixError(f"view {name!r}: last row of world_to_camera must be 0 0 0 1")
    if abs(np.linalg.det(m[:3, :3]) - 1.0) > 1e-6:
        raise MalformedMatrixError(f"view {name!r}: rotation block is not a proper rotation")
    try:
        extr = CameraExtrinsics.from_matrix(m)
    except ValueError as exc:
        raise MalformedMatrixError(f"view {name!r}: {exc}") from exc
    return Camera(intr, extr)


def _resize(buf: np.ndarray, width: int, height: int) -> np.ndarray:
    if buf.ndim == 2:
        im = Image.fromarray(buf.astype(np.float32), mode="F")
        return np.asarray(im.resize((width, height), Image.BILINEAR), dtype=np.float64)
    return np.stack([_resize(buf[..., c], width, height) for c in range(buf.shape[2])], axis=-1)


def load_dataset(manifest_path, max_width: int = DEFAULT_MAX_WIDTH) -> Dataset:
    """Load views, masks and poses listed in a manifest.

    Images wider than ``max_width`` are downscaled bilinearly with their
    intrinsics scaled by the same factor.
    """
    manifest_path = Path(manifest_path)
    try:
        doc = json.loads(manifest_path.read_text())
    except FileNotFoundError as exc:
        raise MissingFileError(f"missing manifest {manifest_path}") from exc
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError(f"cannot parse manifest {manifest_path}: {exc}") from exc
    root = manifest_path.parent
    if doc.get("pose_convention", "world_to_camera") != "world_to_camera":
        raise ManifestError("only world_to_camera poses are supported")
    train, test = [], []
    for k, rec in enumerate(doc.get("views", [])):
        name = rec.get("name", f"view_{k:03d}")
        cam = parse_camera(rec.get("camera", {}), name)
        image_path = root / rec["image_path"]
        if not image_path.exists():
            raise MissingFileError(f"view {name!r}: missing image {image_path}")
        image = read_image(image_path, srgb=True)
        if image.ndim == 2:
            image = np.repeat(image[..., None], 3, axis=2)
        if image.shape[:2] != (cam.height, cam.width):
            raise SizeMismatchError(f"view {name!r}: image is {image.shape[1]}x{image.shape[0]}, "
                                    f"camera says {cam.width}x{cam.height}")
        if rec.get("mask_path"):
            mask_path = root / rec["mask_path"]
            if not mask_path.exists():
                raise MissingFileError(f"view {name!r}: missing mask {mask_path}")
            with Image.open(mask_path) as im:
                mask = np.asarray(im.convert("L")) > 127
            if mask.shape != image.shape[:2]:
                raise SizeMismatchError(f"view {name!r}: mask is {mask.shape[1]}x{mask.shape[0]}, "
                                        f"image is {image.shape[1]}x{image.shape[0]}")
        else:
            mask = np.zeros(image.shape[:2], dtype=bool)
        intr = cam.intrinsics
        if intr.width > max_width:
            factor = max_width / intr.width
            new_h = max(1, int(round(intr.height * factor)))
            image = np.clip(_resize(image, max_width, new_h), 0.0, 1.0)
            mask = _resize(mask.astype(np.float64), max_width, new_h) > 0.5
            intr = intr.scaled(factor, max_width, new_h)
        view = MirrorDatasetView(image, mask, intr, cam.extrinsics, name)
        (test if rec.get("split", "train") == "test" else train).append(view)
    if not train:
        raise ManifestError(f"{manifest_path}: no train views")
    points = colors = None
    if doc.get("points"):
        points, colors = read_points_ply(root / doc["points"])
        colors = srgb_to_linear(colors)
    gt = None
    if doc.get("ground_truth") and (root / doc["ground_truth"]).exists():
        gt = json.loads((root / doc["ground_truth"]).read_text())
    return Dataset(train, test, float(doc.get("scene_scale", 1.0)), points, colors, gt, root)


# --- synthetic mirror room --------------------------------------------------

@dataclass
class SyntheticSceneSpec:
    """A closed textured box with one rectangular mirror on a wall.

    The room spans [-half_extent, half_extent]^3 with z up. The mirror sits
    on the wall x = +half_extent, facing into the room.
    """

    half_extent: float = 1.0
    texture_seed: int = 0
    gaussians_per_wall: int = 14  # grid side, so side^2 Gaussians per wall
    mirror_center: tuple = (1.0, 0.0, 0.05)
    mirror_axes: tuple = ((0.0, 1.0, 0.0), (0.0, 0.0, 1.0))
    mirror_half_sizes: tuple = (0.55, 0.45)
    spheres: tuple = ((0.15, -0.35, -0.55, 0.22), (-0.15, 0.45, -0.45, 0.2), (0.45, 0.4, 0.25, 0.14))
    sphere_gaussians: int = 90
    camera_box: tuple = ((-0.75, -0.6, -0.35), (0.1, 0.6, 0.5))
    mirror_view_fraction: float = 0.75
    width: int = 64
    height: int = 64
    focal: float = 48.0
    n_train: int = 40
    n_test: int = 10
    clip_margin: float = 0.05
    sh_degree: int = 1

    def plane(self) -> Plane:
        # normal faces into the room: n^T x = -h on the wall x = +h
        return Plane(np.array([-1.0, 0.0, 0.0]), -self.half_extent)

    def validate(self) -> None:
        h = self.half_extent
        c = np.asarray(self.mirror_center, dtype=np.float64)
        hs = np.asarray(self.mirror_half_sizes, dtype=np.float64)
        if h <= 0 or np.any(hs <= 0):
            raise ValueError("room and mirror sizes must be positive")
        if abs(c[0] - h) > 1e-9:
            raise ValueError("mirror center must lie on the wall x = +half_extent")
        axes = np.asarray(self.mirror_axes, dtype=np.float64)
        if not np.allclose(axes @ axes.T, np.eye(2)) or abs(axes[:, 0]).max() > 1e-9:
            raise ValueError("mirror axes must be orthonormal and lie in the wall")
        corners = [c + s1 * hs[0] * axes[0] + s2 * hs[1] * axes[1] for s1 in (-1, 1) for s2 in (-1, 1)]
        if np.max(np.abs(np.array(corners)[:, 1:])) >= h:
            raise ValueError("mirror rectangle must lie strictly inside its wall")
        lo, hi = (np.asarray(b, dtype=np.float64) for b in self.camera_box)
        if np.any(lo >= hi) or np.any(np.abs(lo) >= h) or np.any(np.abs(hi) >= h):
            raise ValueError("camera box must lie inside the room")
        if self.n_train < 1 or self.width < 8 or self.height < 8:
            raise ValueError("need at least one train view and 8x8 images")


def _smooth_field(rng: np.random.Generator, u: np.ndarray, v: np.ndarray, waves: int = 5) -> np.ndarray:
    out = np.zeros((3,) + u.shape)
    for c in range(3):
        for _ in range(waves):
            k = rng.uniform(1.0, 6.0)
            th = rng.uniform(0, 2 * np.pi)
            ph = rng.uniform(0, 2 * np.pi)
            out[c] += rng.uniform(0.3, 1.0) * np.sin(k * (np.cos(th) * u + np.sin(th) * v) + ph)
    return out / waves


def _flat_quat(normal: np.ndarray) -> np.ndarray:
    """Quaternion whose rotation maps the local z axis to ``normal``."""
    n = normal / np.linalg.norm(normal)
    helper = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    x = np.cross(helper, n)
    x /= np.linalg.norm(x)
    y = np.cross(n, x)
    return rotmat_to_quat(np.stack([x, y, n], axis=1))


def _in_mirror(spec: SyntheticSceneSpec, p: np.ndarray, pad: float = 0.0) -> np.ndarray:
    c = np.asarray(spec.mirror_center, dtype=np.float64)
    axes = np.asarray(spec.mirror_axes, dtype=np.float64)
    d = (p - c) @ axes.T
    hs = np.asarray(spec.mirror_half_sizes) + pad
    return (np.abs(d[..., 0]) <= hs[0]) & (np.abs(d[..., 1]) <= hs[1])


def build_room(spec: SyntheticSceneSpec, seed: int = 0) -> tuple[GaussianScene, np.ndarray]:
    """Ground-truth Gaussians and a per-Gaussian flag marking the mirror surface."""
    rng = np.random.default_rng([spec.texture_seed, seed])
    h = spec.half_extent
    n = spec.gaussians_per_wall
    spacing = 2 * h / n
    grid = (np.arange(n) + 0.5) * spacing - h
    gu, gv = np.meshgrid(grid, grid, indexing="ij")
    means, scales, quats, colors, mirror_flag = [], [], [], [], []
    k = max(spec.sh_degree, 0)
    for axis in range(3):
        for side in (-1.0, 1.0):
            inward = np.zeros(3)
            inward[axis] = -side
            others = [a for a in range(3) if a != axis]
            p = np.zeros((n * n, 3))
            p[:, axis] = side * h
            p[:, others[0]] = gu.ravel()
            p[:, others[1]] = gv.ravel()
            base = rng.uniform(0.2, 0.7, 3)
            tex = _smooth_field(rng, gu.ravel(), gv.ravel())
            col = np.clip(base[:, None] + 0.35 * tex, 0.03, 0.97).T
            flag = np.zeros(n * n, dtype=bool)
            if axis == 0 and side > 0:
                flag = _in_mirror(spec, p)
                col[flag] = 0.2
            means.append(p)
            scales.append(np.tile([0.6 * spacing, 0.6 * spacing, 0.01], (n * n, 1)))
            quats.append(np.tile(_flat_quat(inward), (n * n, 1)))
            colors.append(col)
            mirror_flag.append(flag)
    golden = np.pi * (3.0 - np.sqrt(5.0))
    m = spec.sphere_gaussians
    for j, (cx, cy, cz, r) in enumerate(spec.spheres):
        i = np.arange(m) + 0.5
        zz = 1 - 2 * i / m
        rr = np.sqrt(1 - zz**2)
        dirs = np.stack([rr * np.cos(golden * i), rr * np.sin(golden * i), zz], axis=1)
        p = np.array([cx, cy, cz]) + r * dirs
        hue = rng.uniform(0.15, 0.9, 3)
        tex = _smooth_field(rng, 3 * dirs[:, 0], 3 * dirs[:, 1] + 2 * dirs[:, 2], waves=3)
        col = np.clip(hue[:, None] + 0.25 * tex, 0.03, 0.97).T
        step = r * np.sqrt(4 * np.pi / m)
        means.append(p)
        scales.append(np.tile([0.7 * step, 0.7 * step, 0.01], (m, 1)))
        quats.append(np.stack([_flat_quat(d) for d in dirs]))
        colors.append(col)
        mirror_flag.append(np.zeros(m, dtype=bool))
    means = np.concatenate(means)
    colors = np.concatenate(colors)
    count = len(means)
    sh = np.zeros((count, (k + 1) ** 2, 3))
    sh[:, 0, :] = (colors - 0.5) / SH_C0
    if k >= 1:
        sh[:, 1:, :] = rng.normal(0.0, 0.03, (count, 3, 3))
    scene = GaussianScene(means, np.log(np.concatenate(scales)), np.concatenate(quats),
                          np.full(count, float(logit(0.97))), sh, k)
    return to_float32(scene), np.concatenate(mirror_flag)


def sample_cameras(spec: SyntheticSceneSpec, rng: np.random.Generator, count: int) -> list[Camera]:
    lo, hi = (np.asarray(b, dtype=np.float64) for b in spec.camera_box)
    intr = CameraIntrinsics(spec.focal, spec.focal, (spec.width - 1) / 2, (spec.height - 1) / 2,
                            spec.width, spec.height)
    n_mirror = int(round(spec.mirror_view_fraction * count))
    facing = np.zeros(count, dtype=bool)
    facing[rng.permutation(count)[:n_mirror]] = True
    c = np.asarray(spec.mirror_center, dtype=np.float64)
    axes = np.asarray(spec.mirror_axes, dtype=np.float64)
    hs = np.asarray(spec.mirror_half_sizes)
    h = spec.half_extent
    cams = []
    for k in range(count):
        eye = rng.uniform(lo, hi)
        if facing[k]:
            target = c + rng.uniform(-0.5, 0.5) * hs[0] * axes[0] + rng.uniform(-0.5, 0.5) * hs[1] * axes[1]
        else:
            wall = rng.integers(0, 3)
            target = rng.uniform(-0.6 * h, 0.6 * h, 3)
            target[[0, 1, 1][wall]] = [-h, -h, h][wall]
        cams.append(Camera(intr, CameraExtrinsics.look_at(eye, target, up=(0.0, 0.0, 1.0))))
    return cams


def pixel_rays(camera: Camera) -> tuple[np.ndarray, np.ndarray]:
    """World-space origin and (unnormalized) ray directions through pixel centres."""
    intr, extr = camera.intrinsics, camera.extrinsics
    v, u = np.mgrid[0:intr.height, 0:intr.width].astype(np.float64)
    d_cam = np.stack([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, np.ones_like(u)], axis=-1)
    return extr.center, d_cam @ extr.rotation


def mirror_mask(spec: SyntheticSceneSpec, camera: Camera, occluders: GaussianScene | None = None) -> np.ndarray:
    """Pixels whose ray meets the mirror rectangle before any sphere.

    With ``occluders`` (the sphere Gaussians) a pixel also counts as blocked
    where their rendered coverage reaches 0.5, since splats extend past the
    analytic silhouettes.
    """
    origin, dirs = pixel_rays(camera)
    plane = spec.plane()
    denom = dirs @ plane.normal
    with np.errstate(divide="ignore", invalid="ignore"):
        t_m = (plane.offset - origin @ plane.normal) / denom
    hit = (denom < 0) & (t_m > 0)
    hit &= _in_mirror(spec, origin + np.where(hit, t_m, 0.0)[..., None] * dirs)
    for cx, cy, cz, r in spec.spheres:
        oc = origin - np.array([cx, cy, cz])
        a = np.sum(dirs * dirs, axis=-1)
        b = dirs @ oc
        disc = b * b - a * (oc @ oc - r * r)
        with np.errstate(invalid="ignore"):
            t_s = (-b - np.sqrt(np.maximum(disc, 0.0))) / a
        hit &= ~((disc > 0) & (t_s > 0) & (t_s < t_m))
    if occluders is not None and len(occluders):
        hit &= render(occluders, camera).alpha < 0.5
    return hit


def render_ground_truth(scene: GaussianScene, camera: Camera, plane: Plane, mask: np.ndarray,
                        clip_margin: float = 0.05) -> np.ndarray:
    """fuse(render(S, cam), render(S, virtual cam), mask) in linear color."""
    real = render(scene, camera).color
    if not mask.any():
        return real
    virt = render(scene, camera.with_extrinsics(reflect_extrinsics(camera.extrinsics, plane)),
                  clip_plane=plane, clip_margin=clip_margin).color
    return fuse_images(real, virt, mask)


def render_mirror_world(scene: GaussianScene, mirror_flag: np.ndarray, camera: Camera, plane: Plane,
                        clip_margin: float = 0.05) -> np.ndarray:
    """Model-mismatch ground truth: one render of the room plus its mirrored copy.

    The mirror surface is removed and the reflected room is placed behind
    it, so occlusion and edge blending come from compositing rather than a
    hard mask switch.
    """
    room = scene.subset(~mirror_flag)
    behind = reflect_scene(room, plane)
    keep = plane.signed_distance(behind.means) < -clip_margin
    both = GaussianScene(*(np.concatenate([getattr(room, n), getattr(behind, n)[keep]])
                           for n in ("means", "log_scales", "quats", "opacity_logits", "sh")),
                         sh_degree=scene.sh_degree)
    return render(both, camera).color


@dataclass
class SyntheticResult:
    scene: GaussianScene
    plane: Plane
    manifest_path: Path
    mask_pixels: dict[str, int] = field(default_factory=dict)
    min_pixels: int = 0

    @property
    def qualifying_views(self) -> list[str]:
        return [k for k, v in self.mask_pixels.items() if v >= self.min_pixels]


def generate_synthetic(spec: SyntheticSceneSpec, out_dir, seed: int = 0,
                       variant: str = "fused") -> SyntheticResult:
    """Write a synthetic mirror-room dataset and its ground truth to ``out_dir``.

    ``variant="fused"`` renders each image as the hard mask fusion of the
    real and virtual camera renders with the true plane. ``"mirror_world"``
    instead renders the room together with its reflected copy in one pass.
    """
    spec.validate()
    if variant not in ("fused", "mirror_world"):
        raise ValueError(f"unknown variant {variant!r}")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    scene, mirror_flag = build_room(spec, seed)
    spheres = scene.subset(np.arange(len(scene)) >= len(scene) - len(spec.spheres) * spec.sphere_gaussians)
    plane = spec.plane()
    rng = np.random.default_rng([seed, 1])
    cams = sample_cameras(spec, rng, spec.n_train + spec.n_test)
    records, mask_pixels = [], {}
    for k, cam in enumerate(cams):
        split = "train" if k < spec.n_train else "test"
        name = f"{split}_{k if split == 'train' else k - spec.n_train:03d}"
        mask = mirror_mask(spec, cam, spheres)
        if variant == "fused":
            img = render_ground_truth(scene, cam, plane, mask, spec.clip_margin)
        else:
            img = render_mirror_world(scene, mirror_flag, cam, plane, spec.clip_margin)
        write_image(img, out / "images" / f"{name}.png", srgb=True)
        write_image(mask.astype(np.float64), out / "masks" / f"{name}.png")
        mask_pixels[name] = int(mask.sum())
        records.append({"name": name, "split": split, "image_path": f"images/{name}.png",
                        "mask_path": f"masks/{name}.png", "camera": camera_record(cam)})
    # stand-in for a structure-from-motion cloud: noisy samples of the surfaces
    pick = rng.random(len(scene)) < 0.5
    pts = scene.means[pick] + rng.normal(0.0, 0.01, (int(pick.sum()), 3))
    cols = np.clip(0.5 + SH_C0 * scene.sh[pick, 0, :], 0.0, 1.0)
    write_points_ply(out / "points.ply", pts, linear_to_srgb(cols))
    save_scene(scene, out / "scene_gt.ckpt", plane)
    gt = {"normal": [float(v) for v in plane.normal], "offset": float(plane.offset),
          "scene_checkpoint_path": "scene_gt.ckpt", "clip_margin": spec.clip_margin,
          "variant": variant, "seed": seed}
    (out / "ground_truth.json").write_text(json.dumps(gt, indent=2) + "\n")
    (out / "synthetic_spec.json").write_text(json.dumps(asdict(spec), indent=2) + "\n")
    manifest = {"version": MANIFEST_VERSION, "pose_convention": "world_to_camera",
                "scene_scale": float(np.sqrt(3.0) * spec.half_extent), "points": "points.ply",
                "ground_truth": "ground_truth.json", "views": records}
    manifest_path = out / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n")
    need = min_mirror_pixels(spec.width, spec.height)
    log.info("wrote %d views to %s (%d qualify for plane estimation)", len(cams), out,
             sum(v >= need for v in mask_pixels.values()))
    return SyntheticResult(scene, plane, manifest_path, mask_pixels, need)


def load_spec(path) -> SyntheticSceneSpec:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise MissingFileError(f"missing spec file {path}") from exc
    except json.JSONDecodeError as exc:
        raise ManifestError(f"cannot parse spec {path}: {exc}") from exc
    valid = set(SyntheticSceneSpec.__dataclass_fields__)
    unknown = set(doc) - valid
    if unknown:
        raise ManifestError(f"unknown spec keys {sorted(unknown)}; valid keys: {sorted(valid)}")
    conv = {k: tuple(map(tuple, v)) if isinstance(v, list) and v and isinstance(v[0], list)
            else tuple(v) if isinstance(v, list) else v for k, v in doc.items()}
    return SyntheticSceneSpec(**conv)
