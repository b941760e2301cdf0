"""Training losses with analytic gradients, plus PSNR/SSIM metrics.

Every loss returns ``(value, grad)`` where ``grad`` has the shape of the
differentiated input. Pixel losses are mean-normalized so weights do not
depend on resolution.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

log = logging.getLogger(__name__)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
PSNR_CAP = 100.0
MIN_MSE = 1e-10


def _check_same(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")


def _gauss_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - size // 2
    w = np.exp(-(x**2) / (2 * sigma**2))
    return w / w.sum()


def _blur(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    # zero-padded "same" filtering over the two image axes; the kernel is
    # symmetric so this operator is its own adjoint
    y = correlate1d(x, w, axis=0, mode="constant")
    return correlate1d(y, w, axis=1, mode="constant")


def ssim_map(pred: np.ndarray, gt: np.ndarray, want_grad: bool = False):
    """Per-pixel (per-channel) SSIM and optionally the pieces for its gradient."""
    _check_same(pred, gt)
    x = np.asarray(pred, dtype=np.float64)
    y = np.asarray(gt, dtype=np.float64)
    w = _gauss_window()
    c1 = SSIM_K1**2
    c2 = SSIM_K2**2
    mu1, mu2 = _blur(x, w), _blur(y, w)
    e11, e22, e12 = _blur(x * x, w), _blur(y * y, w), _blur(x * y, w)
    s11 = e11 - mu1 * mu1
    s22 = e22 - mu2 * mu2
    s12 = e12 - mu1 * mu2
    a1 = 2 * mu1 * mu2 + c1
    a2 = 2 * s12 + c2
    b1 = mu1 * mu1 + mu2 * mu2 + c1
    b2 = s11 + s22 + c2
    s = a1 * a2 / (b1 * b2)
    if not want_grad:
        return s
    d_mu1 = (2 * mu2 * a2 - 2 * mu2 * a1) / (b1 * b2) - s * (2 * mu1 / b1 - 2 * mu1 / b2)
    d_e11 = -s / b2
    d_e12 = 2 * a1 / (b1 * b2)
    return s, (w, x, y, d_mu1, d_e11, d_e12)


def _ssim_backward(upstream: np.ndarray, parts) -> np.ndarray:
    w, x, y, d_mu1, d_e11, d_e12 = parts
    return (_blur(upstream * d_mu1, w) + 2 * x * _blur(upstream * d_e11, w)
            + y * _blur(upstream * d_e12, w))


def ssim(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Mean windowed SSIM (11x11 Gaussian, sigma 1.5), optionally over masked pixels."""
    s = ssim_map(pred, gt)
    if mask is None:
        return float(s.mean())
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return float("nan")
    return float(s[mask].mean())


def ssim_with_grad(pred: np.ndarray, gt: np.ndarray) -> tuple[float, np.ndarray]:
    s, parts = ssim_map(pred, gt, want_grad=True)
    up = np.full(s.shape, 1.0 / s.size)
    return float(s.mean()), _ssim_backward(up, parts)


def psnr(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray | None = None) -> float:
    """10 log10(1 / MSE), capped at 100 dB; NaN for an empty mask."""
    _check_same(np.asarray(pred), np.asarray(gt))
    diff = np.asarray(pred, dtype=np.float64) - np.asarray(gt, dtype=np.float64)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            return float("nan")
        diff = diff[mask]
    mse = float(np.mean(diff * diff))
    if mse < MIN_MSE:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def loss_l1(pred: np.ndarray, gt: np.ndarray) -> tuple[float, np.ndarray]:
    _check_same(pred, gt)
    d = pred - gt
    return float(np.abs(d).mean()), np.sign(d) / d.size


def loss_rgb(pred: np.ndarray, gt: np.ndarray, dssim_weight: float = 0.2) -> tuple[float, np.ndarray]:
    """(1 - w) L1 + w (1 - SSIM)."""
    _check_same(pred, gt)
    l1, g1 = loss_l1(pred, gt)
    if dssim_weight == 0.0:
        return (1.0 - dssim_weight) * l1, (1.0 - dssim_weight) * g1
    s, gs = ssim_with_grad(pred, gt)
    value = (1.0 - dssim_weight) * l1 + dssim_weight * (1.0 - s)
    return float(value), (1.0 - dssim_weight) * g1 - dssim_weight * gs


def loss_smooth(depth: np.ndarray, guide: np.ndarray, gamma: float = 0.1,
                normalize: bool = True) -> tuple[float, np.ndarray]:
    """Edge-aware depth smoothness over 4-neighbour pairs.

    Each unordered neighbour pair appears twice (once from each side), with
    weight exp(-gamma * |guide_k - guide_q|_1). With ``normalize`` the sum is
    divided by the pixel count.
    """
    depth = np.asarray(depth, dtype=np.float64)
    guide = np.asarray(guide, dtype=np.float64)
    if guide.ndim == 2:
        guide = guide[..., None]
    if guide.shape[:2] != depth.shape:
        raise ValueError(f"dimension mismatch: {depth.shape} vs {guide.shape[:2]}")
    grad = np.zeros_like(depth)
    total = 0.0
    for axis in (0, 1):
        n = depth.shape[axis]
        if n < 2:
            continue
        lo = [slice(None), slice(None)]
        hi = [slice(None), slice(None)]
        lo[axis] = slice(0, n - 1)
        hi[axis] = slice(1, n)
        lo, hi = tuple(lo), tuple(hi)
        wgt = np.exp(-gamma * np.abs(guide[lo] - guide[hi]).sum(axis=-1))
        dd = depth[lo] - depth[hi]
        total += 2.0 * float(np.sum(wgt * np.abs(dd)))
        g = 2.0 * wgt * np.sign(dd)
        grad[lo] += g
        grad[hi] -= g
    scale = 1.0 / depth.size if normalize else 1.0
    return total * scale, grad * scale


def pseudo_normal(depth: np.ndarray, intrinsics, alpha: np.ndarray | None = None,
                  alpha_min: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """Camera-frame normals from depth-map tangents.

    Each pixel and its +x and +y neighbours are backprojected; the normal is
    the normalized cross product of the two tangents, signed so that its z
    component is negative (facing the camera). Returns (normals, valid); the
    normals are zero where invalid.
    """
    depth = np.asarray(depth, dtype=np.float64)
    h, w = depth.shape
    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    pts = np.stack([(u - intrinsics.cx) / intrinsics.fx * depth,
                    (v - intrinsics.cy) / intrinsics.fy * depth, depth], axis=-1)
    ok = depth > 0
    if alpha is not None:
        ok &= alpha >= alpha_min
    normals = np.zeros((h, w, 3))
    valid = np.zeros((h, w), dtype=bool)
    if h < 2 or w < 2:
        return normals, valid
    tx = pts[:-1, 1:] - pts[:-1, :-1]
    ty = pts[1:, :-1] - pts[:-1, :-1]
    n = np.cross(tx, ty)
    length = np.linalg.norm(n, axis=-1)
    good = ok[:-1, :-1] & ok[:-1, 1:] & ok[1:, :-1] & (length > 1e-12)
    n = n / np.where(length > 0, length, 1.0)[..., None]
    n = np.where((n[..., 2] > 0)[..., None], -n, n)
    normals[:-1, :-1] = np.where(good[..., None], n, 0.0)
    valid[:-1, :-1] = good
    return normals, valid


def loss_normal(rendered: np.ndarray, pseudo: np.ndarray,
                valid: np.ndarray | None = None) -> tuple[float, np.ndarray]:
    """Mean over valid pixels of the L1 distance between normal vectors.

    ``pseudo`` is treated as a constant target.
    """
    _check_same(rendered, pseudo)
    if valid is None:
        valid = np.ones(rendered.shape[:2], dtype=bool)
    count = int(valid.sum())
    grad = np.zeros_like(rendered, dtype=np.float64)
    if count == 0:
        return 0.0, grad
    d = (rendered - pseudo) * valid[..., None]
    grad[:] = np.sign(d) / count
    return float(np.abs(d).sum() / count), grad


def loss_planar(normals: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean pairwise (1 - cosine) over sampled normals, diagonal included.

    Equal to 1 - |sum of unit normals|^2 / N^2. Zero-length inputs are
    ignored; with fewer than two usable samples the loss is 0.
    """
    normals = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
    grad = np.zeros_like(normals)
    length = np.linalg.norm(normals, axis=1)
    ok = length > 1e-12
    n = int(ok.sum())
    if n < 2:
        log.warning("planar constraint needs at least 2 valid normals, got %d", n)
        return 0.0, grad
    unit = normals[ok] / length[ok, None]
    s = unit.sum(axis=0)
    value = 1.0 - float(s @ s) / n**2
    g_unit = -2.0 * s / n**2
    g = (g_unit - unit * (unit @ g_unit)[:, None]) / length[ok, None]
    grad[ok] = g
    return value, grad


def sample_mask_pixels(mask: np.ndarray, count: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Up to ``count`` distinct masked pixels drawn uniformly, as (rows, cols)."""
    rows, cols = np.nonzero(mask)
    if rows.size > count:
        pick = np.sort(rng.choice(rows.size, count, replace=False))
        rows, cols = rows[pick], cols[pick]
    return rows, cols


def loss_vco(fused: np.ndarray, gt: np.ndarray, mask: np.ndarray,
             dssim_weight: float = 0.2) -> tuple[float, np.ndarray]:
    """Photometric loss of the fused image; gradient kept only inside the mirror.

    Pixels outside the mask come from the real camera and do not depend on
    the virtual pose, so their upstream gradient is zeroed.
    """
    value, grad = loss_rgb(fused, gt, dssim_weight)
    return value, grad * np.asarray(mask, dtype=bool)[..., None]


def mask_fill(gt: np.ndarray, mask: np.ndarray, fill_color=0.5) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if gt.shape[:2] != mask.shape:
        raise ValueError(f"dimension mismatch: {gt.shape} vs {mask.shape}")
    out = np.array(gt, dtype=np.float64, copy=True)
    out[mask] = fill_color
    return out


@dataclass
class LossBreakdown:
    """Scalar loss terms plus upstream gradients for the rendered buffers."""

    rgb: float = 0.0
    smooth: float = 0.0
    normal_consistency: float = 0.0
    planar_constraint: float = 0.0
    total: float = 0.0
    grad_color: np.ndarray | None = None
    grad_depth: np.ndarray | None = None
    grad_normal: np.ndarray | None = None

    @classmethod
    def assemble(cls, rgb: float, normal_consistency: float = 0.0, smooth: float = 0.0,
                 planar_constraint: float = 0.0, lambda_n: float = 0.0, lambda_s: float = 0.0,
                 lambda_pc: float = 0.0, **grads) -> "LossBreakdown":
        total = rgb + lambda_n * normal_consistency + lambda_s * smooth + lambda_pc * planar_constraint
        return cls(rgb, smooth, normal_consistency, planar_constraint, total, **grads)

    def all_finite(self) -> bool:
        vals = [self.rgb, self.smooth, self.normal_consistency, self.planar_constraint, self.total]
        if not np.all(np.isfinite(vals)):
            return False
        return all(g is None or np.all(np.isfinite(g))
                   for g in (self.grad_color, self.grad_depth, self.grad_normal))
