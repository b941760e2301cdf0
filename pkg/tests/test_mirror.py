import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mirrorsplat.gradients import finite_diff_check
from mirrorsplat.mirror import (DegenerateNormals, InsufficientMirrorPixels, RansacConfig, TangentPlane,
                                backproject, estimate_plane, fit_plane, fuse_images, min_mirror_pixels,
                                normals_to_world, ransac_offset, reflect_extrinsics, reflect_point, reflect_scene,
                                surface_depth, virtual_camera)
from mirrorsplat.rasterizer import render
from mirrorsplat.scene import (Camera, CameraExtrinsics, CameraIntrinsics, Gaussian, GaussianScene, Plane,
                               build_covariance)
from support import camera, random_rotation, random_scene, random_unit

coord = st.floats(-5, 5, allow_nan=False)
vec3 = st.tuples(coord, coord, coord)
unit3 = vec3.filter(lambda v: np.linalg.norm(v) > 1e-3).map(lambda v: np.asarray(v) / np.linalg.norm(v))
planes = st.builds(Plane, unit3, st.floats(-3, 3))


def test_reflect_point_examples():
    p = Plane([0, 0, 1], 0)
    assert np.array_equal(reflect_point([1, 2, 3], p), [1, 2, -3])
    assert np.array_equal(reflect_point([4, -1, 0], p), [4, -1, 0])


@settings(max_examples=300, deadline=None)
@given(planes, vec3, vec3)
def test_reflect_point_involution_isometry(plane, x, y):
    x, y = np.asarray(x), np.asarray(y)
    assert np.abs(reflect_point(reflect_point(x, plane), plane) - x).max() < 1e-12
    d0 = np.linalg.norm(x - y)
    d1 = np.linalg.norm(reflect_point(x, plane) - reflect_point(y, plane))
    assert abs(d0 - d1) < 1e-12


@settings(max_examples=300, deadline=None)
@given(planes, vec3)
def test_points_on_plane_fixed(plane, x):
    on = np.asarray(x) - plane.signed_distance(x) * plane.normal
    assert np.abs(reflect_point(on, plane) - on).max() < 1e-12


def test_reflect_extrinsics_about_z0():
    v = reflect_extrinsics(CameraExtrinsics(np.eye(3), [0, 0, -2]), Plane([0, 0, 1], 0))
    assert np.array_equal(v.rotation, np.diag([1.0, 1.0, -1.0]))
    # the real centre (0, 0, 2) is mirrored to (0, 0, -2)
    assert np.allclose(v.center, [0, 0, -2]) and np.allclose(v.translation, [0, 0, -2])
    assert np.linalg.det(v.rotation) == pytest.approx(-1)


def test_reflect_extrinsics_center():
    e = CameraExtrinsics.look_at([1.0, 0, 0], [0, 0, 3.0])
    v = reflect_extrinsics(e, Plane([1, 0, 0], 3))
    assert np.allclose(v.center, [5, 0, 0], atol=1e-12)


@settings(max_examples=300, deadline=None)
@given(planes, vec3, st.integers(0, 2**31))
def test_reflect_extrinsics_involution(plane, t, seed):
    e = CameraExtrinsics(random_rotation(np.random.default_rng(seed)), t)
    back = reflect_extrinsics(reflect_extrinsics(e, plane), plane)
    assert np.abs(back.matrix - e.matrix).max() < 1e-12


@settings(max_examples=100, deadline=None)
@given(planes, vec3, st.integers(0, 2**31))
def test_virtual_camera_sees_mirror_image(plane, x, seed):
    # camera coordinates of x through the virtual camera equal those of its mirror image
    e = CameraExtrinsics(random_rotation(np.random.default_rng(seed)), [0.1, -0.3, 2.0])
    v = reflect_extrinsics(e, plane)
    x = np.asarray(x)
    xr = reflect_point(x, plane)
    assert np.allclose(v.rotation @ x + v.translation, e.rotation @ xr + e.translation, atol=1e-9)


def test_reflect_scene_axis_aligned():
    g = Gaussian.create([0, 0, 3], [0.1, 0.2, 0.3])
    s = reflect_scene(GaussianScene.from_gaussians([g]), Plane([0, 0, 1], 0))
    assert np.allclose(s.means[0], [0, 0, -3])
    assert np.allclose(build_covariance(s.scales[0], s.quats[0]), np.diag([0.01, 0.04, 0.09]), atol=1e-15)


def test_reflect_scene_involution(rng):
    s = random_scene(rng, 30)
    p = Plane(random_unit(rng), 0.4)
    back = reflect_scene(reflect_scene(s, p), p)
    for k in ("means", "log_scales", "quats", "opacity_logits", "sh"):
        assert np.abs(getattr(back, k) - getattr(s, k)).max() < 1e-12


def test_reflect_scene_covariance_transform(rng):
    s = random_scene(rng, 10)
    p = Plane(random_unit(rng), -0.2)
    r = reflect_scene(s, p)
    H = np.eye(3) - 2 * np.outer(p.normal, p.normal)
    assert np.allclose(r.covariances(), H @ s.covariances() @ H, atol=1e-12)
    assert np.allclose(np.linalg.det(r.rotations), 1.0)


@pytest.mark.parametrize("seed", range(5))
def test_virtual_camera_equivalence(seed):
    rng = np.random.default_rng(seed)
    s = random_scene(rng, 60, lo=(-1, -1, -1), hi=(1, 1, 1))
    p = Plane(random_unit(rng), rng.uniform(-2, 2))
    eye = random_unit(rng) * 4
    cam = camera(40, 40, 35.0, extr=CameraExtrinsics.look_at(eye, reflect_point([0, 0, 0], p), up=random_unit(rng)))
    a = render(s, virtual_camera(cam, p)).color
    b = render(reflect_scene(s, p), cam).color
    assert np.abs(a - b).max() < 1e-4


def test_fuse_images(rng):
    real, virt = rng.uniform(size=(6, 5, 3)), rng.uniform(size=(6, 5, 3))
    assert np.array_equal(fuse_images(real, virt, np.zeros((6, 5), bool)), real)
    assert np.array_equal(fuse_images(real, virt, np.ones((6, 5), bool)), virt)
    cb = np.indices((6, 5)).sum(0) % 2 == 1
    f = fuse_images(real, virt, cb)
    for y in range(6):
        for x in range(5):
            assert np.array_equal(f[y, x], virt[y, x] if cb[y, x] else real[y, x])
    with pytest.raises(ValueError):
        fuse_images(real, virt[:5], cb)


def test_backproject_examples():
    intr = CameraIntrinsics(1.0, 1.0, 0.0, 0.0, 2, 2)
    depth = np.array([[2.0, 0.0], [0.0, 0.0]])
    mask = np.ones((2, 2), bool)
    assert np.allclose(backproject(depth, mask, Camera(intr, CameraExtrinsics.identity())), [[0, 0, 2]])
    moved = Camera(intr, CameraExtrinsics(np.eye(3), [0, 0, -5]))
    assert np.allclose(backproject(depth, mask, moved), [[0, 0, 7]])
    assert backproject(depth, np.zeros((2, 2), bool), moved).shape == (0, 3)


def _wall_scene(plane: Plane, extent=3.0, spacing=0.08):
    """Dense, nearly opaque splats tiling a patch of ``plane``."""
    B = np.linalg.svd(plane.normal[None])[2][1:]
    u = np.arange(-extent, extent + 1e-9, spacing)
    uu, vv = np.meshgrid(u, u)
    pts = plane.offset * plane.normal + uu.ravel()[:, None] * B[0] + vv.ravel()[:, None] * B[1]
    R = np.stack([B[0], B[1], plane.normal], axis=1)
    if np.linalg.det(R) < 0:
        R[:, 0] = -R[:, 0]
    from mirrorsplat.scene import rotmat_to_quat
    q = np.tile(rotmat_to_quat(R), (len(pts), 1))
    n = len(pts)
    return GaussianScene(pts, np.log(np.tile([spacing, spacing, 1e-3], (n, 1))), q, np.full(n, 3.0),
                         np.zeros((n, 1, 3)), 0)


def test_backproject_render_round_trip():
    plane = Plane([0, 0, -1.0], -3.0)
    s = _wall_scene(plane)
    cam = camera(40, 40, 40.0)
    out = render(s, cam)
    mask = out.alpha > 0.5
    pts = backproject(out.depth, mask, cam)
    assert len(pts) > 1000
    assert np.abs(plane.signed_distance(pts)).max() < 0.02
    pts = backproject(surface_depth(out.depth, out.alpha), mask, cam)
    assert np.abs(plane.signed_distance(pts)).max() < 0.02


def test_estimate_plane_from_render():
    # on tilted walls the screen-space low-pass biases depth toward the camera by about half a pixel footprint
    plane = Plane.from_normal([0.2, -0.1, -1.0], -3.0)
    s = _wall_scene(plane, spacing=0.04)
    cam = camera(80, 80, 80.0)
    out = render(s, cam)
    est = estimate_plane(surface_depth(out.depth, out.alpha), normals_to_world(out.normal, cam.extrinsics),
                         out.alpha > 0.5, cam, source_view="v0")
    assert est.plane.angle_to(plane) < 0.5 and abs(est.plane.offset - plane.offset) < 0.02
    assert est.source_view == "v0" and est.inlier_count <= est.points_used


def _plane_points(rng, n=10_000, noise=0.0):
    B = np.array([[1.0, 0, 0], [0, 1, 0]])
    pts = rng.uniform(-2, 2, (n, 2)) @ B + [0, 0, 1]
    pts[:, 2] += rng.normal(0, noise, n) if noise else 0
    return pts


def test_fit_plane_exact():
    rng = np.random.default_rng(0)
    pts = _plane_points(rng, 2000)
    plane, count = fit_plane(pts, np.tile([0, 0, 1.0], (2000, 1)), facing=[0, 0, 5])
    assert np.allclose(plane.normal, [0, 0, 1], atol=1e-12) and abs(plane.offset - 1) < 1e-9
    assert count == 2000


def test_fit_plane_normal_sign_faces_camera():
    rng = np.random.default_rng(0)
    pts = _plane_points(rng, 1000)
    plane, _ = fit_plane(pts, np.tile([0, 0, 1.0], (1000, 1)), facing=[0, 0, -5])
    assert np.allclose(plane.normal, [0, 0, -1]) and abs(plane.offset + 1) < 1e-9
    assert plane.signed_distance([0, 0, -5]) > 0


def test_fit_plane_outliers():
    rng = np.random.default_rng(1)
    pts = _plane_points(rng, 10_000, noise=0.01)
    out = rng.random(10_000) < 0.3
    pts[out, 2] += 1.0
    plane, count = fit_plane(pts, np.tile([0, 0, 1.0], (10_000, 1)))
    oracle = pts[~out, 2].mean()  # least squares offset on the clean subset
    assert abs(plane.offset - oracle) < 0.01 and abs(plane.offset - 1) < 0.01
    assert abs(count / 10_000 - 0.7) < 0.02


def test_fit_plane_noisy_normals():
    rng = np.random.default_rng(2)
    n = 10_000
    tilt = np.radians(rng.uniform(-2, 2, (n, 2)))
    normals = np.column_stack([np.sin(tilt[:, 0]), np.sin(tilt[:, 1]), np.ones(n)])
    plane, _ = fit_plane(_plane_points(rng, n), normals * rng.uniform(0.2, 3, (n, 1)))
    assert plane.angle_to(Plane([0, 0, 1], 1)) < 0.5


def test_degenerate_normals():
    with pytest.raises(DegenerateNormals):
        fit_plane(np.zeros((2, 3)), np.array([[0, 0, 1.0], [0, 0, -1.0]]))


def test_ransac_deterministic_and_monotone():
    rng = np.random.default_rng(3)
    pts = _plane_points(rng, 5000, noise=0.05)
    n = np.array([0, 0, 1.0])
    a = ransac_offset(n, pts, 200, 0.1, np.random.default_rng(9))
    b = ransac_offset(n, pts, 200, 0.1, np.random.default_rng(9))
    assert a == b
    counts = [ransac_offset(n, pts, 1000, t, np.random.default_rng(9))[1] for t in (0.01, 0.03, 0.1, 0.3, 1.0)]
    assert counts == sorted(counts)


def test_insufficient_pixels():
    cam = camera(64, 64, 50.0)
    mask = np.zeros((64, 64), bool)
    mask[:10, :10] = True
    with pytest.raises(InsufficientMirrorPixels, match="insufficient mirror pixels"):
        estimate_plane(np.ones((64, 64)), np.tile([0, 0, 1.0], (64, 64, 1)), mask, cam)


def test_min_pixel_rule():
    assert min_mirror_pixels(64, 64) == 500
    assert min_mirror_pixels(1200, 540) == 30000
    assert min_mirror_pixels(1600, 1000) == int(np.ceil(30000 / 648000 * 1.6e6))


def test_tangent_plane_gradient(rng):
    tp = TangentPlane(random_unit(rng), rng.normal(0, 0.1, 2), 0.3)
    gn, go = rng.normal(size=3), 0.7

    def f(x):
        t = TangentPlane(tp.n_ref, x[:2], x[2])
        return float(t.plane.normal @ gn + t.plane.offset * go)

    rep = finite_diff_check(f, tp.vector, tp.grad_from_euclidean(gn, go), h=1e-6)
    assert rep.passed, str(rep)
    assert np.allclose(TangentPlane.from_plane(Plane([0, 1.0, 0], 2)).plane.normal, [0, 1, 0])
