"""Pinhole camera, ray generation, bilinear feature sampling."""

import numpy as np
import pytest

from occlumesh.camera import (BehindCameraError, Camera, FeatureMap,
                              GeometryError, Ray, bilinear_sample,
                              lookat_cam_to_world, mask_bbox, pixel_to_ray,
                              project_point, project_point_t,
                              sample_training_rays)
from occlumesh.tensorcore.autodiff import Tape, Tensor, backward, no_grad


def make_cam(res=64, fov_deg=40.0, eye=(0.0, 0.0, -3.0), target=(0.0, 0.0, 0.0)):
    f = 0.5 * res / np.tan(np.radians(fov_deg) / 2)
    K = np.array([[f, 0, res / 2], [0, f, res / 2], [0, 0, 1.0]])
    return Camera(K, lookat_cam_to_world(np.array(eye), np.array(target)),
                  res, res)


def test_camera_validation():
    with pytest.raises(GeometryError):
        Camera(np.eye(3) * -1.0, np.eye(4), 8, 8)
    bad = np.eye(4)
    bad[0, 1] = 0.5  # shear is not rigid
    with pytest.raises(GeometryError):
        Camera(np.diag([10.0, 10.0, 1.0]), bad, 8, 8)


def test_ray_validation():
    with pytest.raises(GeometryError):
        Ray(np.zeros(3), np.array([0.0, 0.0, 2.0]), 0.1, 1.0)
    with pytest.raises(GeometryError):
        Ray(np.zeros(3), np.array([0.0, 0.0, 1.0]), 1.0, 0.5)


def test_project_unproject_roundtrip(rng):
    cam = make_cam()
    # points in front of the camera
    p = rng.normal(size=(50, 3)) * 0.4
    u, v, z = project_point(cam, p)
    origins, dirs = pixel_to_ray(cam, u, v, 0.1, 10.0)
    # walk the ray back to cam-space depth z: scale by z / (dir . forward)
    fwd = cam.cam_to_world[:3, 2]
    tlen = z / (dirs @ fwd)
    recon = origins + tlen[:, None] * dirs
    np.testing.assert_allclose(recon, p, atol=1e-9)


def test_projection_behind_camera_raises():
    cam = make_cam()
    with pytest.raises(BehindCameraError):
        project_point(cam, np.array([[0.0, 0.0, -10.0]]))


def test_differentiable_projection_matches_numpy(rng):
    cam = make_cam()
    p = rng.normal(size=(20, 3)) * 0.4
    u0, v0, z0 = project_point(cam, p)
    with no_grad():
        u, v, z = project_point_t(cam, Tensor(p))
    np.testing.assert_allclose(u.data, u0, rtol=1e-12)
    np.testing.assert_allclose(v.data, v0, rtol=1e-12)
    np.testing.assert_allclose(z.data, z0, rtol=1e-12)


def test_projection_gradient_matches_fd(rng):
    cam = make_cam()
    p0 = rng.normal(size=(4, 3)) * 0.4
    p = Tensor(p0.copy(), requires_grad=True, name="p")
    with Tape() as tape:
        u, v, _ = project_point_t(cam, p)
        y = (u * u + v).sum()
    backward(tape, params={"p": p})

    eps = 1e-6
    want = np.zeros_like(p0)
    for i in range(p0.size):
        d = np.zeros(p0.size)
        d[i] = eps
        def val(q):
            uu, vv, _ = project_point_t(cam, Tensor(q))
            return float((uu.data ** 2 + vv.data).sum())
        with no_grad():
            want.reshape(-1)[i] = (val(p0 + d.reshape(p0.shape))
                                   - val(p0 - d.reshape(p0.shape))) / (2 * eps)
    np.testing.assert_allclose(p.grad, want, rtol=1e-5, atol=1e-7)


def test_bilinear_sample_matches_scipy(rng):
    from scipy.ndimage import map_coordinates

    arr = rng.normal(size=(3, 9, 11))
    fmap = FeatureMap(arr, ratio=1.0)
    u = rng.uniform(0, 10, size=40)
    v = rng.uniform(0, 8, size=40)
    got = bilinear_sample(fmap, u, v)
    for c in range(3):
        want = map_coordinates(arr[c], [v, u], order=1, mode="nearest")
        np.testing.assert_allclose(got[:, c], want, rtol=1e-12)


def test_bilinear_sample_border_clamp(rng):
    arr = np.arange(12.0).reshape(1, 3, 4)
    fmap = FeatureMap(arr)
    out = bilinear_sample(fmap, np.array([-5.0, 10.0]), np.array([-2.0, 7.0]))
    np.testing.assert_allclose(out[:, 0], [arr[0, 0, 0], arr[0, 2, 3]])


def test_bilinear_sample_map_gradient(rng):
    arr = rng.normal(size=(2, 5, 5))
    t = Tensor(arr.copy(), requires_grad=True, name="f")
    u = rng.uniform(0.5, 3.5, size=6)
    v = rng.uniform(0.5, 3.5, size=6)
    with Tape() as tape:
        y = bilinear_sample(FeatureMap(t), u, v).sum()
    backward(tape, params={"f": t})

    eps = 1e-6
    want = np.zeros_like(arr)
    flat = arr.reshape(-1)
    wf = want.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        hi = bilinear_sample(FeatureMap(arr), u, v).sum()
        flat[i] = old - eps
        lo = bilinear_sample(FeatureMap(arr), u, v).sum()
        flat[i] = old
        wf[i] = (hi - lo) / (2 * eps)
    np.testing.assert_allclose(t.grad, want, rtol=1e-6, atol=1e-9)


def test_bilinear_sample_coordinate_gradient(rng):
    arr = rng.normal(size=(2, 6, 6))
    u0 = rng.uniform(1.2, 4.2, size=5)
    v0 = rng.uniform(1.2, 4.2, size=5)
    u = Tensor(u0.copy(), requires_grad=True, name="u")
    with Tape() as tape:
        y = bilinear_sample(FeatureMap(arr), u, v0).sum()
    backward(tape, params={"u": u})
    eps = 1e-6
    want = np.array([
        (bilinear_sample(FeatureMap(arr), u0 + eps * e, v0).sum()
         - bilinear_sample(FeatureMap(arr), u0 - eps * e, v0).sum()) / (2 * eps)
        for e in np.eye(5)])
    np.testing.assert_allclose(u.grad, want, rtol=1e-5, atol=1e-8)


def test_mask_bbox():
    mask = np.zeros((8, 8))
    mask[2:5, 3:7] = 1
    assert mask_bbox(mask) == (3, 2, 6, 4)
    with pytest.raises(GeometryError):
        mask_bbox(np.zeros((4, 4)))


def test_sample_training_rays_properties(rng):
    cam = make_cam(res=32)
    mask = np.zeros((32, 32))
    mask[8:20, 10:25] = 1.0
    img = rng.random((32, 32, 3))
    pix, o, d, c, mv = sample_training_rays(mask, cam, 200, rng, 0.5, 5.0,
                                            image=img, mask_values=mask)
    assert pix.shape == (200, 2)
    assert np.all((pix >= 0) & (pix < 32))
    # first half drawn strictly inside the mask
    assert np.all(mask[pix[:100, 1], pix[:100, 0]] > 0)
    np.testing.assert_allclose(np.linalg.norm(d, axis=-1), 1.0, atol=1e-12)
    np.testing.assert_array_equal(c, img[pix[:, 1], pix[:, 0]])
    np.testing.assert_array_equal(mv, mask[pix[:, 1], pix[:, 0]])
    # deterministic under the same rng state
    pix2, *_ = sample_training_rays(mask, cam, 200,
                                    np.random.default_rng(0), 0.5, 5.0)
    pix3, *_ = sample_training_rays(mask, cam, 200,
                                    np.random.default_rng(0), 0.5, 5.0)
    np.testing.assert_array_equal(pix2, pix3)


def test_lookat_is_rigid_and_faces_target(rng):
    for _ in range(20):
        eye = rng.normal(size=3) * 2
        target = rng.normal(size=3) * 0.3
        M = lookat_cam_to_world(eye, target)
        R = M[:3, :3]
        np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-12)
        fwd = R[:, 2]
        to_target = target - eye
        assert fwd @ (to_target / np.linalg.norm(to_target)) > 0.999
