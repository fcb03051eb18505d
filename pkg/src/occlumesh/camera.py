"""Cameras, rays, projection, and pixel-aligned feature fetching.

Conventions (used consistently by the rasterizer and the renderer):
u grows rightward, v downward, +z forward in the camera frame. Pixel
(u, v) = (j, i) addresses the center of texel at column j, row i.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensorcore import Tensor, custom_op
from .tensorcore import ops


class GeometryError(ValueError):
    pass


class BehindCameraError(GeometryError):
    pass


@dataclass(frozen=True)
class Camera:
    intrinsics: np.ndarray  # 3x3, zero skew
    cam_to_world: np.ndarray  # 4x4 rigid
    width: int
    height: int

    def __post_init__(self):
        K = np.asarray(self.intrinsics, dtype=np.float64)
        M = np.asarray(self.cam_to_world, dtype=np.float64)
        object.__setattr__(self, "intrinsics", K)
        object.__setattr__(self, "cam_to_world", M)
        if K.shape != (3, 3) or M.shape != (4, 4):
            raise GeometryError("intrinsics must be 3x3 and cam_to_world 4x4")
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise GeometryError("focal lengths must be positive")
        R = M[:3, :3]
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-9:
            raise GeometryError("cam_to_world rotation block is not orthonormal")

    @property
    def fx(self):
        return self.intrinsics[0, 0]

    @property
    def fy(self):
        return self.intrinsics[1, 1]

    @property
    def cx(self):
        return self.intrinsics[0, 2]

    @property
    def cy(self):
        return self.intrinsics[1, 2]

    @property
    def center(self) -> np.ndarray:
        return self.cam_to_world[:3, 3]

    @property
    def world_to_cam(self) -> np.ndarray:
        R = self.cam_to_world[:3, :3]
        t = self.cam_to_world[:3, 3]
        M = np.eye(4)
        M[:3, :3] = R.T
        M[:3, 3] = -R.T @ t
        return M

    def to_json(self) -> dict:
        return {
            "intrinsics": self.intrinsics.reshape(-1).tolist(),
            "cam_to_world": self.cam_to_world.reshape(-1).tolist(),
            "width": self.width,
            "height": self.height,
        }

    @staticmethod
    def from_json(d: dict) -> "Camera":
        return Camera(np.array(d["intrinsics"]).reshape(3, 3),
                      np.array(d["cam_to_world"]).reshape(4, 4),
                      int(d["width"]), int(d["height"]))


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray  # unit
    z_near: float
    z_far: float

    def __post_init__(self):
        if not (0 < self.z_near < self.z_far):
            raise GeometryError("require 0 < z_near < z_far")
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-9:
            raise GeometryError("ray direction must be unit norm")


@dataclass
class FeatureMap:
    data: Tensor | np.ndarray  # (C, H, W)
    ratio: float = 1.0  # map pixels per image pixel

    @property
    def array(self) -> np.ndarray:
        return self.data.data if isinstance(self.data, Tensor) else self.data

    @property
    def channels(self):
        return self.array.shape[0]


def pixel_to_ray(cam: Camera, u, v, z_near: float, z_far: float):
    """Back-project pixel(s) to world-space ray(s).

    Scalar u, v -> Ray; array u, v -> (origins (N,3), directions (N,3)).
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    d_cam = np.stack([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy,
                      np.ones_like(u)], axis=-1)
    d_world = d_cam @ cam.cam_to_world[:3, :3].T
    d_world = d_world / np.linalg.norm(d_world, axis=-1, keepdims=True)
    if u.ndim == 0:
        return Ray(cam.center.copy(), d_world, z_near, z_far)
    origins = np.broadcast_to(cam.center, d_world.shape).copy()
    return origins, d_world


def project_point(cam: Camera, p: np.ndarray):
    """Pinhole projection of world point(s) -> (u, v, depth)."""
    p = np.asarray(p, dtype=np.float64)
    w2c = cam.world_to_cam
    pc = p @ w2c[:3, :3].T + w2c[:3, 3]
    z = pc[..., 2]
    if np.any(z <= 1e-9):
        raise BehindCameraError("point projects behind the camera")
    u = cam.fx * pc[..., 0] / z + cam.cx
    v = cam.fy * pc[..., 1] / z + cam.cy
    return u, v, z


def project_point_t(cam: Camera, p: Tensor):
    """Tape-differentiable projection; p is a (N, 3) Tensor."""
    w2c = cam.world_to_cam
    pc = p @ Tensor(w2c[:3, :3].T) + Tensor(w2c[:3, 3])
    z = pc[..., 2]
    if np.any(z.data <= 1e-9):
        raise BehindCameraError("point projects behind the camera")
    u = pc[..., 0] / z * cam.fx + cam.cx
    v = pc[..., 1] / z * cam.fy + cam.cy
    return u, v, z


def bilinear_sample(fmap: FeatureMap, u, v):
    """Bilinear fetch at map-space coordinates; border clamp outside.

    Returns (N, C) for array u, v of shape (N,); differentiable w.r.t.
    the map values and (for Tensor coordinates) the coordinates.
    """
    data = fmap.data
    arr = fmap.array
    C, H, W = arr.shape
    u_arr = u.data if isinstance(u, Tensor) else np.asarray(u, dtype=np.float64)
    v_arr = v.data if isinstance(v, Tensor) else np.asarray(v, dtype=np.float64)
    scalar = u_arr.ndim == 0
    u_arr = np.atleast_1d(u_arr)
    v_arr = np.atleast_1d(v_arr)
    uc = np.clip(u_arr, 0.0, W - 1.0)
    vc = np.clip(v_arr, 0.0, H - 1.0)
    u0 = np.clip(np.floor(uc).astype(int), 0, W - 2) if W > 1 else np.zeros_like(uc, int)
    v0 = np.clip(np.floor(vc).astype(int), 0, H - 2) if H > 1 else np.zeros_like(vc, int)
    u1 = np.minimum(u0 + 1, W - 1)
    v1 = np.minimum(v0 + 1, H - 1)
    fu = uc - u0
    fv = vc - v0
    c00 = arr[:, v0, u0].T  # (N, C)
    c01 = arr[:, v0, u1].T
    c10 = arr[:, v1, u0].T
    c11 = arr[:, v1, u1].T
    w00 = ((1 - fu) * (1 - fv))[:, None]
    w01 = (fu * (1 - fv))[:, None]
    w10 = ((1 - fu) * fv)[:, None]
    w11 = (fu * fv)[:, None]
    out = w00 * c00 + w01 * c01 + w10 * c10 + w11 * c11

    parents = [t for t in (data, u, v) if isinstance(t, Tensor)]
    if not parents:
        return out[0] if scalar else out

    in_u = (u_arr > 0) & (u_arr < W - 1)  # clamp region has zero coord-gradient
    in_v = (v_arr > 0) & (v_arr < H - 1)

    def bwd(g):
        if isinstance(data, Tensor) and data.requires_grad:
            data._zero_grad_buffer()
            np.add.at(data.grad, (slice(None), v0, u0), (g * w00).T)
            np.add.at(data.grad, (slice(None), v0, u1), (g * w01).T)
            np.add.at(data.grad, (slice(None), v1, u0), (g * w10).T)
            np.add.at(data.grad, (slice(None), v1, u1), (g * w11).T)
        if isinstance(u, Tensor) and u.requires_grad:
            du = ((c01 - c00) * (1 - fv)[:, None] + (c11 - c10) * fv[:, None])
            u._zero_grad_buffer()
            u.grad += (g * du).sum(axis=-1) * in_u
        if isinstance(v, Tensor) and v.requires_grad:
            dv = ((c10 - c00) * (1 - fu)[:, None] + (c11 - c01) * fu[:, None])
            v._zero_grad_buffer()
            v.grad += (g * dv).sum(axis=-1) * in_v

    res = custom_op(out, parents, bwd)
    return res


def mask_bbox(mask: np.ndarray) -> tuple[int, int, int, int]:
    """Tight (u_min, v_min, u_max, v_max) of the mask's nonzero region."""
    ys, xs = np.nonzero(mask > 0)
    if ys.size == 0:
        raise GeometryError("empty mask has no bounding box")
    return int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max())


def sample_training_rays(object_mask: np.ndarray, cam: Camera, m: int,
                         rng: np.random.Generator, z_near: float, z_far: float,
                         image: np.ndarray | None = None,
                         mask_values: np.ndarray | None = None):
    """Draw m pixels: half from inside the mask, half uniformly over the
    whole frame so empty space also receives opacity supervision.

    Returns (pixels (m,2) int, origins (m,3), dirs (m,3), colors (m,3) or
    None, mask values (m,) or None). Deterministic for a fixed rng state.
    """
    if m < 1:
        raise ValueError("need at least one ray")
    ys, xs = np.nonzero(object_mask > 0)
    if ys.size == 0:
        raise GeometryError("empty mask has no pixels to sample")
    h, w = object_mask.shape[:2]
    m_in = (m + 1) // 2
    pick = rng.integers(0, ys.size, size=m_in)
    us_out = rng.integers(0, w, size=m - m_in)
    vs_out = rng.integers(0, h, size=m - m_in)
    us = np.concatenate([xs[pick], us_out])
    vs = np.concatenate([ys[pick], vs_out])
    origins, dirs = pixel_to_ray(cam, us.astype(float), vs.astype(float), z_near, z_far)
    colors = image[vs, us] if image is not None else None
    mvals = None
    src = mask_values if mask_values is not None else object_mask
    mvals = src[vs, us].astype(np.float64)
    pixels = np.stack([us, vs], axis=-1)
    return pixels, origins, dirs, colors, mvals


def lookat_cam_to_world(eye: np.ndarray, target: np.ndarray,
                        up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """Rigid cam_to_world with +z pointing from eye toward target."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd = fwd / np.linalg.norm(fwd)
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, up)
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(fwd, np.array([1.0, 0.0, 0.0]))
    right = right / np.linalg.norm(right)
    down = np.cross(fwd, right)  # +v is downward in image space
    M = np.eye(4)
    M[:3, 0] = right
    M[:3, 1] = down
    M[:3, 2] = fwd
    M[:3, 3] = eye
    return M
