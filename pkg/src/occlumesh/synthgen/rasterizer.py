"""Z-buffered software rasterizer with flat shading and a fixed
directional light. Object/hand separation and per-pixel part labels come
from the triangle that wins the depth test. The inner loop is JIT
compiled (numba) -- a pure-Python rasterizer is far too slow even at
desk-scale resolutions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from ..camera import Camera

LIGHT_DIR = np.array([0.35, 0.75, -0.55]) / np.linalg.norm([0.35, 0.75, -0.55])
AMBIENT = 0.35
BACKGROUND = np.array([1.0, 1.0, 1.0])  # white


@dataclass
class TriangleGroup:
    verts: np.ndarray  # (V, 3) world
    faces: np.ndarray  # (F, 3)
    color: np.ndarray  # (3,) flat base color
    is_object: bool
    part_id: int = 0


@dataclass
class RasterResult:
    rgb: np.ndarray  # (H, W, 3) float in [0, 1]
    depth: np.ndarray  # (H, W), inf where empty
    object_mask: np.ndarray  # (H, W) bool, nearest hit is an object face
    hand_mask: np.ndarray  # (H, W) bool
    part_labels: np.ndarray  # (H, W) uint8, 0 outside visible object
    degenerate_count: int = 0


@njit(cache=True)
def _raster_kernel(u, v, z, faces, face_rgb, face_obj, face_part,
                   depth, rgb, obj, hand, labels):
    H, W = depth.shape
    degenerate = 0
    for fi in range(faces.shape[0]):
        i0, i1, i2 = faces[fi, 0], faces[fi, 1], faces[fi, 2]
        if z[i0] <= 1e-6 or z[i1] <= 1e-6 or z[i2] <= 1e-6:
            continue
        u0, u1, u2 = u[i0], u[i1], u[i2]
        v0, v1, v2 = v[i0], v[i1], v[i2]
        d = (v1 - v2) * (u0 - u2) + (u2 - u1) * (v0 - v2)
        if abs(d) < 1e-12:
            degenerate += 1
            continue
        x0 = max(int(np.floor(min(u0, min(u1, u2)))), 0)
        x1 = min(int(np.ceil(max(u0, max(u1, u2)))), W - 1)
        y0 = max(int(np.floor(min(v0, min(v1, v2)))), 0)
        y1 = min(int(np.ceil(max(v0, max(v1, v2)))), H - 1)
        if x1 < x0 or y1 < y0:
            continue
        iz0, iz1, iz2 = 1.0 / z[i0], 1.0 / z[i1], 1.0 / z[i2]
        for py in range(y0, y1 + 1):
            for px in range(x0, x1 + 1):
                b0 = ((v1 - v2) * (px - u2) + (u2 - u1) * (py - v2)) / d
                b1 = ((v2 - v0) * (px - u2) + (u0 - u2) * (py - v2)) / d
                b2 = 1.0 - b0 - b1
                if b0 < -1e-9 or b1 < -1e-9 or b2 < -1e-9:
                    continue
                inv_z = b0 * iz0 + b1 * iz1 + b2 * iz2
                if inv_z <= 1e-12:
                    continue
                zp = 1.0 / inv_z
                if zp < depth[py, px]:
                    depth[py, px] = zp
                    rgb[py, px, 0] = face_rgb[fi, 0]
                    rgb[py, px, 1] = face_rgb[fi, 1]
                    rgb[py, px, 2] = face_rgb[fi, 2]
                    obj[py, px] = face_obj[fi]
                    hand[py, px] = not face_obj[fi]
                    labels[py, px] = face_part[fi] if face_obj[fi] else 0
    return degenerate


def rasterize(groups: list[TriangleGroup], cam: Camera) -> RasterResult:
    H, W = cam.height, cam.width
    depth = np.full((H, W), np.inf)
    rgb = np.tile(BACKGROUND, (H, W, 1))
    obj = np.zeros((H, W), dtype=np.bool_)
    hand = np.zeros((H, W), dtype=np.bool_)
    labels = np.zeros((H, W), dtype=np.uint8)
    w2c = cam.world_to_cam

    us, vs, zs, faces, face_rgb, face_obj, face_part = [], [], [], [], [], [], []
    offset = 0
    for grp in groups:
        if len(grp.faces) == 0:
            continue
        vc = grp.verts @ w2c[:3, :3].T + w2c[:3, 3]
        z = vc[:, 2]
        us.append(cam.fx * vc[:, 0] / np.maximum(z, 1e-9) + cam.cx)
        vs.append(cam.fy * vc[:, 1] / np.maximum(z, 1e-9) + cam.cy)
        zs.append(z)
        faces.append(grp.faces + offset)
        tri_w = grp.verts[grp.faces]
        normals = np.cross(tri_w[:, 1] - tri_w[:, 0], tri_w[:, 2] - tri_w[:, 0])
        nn = np.maximum(np.linalg.norm(normals, axis=-1), 1e-12)
        shade = AMBIENT + (1 - AMBIENT) * np.abs((normals / nn[:, None]) @ LIGHT_DIR)
        face_rgb.append(np.clip(shade[:, None] * grp.color, 0.0, 1.0))
        face_obj.append(np.full(len(grp.faces), grp.is_object, dtype=np.bool_))
        face_part.append(np.full(len(grp.faces), grp.part_id, dtype=np.uint8))
        offset += len(grp.verts)

    if not faces:
        return RasterResult(rgb, depth, obj, hand, labels, 0)
    degenerate = _raster_kernel(
        np.concatenate(us), np.concatenate(vs), np.concatenate(zs),
        np.concatenate(faces).astype(np.int64),
        np.concatenate(face_rgb), np.concatenate(face_obj),
        np.concatenate(face_part), depth, rgb, obj, hand, labels)
    return RasterResult(rgb=rgb, depth=depth, object_mask=obj, hand_mask=hand,
                        part_labels=labels, degenerate_count=int(degenerate))
