"""Parametric part-structured objects: superquadric primitives with rigid
placement, per-part IDs and colors, plus capsule meshes for hand bones."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def _signed_pow(x: np.ndarray, e: float) -> np.ndarray:
    return np.sign(x) * np.abs(x) ** e


def superquadric_mesh(scale, eps1: float, eps2: float,
                      n_lat: int = 24, n_lon: int = 48):
    """Lat-long triangulation of a superellipsoid; returns (verts, faces)."""
    a = np.asarray(scale, dtype=np.float64)
    eta = np.linspace(-np.pi / 2, np.pi / 2, n_lat)
    omega = np.linspace(-np.pi, np.pi, n_lon, endpoint=False)
    ce = _signed_pow(np.cos(eta), eps1)[:, None]
    se = _signed_pow(np.sin(eta), eps1)[:, None]
    co = _signed_pow(np.cos(omega), eps2)[None, :]
    so = _signed_pow(np.sin(omega), eps2)[None, :]
    x = a[0] * ce * co
    y = a[1] * ce * so
    z = a[2] * se * np.ones_like(co)
    verts = np.stack([x, y, z], axis=-1).reshape(-1, 3)
    faces = []
    for i in range(n_lat - 1):
        for j in range(n_lon):
            j2 = (j + 1) % n_lon
            v00, v01 = i * n_lon + j, i * n_lon + j2
            v10, v11 = (i + 1) * n_lon + j, (i + 1) * n_lon + j2
            faces.append((v00, v10, v01))
            faces.append((v01, v10, v11))
    return verts, np.array(faces, dtype=int)


@dataclass(frozen=True)
class Part:
    scale: np.ndarray  # (3,) half extents, meters
    eps1: float
    eps2: float
    rotation: np.ndarray  # 3x3
    translation: np.ndarray  # (3,)
    color: np.ndarray  # (3,) base RGB in [0, 1]
    part_id: int

    def to_json(self) -> dict:
        return {"scale": np.asarray(self.scale).tolist(), "eps1": self.eps1,
                "eps2": self.eps2, "rotation": np.asarray(self.rotation).reshape(-1).tolist(),
                "translation": np.asarray(self.translation).tolist(),
                "color": np.asarray(self.color).tolist(), "part_id": self.part_id}

    @staticmethod
    def from_json(d: dict) -> "Part":
        return Part(np.array(d["scale"]), d["eps1"], d["eps2"],
                    np.array(d["rotation"]).reshape(3, 3),
                    np.array(d["translation"]), np.array(d["color"]), d["part_id"])


def part_implicit(part: Part, p: np.ndarray) -> np.ndarray:
    """Inside-outside value (< 0 inside) in world coordinates."""
    q = (np.atleast_2d(p) - part.translation) @ part.rotation
    a = part.scale
    e1, e2 = part.eps1, part.eps2
    xy = (np.abs(q[:, 0] / a[0]) ** (2.0 / e2)
          + np.abs(q[:, 1] / a[1]) ** (2.0 / e2)) ** (e2 / e1)
    f = xy + np.abs(q[:, 2] / a[2]) ** (2.0 / e1)
    return f - 1.0


def part_distance(part: Part, p: np.ndarray) -> np.ndarray:
    """Approximate signed distance via radial scaling (adequate for
    contact tolerances of a few millimeters)."""
    q = (np.atleast_2d(p) - part.translation) @ part.rotation
    a = part.scale
    e1, e2 = part.eps1, part.eps2
    r = np.linalg.norm(q, axis=-1)
    xy = (np.abs(q[:, 0] / a[0]) ** (2.0 / e2)
          + np.abs(q[:, 1] / a[1]) ** (2.0 / e2)) ** (e2 / e1)
    f = xy + np.abs(q[:, 2] / a[2]) ** (2.0 / e1)
    w = f ** (e1 / 2.0)  # scale factor t with F(q/t) = 1, radially
    return r * (1.0 - 1.0 / np.maximum(w, 1e-9))


@dataclass(frozen=True)
class PartObject:
    parts: tuple[Part, ...]

    def distance(self, p: np.ndarray) -> np.ndarray:
        return np.min(np.stack([part_distance(q, p) for q in self.parts]), axis=0)

    def bounding_radius(self) -> float:
        r = 0.0
        for part in self.parts:
            r = max(r, float(np.linalg.norm(part.translation)
                             + np.linalg.norm(part.scale)))
        return r

    def to_json(self) -> list:
        return [p.to_json() for p in self.parts]

    @staticmethod
    def from_json(items: list) -> "PartObject":
        return PartObject(tuple(Part.from_json(d) for d in items))


def object_meshes(obj: PartObject, n_lat: int = 24, n_lon: int = 48):
    """Per-part world-space meshes: list of (verts, faces, color, part_id)."""
    out = []
    for part in obj.parts:
        v, f = superquadric_mesh(part.scale, part.eps1, part.eps2, n_lat, n_lon)
        out.append((v @ part.rotation.T + part.translation, f, part.color, part.part_id))
    return out


def union_surface_mesh(obj: PartObject, n_lat: int = 32, n_lon: int = 64):
    """Ground-truth mesh: per-part meshes with faces whose centroid lies
    strictly inside another part removed (approximate CSG union surface)."""
    verts_all, faces_all, colors_all = [], [], []
    offset = 0
    for pi, part in enumerate(obj.parts):
        v, f = superquadric_mesh(part.scale, part.eps1, part.eps2, n_lat, n_lon)
        vw = v @ part.rotation.T + part.translation
        keep = np.ones(len(f), dtype=bool)
        centroids = vw[f].mean(axis=1)
        for qi, other in enumerate(obj.parts):
            if qi != pi:
                keep &= part_implicit(other, centroids) > -1e-6
        verts_all.append(vw)
        faces_all.append(f[keep] + offset)
        colors_all.append(np.tile(part.color, (len(vw), 1)))
        offset += len(vw)
    return (np.concatenate(verts_all), np.concatenate(faces_all),
            np.concatenate(colors_all))


def capsule_mesh(p0, p1, radius: float, n_seg: int = 10, n_ring: int = 5):
    """Triangulated capsule around segment p0-p1."""
    p0 = np.asarray(p0, dtype=np.float64)
    p1 = np.asarray(p1, dtype=np.float64)
    axis = p1 - p0
    length = np.linalg.norm(axis)
    z = axis / length if length > 1e-9 else np.array([0.0, 0.0, 1.0])
    tmp = np.array([1.0, 0.0, 0.0]) if abs(z[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    x = np.cross(z, tmp)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    theta = np.linspace(0, 2 * np.pi, n_seg, endpoint=False)
    ring_dirs = np.outer(np.cos(theta), x) + np.outer(np.sin(theta), y)
    rows = []
    # bottom hemisphere, cylinder ends, top hemisphere
    for t in np.linspace(-np.pi / 2, 0, n_ring):
        rows.append(p0 + radius * (np.cos(t) * ring_dirs + np.sin(t) * z))
    for t in np.linspace(0, np.pi / 2, n_ring):
        rows.append(p1 + radius * (np.cos(t) * ring_dirs + np.sin(t) * z))
    verts = np.concatenate(rows)
    faces = []
    n_rows = len(rows)
    for i in range(n_rows - 1):
        for j in range(n_seg):
            j2 = (j + 1) % n_seg
            v00, v01 = i * n_seg + j, i * n_seg + j2
            v10, v11 = (i + 1) * n_seg + j, (i + 1) * n_seg + j2
            faces.append((v00, v10, v01))
            faces.append((v01, v10, v11))
    return verts, np.array(faces, dtype=int)


HAND_COLOR = np.array([0.85, 0.65, 0.55])

_PALETTE = np.array([
    [0.85, 0.25, 0.2], [0.2, 0.55, 0.85], [0.95, 0.75, 0.2], [0.3, 0.75, 0.4],
    [0.7, 0.4, 0.8], [0.9, 0.5, 0.15], [0.25, 0.7, 0.7], [0.8, 0.3, 0.55],
])


def random_object(rng: np.random.Generator, max_parts: int = 4) -> PartObject:
    """Body superquadric plus 1-3 attached bumps, each its own part ID."""
    n_parts = int(rng.integers(2, max_parts + 1))
    body_scale = rng.uniform(0.035, 0.06, size=3)
    parts = [Part(scale=body_scale,
                  eps1=float(rng.uniform(0.5, 1.4)), eps2=float(rng.uniform(0.5, 1.4)),
                  rotation=np.eye(3), translation=np.zeros(3),
                  color=_PALETTE[rng.integers(len(_PALETTE))], part_id=1)]
    for i in range(n_parts - 1):
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        bump_scale = rng.uniform(0.012, 0.028, size=3)
        # place the bump center on the body surface along `direction`
        t_surface = _radial_surface_point(parts[0], direction)
        parts.append(Part(
            scale=bump_scale,
            eps1=float(rng.uniform(0.6, 1.2)), eps2=float(rng.uniform(0.6, 1.2)),
            rotation=_random_rotation(rng), translation=t_surface,
            color=_PALETTE[rng.integers(len(_PALETTE))], part_id=i + 2))
    return PartObject(tuple(parts))


def _radial_surface_point(part: Part, direction: np.ndarray) -> np.ndarray:
    lo, hi = 0.0, 4.0 * float(np.max(part.scale))
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        if part_implicit(part, (direction * mid)[None])[0] < 0:
            lo = mid
        else:
            hi = mid
    return direction * 0.5 * (lo + hi)


def _random_rotation(rng: np.random.Generator) -> np.ndarray:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])
