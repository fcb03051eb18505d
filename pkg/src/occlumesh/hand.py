"""Simplified articulated hand: hierarchy, forward kinematics, and the
K-nearest-joint geometric embedding used to condition the fields."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensorcore import Tensor, custom_op


@dataclass(frozen=True)
class HandSkeleton:
    parents: np.ndarray  # (J,), -1 for root
    offsets: np.ndarray  # (J, 3) rest offsets, meters
    axes: np.ndarray  # (J, 3) unit rotation axes

    def __post_init__(self):
        parents = np.asarray(self.parents, dtype=int)
        offsets = np.asarray(self.offsets, dtype=np.float64)
        axes = np.asarray(self.axes, dtype=np.float64)
        object.__setattr__(self, "parents", parents)
        object.__setattr__(self, "offsets", offsets)
        object.__setattr__(self, "axes", axes)
        J = parents.shape[0]
        if offsets.shape != (J, 3) or axes.shape != (J, 3):
            raise ValueError("offsets and axes must be (J, 3)")
        for j, p in enumerate(parents):
            if not (-1 <= p < j):
                raise ValueError(
                    f"joint {j}: parent {p} must precede it (topological order)")
        if not np.all(np.isfinite(offsets)):
            raise ValueError("non-finite rest offset")
        if np.abs(np.linalg.norm(axes, axis=1) - 1.0).max() > 1e-9:
            raise ValueError("rotation axes must be unit norm")

    @property
    def joint_count(self) -> int:
        return len(self.parents)

    def to_json(self) -> dict:
        return {"parents": self.parents.tolist(),
                "offsets": self.offsets.tolist(),
                "axes": self.axes.tolist()}

    @staticmethod
    def from_json(d: dict) -> "HandSkeleton":
        return HandSkeleton(np.array(d["parents"]), np.array(d["offsets"]),
                            np.array(d["axes"]))


@dataclass(frozen=True)
class HandPose:
    angles: np.ndarray  # (J,) radians about each joint's axis
    root: np.ndarray = field(default_factory=lambda: np.eye(4))  # rigid 4x4

    def __post_init__(self):
        angles = np.asarray(self.angles, dtype=np.float64)
        root = np.asarray(self.root, dtype=np.float64)
        object.__setattr__(self, "angles", angles)
        object.__setattr__(self, "root", root)
        if not np.all(np.isfinite(angles)):
            raise ValueError("non-finite joint angle")
        R = root[:3, :3]
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-8:
            raise ValueError("root rotation is not orthonormal")

    def to_json(self) -> dict:
        return {"angles": self.angles.tolist(), "root": self.root.reshape(-1).tolist()}

    @staticmethod
    def from_json(d: dict) -> "HandPose":
        return HandPose(np.array(d["angles"]), np.array(d["root"]).reshape(4, 4))


@dataclass(frozen=True)
class JointTransforms:
    world: np.ndarray  # (J, 4, 4)

    @property
    def origins(self) -> np.ndarray:
        return self.world[:, :3, 3]


def axis_angle_matrix(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rodrigues rotation as a 4x4 homogeneous matrix."""
    a = np.asarray(axis, dtype=np.float64)
    c, s = np.cos(angle), np.sin(angle)
    K = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
    R = np.eye(3) * c + s * K + (1 - c) * np.outer(a, a)
    M = np.eye(4)
    M[:3, :3] = R
    return M


def _translate(offset: np.ndarray) -> np.ndarray:
    M = np.eye(4)
    M[:3, 3] = offset
    return M


def forward_kinematics(skel: HandSkeleton, pose: HandPose) -> JointTransforms:
    """world(j) = world(parent) @ translate(offset_j) @ rotate(axis_j, theta_j)."""
    if pose.angles.shape[0] != skel.joint_count:
        raise ValueError(
            f"pose has {pose.angles.shape[0]} angles for {skel.joint_count} joints")
    world = np.empty((skel.joint_count, 4, 4))
    for j in range(skel.joint_count):
        local = _translate(skel.offsets[j]) @ axis_angle_matrix(skel.axes[j], pose.angles[j])
        parent = pose.root if skel.parents[j] < 0 else world[skel.parents[j]]
        world[j] = parent @ local
    return JointTransforms(world)


def nearest_joints(p: np.ndarray, jt: JointTransforms, k: int) -> np.ndarray:
    """Indices (N, k) of the k nearest joint origins, ascending distance,
    ties broken by lower joint index."""
    origins = jt.origins
    d = np.linalg.norm(p[..., None, :] - origins, axis=-1)  # (N, J)
    order = np.argsort(d, axis=-1, kind="stable")  # stable sort favors lower index
    return order[..., :k]


def hand_embedding(p, jt: JointTransforms, k: int):
    """Concatenate p expressed in the local frames of its k nearest joints.

    p: (N, 3) array or Tensor -> (N, 3k). The joint selection is constant
    (non-differentiable); the local coordinates are differentiable in p.
    """
    if k > jt.world.shape[0]:
        raise ValueError(f"K={k} exceeds joint count {jt.world.shape[0]}")
    p_arr = p.data if isinstance(p, Tensor) else np.asarray(p, dtype=np.float64)
    single = p_arr.ndim == 1
    p_arr = np.atleast_2d(p_arr)
    idx = nearest_joints(p_arr, jt, k)  # (N, k)
    R = jt.world[idx, :3, :3]  # (N, k, 3, 3)
    t = jt.world[idx, :3, 3]  # (N, k, 3)
    local = np.einsum("nkji,nkj->nki", R, p_arr[:, None, :] - t)
    out = local.reshape(p_arr.shape[0], 3 * k)
    if not isinstance(p, Tensor):
        return out[0] if single else out

    def bwd(g):
        if p.requires_grad:
            p._zero_grad_buffer()
            gl = g.reshape(p_arr.shape[0], k, 3)
            gp = np.einsum("nkji,nki->nj", R, gl)
            p.grad += gp.reshape(p.data.shape)

    return custom_op(out, [p], bwd)


# ----------------------------------------------------------------------
# default 16-joint skeleton: wrist root + 5 fingers x 3 joints
# ----------------------------------------------------------------------

FINGER_NAMES = ("thumb", "index", "middle", "ring", "pinky")
BONE_RADIUS = 0.008  # capsule radius, meters


def default_skeleton() -> HandSkeleton:
    """Wrist at the root; each finger a 3-joint chain flexing about its
    local splay-adjusted axis. Dimensions are adult-hand scale, meters."""
    parents = [-1]
    offsets = [np.zeros(3)]
    axes = [np.array([0.0, 0.0, 1.0])]
    # base position across the palm (x), palm length (y), splay angle
    finger_geo = {
        "thumb": (-0.035, 0.025, 0.030, -1.0),
        "index": (-0.022, 0.085, 0.036, -0.15),
        "middle": (0.000, 0.090, 0.040, 0.0),
        "ring": (0.022, 0.085, 0.036, 0.15),
        "pinky": (0.042, 0.075, 0.030, 0.3),
    }
    for name in FINGER_NAMES:
        bx, by, seg, splay = finger_geo[name]
        direction = np.array([np.sin(splay), np.cos(splay), 0.0])
        flex_axis = np.array([np.cos(splay), -np.sin(splay), 0.0])
        parent = 0
        base = np.array([bx, by, 0.0])
        for s in range(3):
            parents.append(parent)
            offsets.append(base if s == 0 else direction * seg)
            axes.append(flex_axis)
            parent = len(parents) - 1
    return HandSkeleton(np.array(parents), np.array(offsets), np.array(axes))


def bone_segments(skel: HandSkeleton, jt: JointTransforms,
                  tip_length: float = 0.025) -> np.ndarray:
    """(B, 2, 3) capsule axis segments: one per parent-child bone plus a
    fingertip extension beyond each distal joint."""
    segs = []
    origins = jt.origins
    children: dict[int, list[int]] = {}
    for j, par in enumerate(skel.parents):
        if par >= 0:
            segs.append((origins[par], origins[j]))
            children.setdefault(int(par), []).append(j)
    for j in range(skel.joint_count):
        if j not in children and skel.parents[j] >= 0:
            # distal joint: extend along the bone direction
            d = origins[j] - origins[skel.parents[j]]
            n = np.linalg.norm(d)
            d = d / n if n > 1e-9 else np.array([0.0, 1.0, 0.0])
            segs.append((origins[j], origins[j] + d * tip_length))
    return np.array(segs)
