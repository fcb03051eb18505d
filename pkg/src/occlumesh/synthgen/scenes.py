"""Procedural hand-object scenes: grasp placement, circular camera
trajectories, and paired occluded / occlusion-free multi-view rendering."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from ..camera import Camera, lookat_cam_to_world
from ..hand import (BONE_RADIUS, HandPose, HandSkeleton, bone_segments,
                    default_skeleton, forward_kinematics)
from .objects import (HAND_COLOR, PartObject, capsule_mesh, object_meshes,
                      random_object, union_surface_mesh)
from .rasterizer import RasterResult, TriangleGroup, rasterize


class GraspPlacementError(RuntimeError):
    pass


@dataclass(frozen=True)
class SceneConfig:
    n_views: int = 10
    resolution: int = 128
    radius_range: tuple[float, float] = (0.5, 0.8)
    max_parts: int = 4
    fov_deg: float = 35.0
    contact_tolerance: float = 0.005  # meters
    min_contact_fingers: int = 3
    min_covered_fraction: float = 0.05  # >= 5% covered in some view


@dataclass
class SceneSpec:
    seed: int
    obj: PartObject
    hand_pose: HandPose
    skeleton: HandSkeleton
    cameras: list[Camera]
    norm_center: np.ndarray  # reconstruction box center
    norm_radius: float  # half-diameter of the normalized box
    config: SceneConfig

    def to_json(self) -> dict:
        return {
            "schema": 1,
            "seed": self.seed,
            "object": self.obj.to_json(),
            "hand_pose": self.hand_pose.to_json(),
            "skeleton": self.skeleton.to_json(),
            "cameras": [c.to_json() for c in self.cameras],
            "norm_center": self.norm_center.tolist(),
            "norm_radius": self.norm_radius,
            "resolution": self.config.resolution,
        }

    def to_json_bytes(self) -> bytes:
        return json.dumps(self.to_json(), sort_keys=True).encode("utf-8")


@dataclass
class SceneSample:
    spec: SceneSpec
    rgb: np.ndarray  # (V, H, W, 3) hand-object renders
    mask: np.ndarray  # (V, H, W) occluded object masks
    rgb_free: np.ndarray  # (V, H, W, 3) occlusion-free, white background
    mask_full: np.ndarray  # (V, H, W) complete object masks
    parts: np.ndarray  # (V, H, W) uint8 part labels (occluded visibility)
    gt_mesh: tuple  # (verts, faces, vertex colors)

    def covered_fractions(self) -> np.ndarray:
        covered = (self.mask_full > 0) & ~(self.mask > 0)
        denom = np.maximum(self.mask_full.reshape(len(self.mask), -1).sum(axis=1), 1)
        return covered.reshape(len(self.mask), -1).sum(axis=1) / denom


def make_intrinsics(resolution: int, fov_deg: float) -> np.ndarray:
    f = 0.5 * resolution / np.tan(np.radians(fov_deg) / 2)
    c = (resolution - 1) / 2.0
    return np.array([[f, 0, c], [0, f, c], [0, 0, 1.0]])


def _grasp_pose(obj: PartObject, skel: HandSkeleton, rng: np.random.Generator,
                cfg: SceneConfig) -> HandPose:
    """Place the wrist along a random approach direction and curl each
    finger until its distal capsules touch the object surface."""
    n_fingers = (skel.joint_count - 1) // 3
    for attempt in range(8):
        approach = rng.normal(size=3)
        approach /= np.linalg.norm(approach)
        tangent = np.cross(approach, rng.normal(size=3))
        tangent /= np.linalg.norm(tangent)
        z_axis = -approach  # palm normal faces the object
        x_axis = np.cross(tangent, z_axis)
        root = np.eye(4)
        root[:3, 0] = x_axis
        root[:3, 1] = tangent
        root[:3, 2] = z_axis
        body_r = obj.bounding_radius()
        standoff = body_r + 0.018 - 0.006 * attempt
        # pull the wrist back along the finger direction so the fingers
        # drape across the facing hemisphere instead of past its side
        root[:3, 3] = approach * max(standoff, body_r * 0.55) - tangent * 0.07

        angles = np.zeros(skel.joint_count)
        contacts = 0
        for f in range(n_fingers):
            jids = [1 + 3 * f, 2 + 3 * f, 3 + 3 * f]
            best = None
            for theta in np.linspace(0.0, 2.0, 30):
                trial = angles.copy()
                trial[jids] = theta * np.array([1.0, 0.85, 0.6])
                jt = forward_kinematics(skel, HandPose(trial, root))
                segs = bone_segments(skel, jt)
                # distal two bones of this finger (bone list order: parent-child
                # bones in joint order, then fingertip extensions)
                pts = _segment_points(segs, jids)
                dist = obj.distance(pts).min() - BONE_RADIUS
                if best is None or abs(dist - 0.001) < abs(best[1] - 0.001):
                    best = (theta, dist)
                if dist < -0.002:  # penetrating; stop closing
                    break
            angles[jids] = best[0] * np.array([1.0, 0.85, 0.6])
            if abs(best[1]) <= cfg.contact_tolerance:
                contacts += 1
        if contacts >= cfg.min_contact_fingers:
            return HandPose(angles, root)
    raise GraspPlacementError(
        f"grasp placement failed after bounded retries (contacts={contacts})")


def _segment_points(segs: np.ndarray, joint_ids, n: int = 6) -> np.ndarray:
    """Sample points along bone segments whose child joint is in joint_ids."""
    sel = []
    for j in joint_ids[1:]:  # bones ending at middle/distal joints
        sel.append(segs[j - 1])
    t = np.linspace(0, 1, n)[:, None]
    pts = [s[0] * (1 - t) + s[1] * t for s in sel]
    return np.concatenate(pts)


def generate_scene(seed: int, cfg: SceneConfig) -> SceneSpec:
    """Deterministic scene from (seed, config)."""
    rng = np.random.default_rng(seed)
    obj = random_object(rng, cfg.max_parts)
    skel = default_skeleton()
    pose = _grasp_pose(obj, skel, rng, cfg)

    center = np.zeros(3)
    radius = float(rng.uniform(*cfg.radius_range))
    elevation = rng.uniform(np.radians(10), np.radians(35))
    phase = rng.uniform(0, 2 * np.pi)
    K = make_intrinsics(cfg.resolution, cfg.fov_deg)
    cams = []
    for i in range(cfg.n_views):
        ang = phase + 2 * np.pi * i / cfg.n_views
        eye = center + radius * np.array([
            np.cos(elevation) * np.cos(ang),
            np.sin(elevation),
            np.cos(elevation) * np.sin(ang)])
        cams.append(Camera(K, lookat_cam_to_world(eye, center),
                           cfg.resolution, cfg.resolution))
    return SceneSpec(seed=seed, obj=obj, hand_pose=pose, skeleton=skel,
                     cameras=cams, norm_center=center,
                     norm_radius=obj.bounding_radius() * 1.6, config=cfg)


def scene_groups(spec: SceneSpec, with_hand: bool) -> list[TriangleGroup]:
    groups = []
    for verts, faces, color, pid in object_meshes(spec.obj):
        groups.append(TriangleGroup(verts, faces, color, True, pid))
    if with_hand:
        jt = forward_kinematics(spec.skeleton, spec.hand_pose)
        for seg in bone_segments(spec.skeleton, jt):
            v, f = capsule_mesh(seg[0], seg[1], BONE_RADIUS)
            groups.append(TriangleGroup(v, f, HAND_COLOR, False))
    return groups


def render_views(spec: SceneSpec) -> SceneSample:
    """Render every station once with and once without the hand; cameras
    are shared between the pair so masks satisfy M <= M_co."""
    with_hand = scene_groups(spec, True)
    without_hand = scene_groups(spec, False)
    rgb, mask, rgb_free, mask_full, parts = [], [], [], [], []
    for cam in spec.cameras:
        ho: RasterResult = rasterize(with_hand, cam)
        free: RasterResult = rasterize(without_hand, cam)
        rgb.append(ho.rgb)
        mask.append(ho.object_mask)
        parts.append(ho.part_labels)
        rgb_free.append(free.rgb)
        mask_full.append(free.object_mask)
    return SceneSample(
        spec=spec,
        rgb=np.stack(rgb), mask=np.stack(mask).astype(np.float64),
        rgb_free=np.stack(rgb_free), mask_full=np.stack(mask_full).astype(np.float64),
        parts=np.stack(parts),
        gt_mesh=union_surface_mesh(spec.obj))


def generate_scene_with_coverage(seed: int, cfg: SceneConfig,
                                 max_attempts: int = 10):
    """Regenerate (with derived seeds) until some view has at least the
    configured covered fraction; returns (spec, sample)."""
    last_exc = None
    for attempt in range(max_attempts):
        sub_seed = seed if attempt == 0 else seed + 1_000_003 * attempt
        try:
            spec = generate_scene(sub_seed, cfg)
            sample = render_views(spec)
        except GraspPlacementError as exc:
            last_exc = exc
            continue
        fractions = sample.covered_fractions()
        if fractions.max() >= cfg.min_covered_fraction and np.all(
                sample.mask_full.reshape(len(fractions), -1).sum(axis=1) > 0):
            return spec, sample
    raise GraspPlacementError(
        f"no valid scene for seed {seed} after {max_attempts} attempts"
        + (f" (last: {last_exc})" if last_exc else ""))
