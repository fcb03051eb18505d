"""Dataset layout and access-logged loading.

dataset/scene_{i:05}/meta.json plus per view v{j:02}_rgb.png,
v{j:02}_mask.png, v{j:02}_rgb_free.png, v{j:02}_mask_full.png,
v{j:02}_parts.png, and object_gt.obj. PNGs are 8-bit; masks 0/255.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from ..camera import Camera
from ..hand import HandPose, HandSkeleton
from .objects import PartObject
from .scenes import SceneSample, SceneSpec


def save_png(path, array: np.ndarray) -> None:
    """Float [0,1] (H,W) or (H,W,3) -> 8-bit PNG; integer arrays pass through."""
    arr = np.asarray(array)
    if arr.dtype.kind == "f":
        arr = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    elif arr.dtype == bool:
        arr = arr.astype(np.uint8) * 255
    else:
        arr = arr.astype(np.uint8)
    Image.fromarray(arr).save(path)


def load_png(path) -> np.ndarray:
    return np.asarray(Image.open(path))


def write_obj(path, verts: np.ndarray, faces: np.ndarray,
              colors: np.ndarray | None = None) -> None:
    with open(path, "w") as f:
        for i, v in enumerate(verts):
            if colors is not None:
                c = colors[i]
                f.write(f"v {v[0]:.8f} {v[1]:.8f} {v[2]:.8f} "
                        f"{c[0]:.6f} {c[1]:.6f} {c[2]:.6f}\n")
            else:
                f.write(f"v {v[0]:.8f} {v[1]:.8f} {v[2]:.8f}\n")
        for tri in faces:
            f.write(f"f {tri[0]+1} {tri[1]+1} {tri[2]+1}\n")


def read_obj(path):
    verts, faces, colors = [], [], []
    with open(path) as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
                if len(parts) >= 7:
                    colors.append([float(x) for x in parts[4:7]])
            elif parts[0] == "f":
                faces.append([int(tok.split("/")[0]) - 1 for tok in parts[1:4]])
    verts = np.array(verts, dtype=np.float64)
    faces = np.array(faces, dtype=int) if faces else np.zeros((0, 3), dtype=int)
    colors = np.array(colors, dtype=np.float64) if colors else None
    return verts, faces, colors


def write_scene(scene_dir, spec: SceneSpec, sample: SceneSample) -> None:
    scene_dir = Path(scene_dir)
    scene_dir.mkdir(parents=True, exist_ok=True)
    with open(scene_dir / "meta.json", "w") as f:
        json.dump(spec.to_json(), f, sort_keys=True)
    for j in range(len(spec.cameras)):
        save_png(scene_dir / f"v{j:02}_rgb.png", sample.rgb[j])
        save_png(scene_dir / f"v{j:02}_mask.png", sample.mask[j] > 0)
        save_png(scene_dir / f"v{j:02}_rgb_free.png", sample.rgb_free[j])
        save_png(scene_dir / f"v{j:02}_mask_full.png", sample.mask_full[j] > 0)
        save_png(scene_dir / f"v{j:02}_parts.png", sample.parts[j])
    verts, faces, colors = sample.gt_mesh
    write_obj(scene_dir / "object_gt.obj", verts, faces, colors)


@dataclass
class SceneMeta:
    seed: int
    cameras: list[Camera]
    hand_pose: HandPose
    skeleton: HandSkeleton
    obj: PartObject
    norm_center: np.ndarray
    norm_radius: float
    resolution: int


def load_meta(scene_dir) -> SceneMeta:
    with open(Path(scene_dir) / "meta.json") as f:
        d = json.load(f)
    return SceneMeta(
        seed=d["seed"],
        cameras=[Camera.from_json(c) for c in d["cameras"]],
        hand_pose=HandPose.from_json(d["hand_pose"]),
        skeleton=HandSkeleton.from_json(d["skeleton"]),
        obj=PartObject.from_json(d["object"]),
        norm_center=np.array(d["norm_center"]),
        norm_radius=float(d["norm_radius"]),
        resolution=int(d["resolution"]),
    )


class SceneView:
    """Lazy view accessor; every file read is recorded in the dataset log."""

    def __init__(self, scene: "Scene", index: int):
        self._scene = scene
        self.index = index

    def _load(self, kind: str) -> np.ndarray:
        path = self._scene.dir / f"v{self.index:02}_{kind}.png"
        if kind in ("rgb_free", "mask_full") and not self._scene.include_free:
            raise PermissionError(
                f"occlusion-free artifact {path.name} is not available in this stage")
        self._scene.dataset.access_log.append(str(path))
        key = (self.index, kind)
        arr = self._scene._view_cache.get(key)
        if arr is None:
            arr = load_png(path)
            self._scene._view_cache[key] = arr
        return arr

    @property
    def rgb(self) -> np.ndarray:
        return self._load("rgb").astype(np.float64) / 255.0

    @property
    def mask(self) -> np.ndarray:
        return (self._load("mask") > 127).astype(np.float64)

    @property
    def rgb_free(self) -> np.ndarray:
        return self._load("rgb_free").astype(np.float64) / 255.0

    @property
    def mask_full(self) -> np.ndarray:
        return (self._load("mask_full") > 127).astype(np.float64)

    @property
    def part_labels(self) -> np.ndarray:
        return self._load("parts")

    @property
    def camera(self) -> Camera:
        return self._scene.meta.cameras[self.index]


class Scene:
    def __init__(self, dataset: "SceneDataset", scene_dir: Path):
        self.dataset = dataset
        self.dir = Path(scene_dir)
        self.include_free = dataset.include_free
        self._view_cache: dict = {}
        dataset.access_log.append(str(self.dir / "meta.json"))
        self.meta = load_meta(self.dir)

    @property
    def n_views(self) -> int:
        return len(self.meta.cameras)

    def view(self, j: int) -> SceneView:
        return SceneView(self, j)

    def gt_mesh(self):
        path = self.dir / "object_gt.obj"
        self.dataset.access_log.append(str(path))
        return read_obj(path)


class SceneDataset:
    """Directory-backed dataset with a file-access audit log.

    ``include_free=False`` (finetuning) makes any access to occlusion-free
    artifacts an error, and the log proves none happened.
    """

    def __init__(self, root, include_free: bool = True):
        self.root = Path(root)
        self.include_free = include_free
        self.access_log: list[str] = []
        self.scene_dirs = sorted(p for p in self.root.iterdir()
                                 if p.is_dir() and p.name.startswith("scene_"))
        if not self.scene_dirs:
            raise FileNotFoundError(f"no scene_* directories under {self.root}")
        self._cache: dict[int, Scene] = {}

    def __len__(self) -> int:
        return len(self.scene_dirs)

    def scene(self, i: int) -> Scene:
        if i not in self._cache:
            self._cache[i] = Scene(self, self.scene_dirs[i])
        return self._cache[i]
