import numpy as np
import pytest

from occlumesh.synthgen.io import SceneDataset, write_scene
from occlumesh.synthgen.scenes import SceneConfig, generate_scene_with_coverage


def build_dataset(root, n_scenes, seed=0, n_views=6, resolution=64):
    cfg = SceneConfig(n_views=n_views, resolution=resolution)
    root.mkdir(parents=True, exist_ok=True)
    for i in range(n_scenes):
        spec, sample = generate_scene_with_coverage(seed + i, cfg)
        write_scene(root / f"scene_{i:03}", spec, sample)
    return root


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Two small scenes shared by the unit tests (read-only)."""
    root = tmp_path_factory.mktemp("tiny_data")
    return build_dataset(root, n_scenes=2, seed=7, n_views=6, resolution=64)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)


def random_hand_pose(skel, rng, scale=1.0):
    """Uniform joint angles plus a random rigid root transform."""
    from occlumesh.hand import HandPose

    angles = rng.uniform(-np.pi, np.pi, skel.joint_count) * scale
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    R = np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])
    root = np.eye(4)
    root[:3, :3] = R
    root[:3, 3] = rng.normal(size=3) * 0.1
    return HandPose(angles=angles, root=root)
