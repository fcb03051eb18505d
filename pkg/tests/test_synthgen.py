"""Synthetic scene generation: geometry, rendering invariants, on-disk
layout, and the occlusion-free access audit."""

import numpy as np
import pytest

from occlumesh.synthgen.io import (SceneDataset, load_meta, load_png, read_obj,
                                   save_png, write_obj, write_scene)
from occlumesh.synthgen.objects import (PartObject, object_meshes, part_distance,
                                        random_object, superquadric_mesh,
                                        union_surface_mesh)
from occlumesh.synthgen.rasterizer import TriangleGroup, rasterize
from occlumesh.synthgen.scenes import (SceneConfig, generate_scene,
                                       generate_scene_with_coverage,
                                       make_intrinsics, render_views)
from occlumesh.camera import Camera, lookat_cam_to_world

SMALL = SceneConfig(n_views=4, resolution=48)


def test_png_roundtrip(tmp_path, rng):
    rgb = (rng.random((8, 10, 3)) * 255).astype(np.uint8)
    save_png(tmp_path / "a.png", rgb)
    np.testing.assert_array_equal(load_png(tmp_path / "a.png"), rgb)
    lab = rng.integers(0, 7, size=(8, 10)).astype(np.uint8)
    save_png(tmp_path / "b.png", lab)
    np.testing.assert_array_equal(load_png(tmp_path / "b.png"), lab)


def test_obj_roundtrip(tmp_path, rng):
    verts = rng.normal(size=(12, 3))
    faces = rng.integers(0, 12, size=(7, 3))
    colors = rng.random((12, 3))
    write_obj(tmp_path / "m.obj", verts, faces, colors)
    v, f, c = read_obj(tmp_path / "m.obj")
    np.testing.assert_allclose(v, verts, atol=1e-6)
    np.testing.assert_array_equal(f, faces)
    np.testing.assert_allclose(c, colors, atol=1e-6)


def test_superquadric_sphere_special_case():
    # eps1 = eps2 = 1 with equal scales is a round sphere
    verts, faces = superquadric_mesh((0.3, 0.3, 0.3), 1.0, 1.0)
    np.testing.assert_allclose(np.linalg.norm(verts, axis=-1), 0.3, atol=1e-9)
    assert faces.min() >= 0 and faces.max() < len(verts)


def test_part_distance_sphere_exact(rng):
    obj = random_object(np.random.default_rng(3), max_parts=2)
    part = obj.parts[0]
    # on-surface mesh points have ~zero distance
    verts, _ = superquadric_mesh(part.scale, part.eps1, part.eps2)
    world = verts @ part.rotation.T + part.translation
    d = part_distance(part, world)
    assert np.abs(d).max() < 0.02


def test_random_object_bounding_radius(rng):
    for seed in range(5):
        obj = random_object(np.random.default_rng(seed))
        r = obj.bounding_radius()
        for verts, _, _, _ in object_meshes(obj):
            assert np.linalg.norm(verts, axis=-1).max() <= r + 1e-6
        # json roundtrip preserves the implicit field
        clone = PartObject.from_json(obj.to_json())
        p = np.random.default_rng(seed).normal(size=(50, 3)) * 0.2
        np.testing.assert_array_equal(obj.distance(p), clone.distance(p))


def test_rasterizer_depth_ordering():
    # two unit quads at z = 2 (red) and z = 3 (blue): red must win
    def quad(z, color, pid):
        v = np.array([[-1, -1, z], [1, -1, z], [1, 1, z], [-1, 1, z]], float)
        f = np.array([[0, 1, 2], [0, 2, 3]])
        return TriangleGroup(v, f, color, True, pid)

    K = make_intrinsics(32, 40.0)
    cam = Camera(K, np.eye(4), 32, 32)
    res = rasterize([quad(2.0, (1.0, 0.0, 0.0), 1),
                     quad(3.0, (0.0, 0.0, 1.0), 2)], cam)
    c = res.rgb[16, 16]
    assert c[0] > 0.3 and c[2] < 0.1  # shaded red, not blue
    assert res.object_mask[16, 16]
    assert res.part_labels[16, 16] == 1


def test_rasterizer_background_is_white():
    K = make_intrinsics(16, 40.0)
    cam = Camera(K, np.eye(4), 16, 16)
    res = rasterize([], cam)
    np.testing.assert_array_equal(res.rgb, 1.0)
    assert not res.object_mask.any()
    assert (res.part_labels == 0).all()


def test_scene_masks_and_coverage():
    spec, sample = generate_scene_with_coverage(11, SMALL)
    V, H = SMALL.n_views, SMALL.resolution
    assert sample.rgb.shape == (V, H, H, 3)
    assert sample.mask.shape == (V, H, H)
    # occluded mask is a subset of the complete mask
    assert np.all((sample.mask > 0) <= (sample.mask_full > 0))
    # part labels appear only where the object is visible
    assert np.all((sample.parts > 0) == (sample.mask > 0))
    assert sample.covered_fractions().max() >= SMALL.min_covered_fraction
    # every view actually sees the object
    assert (sample.mask_full.reshape(V, -1).sum(axis=1) > 0).all()


def test_scene_hand_contacts_object():
    spec = generate_scene(11, SMALL)
    from occlumesh.hand import bone_segments, forward_kinematics
    jt = forward_kinematics(spec.skeleton, spec.hand_pose)
    segs = bone_segments(spec.skeleton, jt)
    d = spec.obj.distance(segs.reshape(-1, 3)).min()
    assert d < 0.05  # some bone endpoint is near the surface


def test_generation_is_deterministic():
    a = generate_scene(5, SMALL).to_json_bytes()
    b = generate_scene(5, SMALL).to_json_bytes()
    assert a == b
    sa = render_views(generate_scene(5, SMALL))
    sb = render_views(generate_scene(5, SMALL))
    np.testing.assert_array_equal(sa.rgb, sb.rgb)
    np.testing.assert_array_equal(sa.parts, sb.parts)


def test_write_scene_layout_and_meta_roundtrip(tmp_path):
    spec, sample = generate_scene_with_coverage(11, SMALL)
    d = tmp_path / "scene_000"
    write_scene(d, spec, sample)
    names = sorted(p.name for p in d.iterdir())
    assert "meta.json" in names and "object_gt.obj" in names
    for j in range(SMALL.n_views):
        for kind in ("rgb", "mask", "rgb_free", "mask_full", "parts"):
            assert f"v{j:02}_{kind}.png" in names
    meta = load_meta(d)
    assert meta.seed == spec.seed
    np.testing.assert_allclose(meta.norm_center, spec.norm_center)
    assert meta.resolution == SMALL.resolution
    np.testing.assert_allclose(meta.cameras[1].cam_to_world,
                               spec.cameras[1].cam_to_world)


def test_dataset_access_log_and_free_lockout(tiny_dataset):
    ds = SceneDataset(tiny_dataset, include_free=True)
    assert len(ds) == 2
    v = ds.scene(0).view(0)
    _ = v.rgb
    _ = v.rgb_free
    assert any("rgb_free" in p for p in ds.access_log)

    locked = SceneDataset(tiny_dataset, include_free=False)
    lv = locked.scene(0).view(0)
    _ = lv.rgb  # allowed
    _ = lv.mask
    with pytest.raises(PermissionError):
        _ = lv.rgb_free
    with pytest.raises(PermissionError):
        _ = lv.mask_full
    # denied reads never reach the log
    assert not any("rgb_free" in p or "mask_full" in p for p in locked.access_log)


def test_dataset_loaded_values(tiny_dataset):
    ds = SceneDataset(tiny_dataset)
    v = ds.scene(0).view(0)
    assert v.rgb.dtype == np.float64 and v.rgb.max() <= 1.0
    assert set(np.unique(v.mask)) <= {0.0, 1.0}
    assert np.all(v.mask <= v.mask_full)
    verts, faces, colors = ds.scene(0).gt_mesh()
    assert len(verts) > 0 and faces.max() < len(verts)


def test_dataset_requires_scenes(tmp_path):
    with pytest.raises(FileNotFoundError):
        SceneDataset(tmp_path)


def test_lookat_camera_centers_object():
    spec = generate_scene(4, SMALL)
    from occlumesh.camera import project_point
    for cam in spec.cameras:
        u, v, _z = project_point(cam, spec.norm_center[None])
        c = (SMALL.resolution - 1) / 2
        np.testing.assert_allclose([u[0], v[0]], [c, c], atol=1e-6)
