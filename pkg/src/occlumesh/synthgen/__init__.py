from .objects import (PartObject, Part, capsule_mesh, random_object,
                      superquadric_mesh, union_surface_mesh)
from .rasterizer import RasterResult, TriangleGroup, rasterize
from .scenes import (GraspPlacementError, SceneConfig, SceneSample, SceneSpec,
                     generate_scene, generate_scene_with_coverage, render_views)
from .io import (Scene, SceneDataset, SceneView, load_meta, load_png, read_obj,
                 save_png, write_obj, write_scene)

__all__ = [
    "PartObject", "Part", "capsule_mesh", "random_object", "superquadric_mesh",
    "union_surface_mesh", "RasterResult", "TriangleGroup", "rasterize",
    "GraspPlacementError", "SceneConfig", "SceneSample", "SceneSpec",
    "generate_scene", "generate_scene_with_coverage", "render_views",
    "Scene", "SceneDataset", "SceneView", "load_meta", "load_png", "read_obj",
    "save_png", "write_obj", "write_scene",
]
