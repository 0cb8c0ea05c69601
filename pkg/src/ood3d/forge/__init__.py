from .generate import (
    ForgeConfig,
    ForgeMethod,
    forge_gaussian,
    forge_inject,
    forge_pointmixup,
    forge_resize,
    forge_topk,
    grid_sample,
    match_point_sets,
    mix_point_sets,
    resize_object,
    sample_resize_factors,
    scan_bounds,
    scan_rng,
    topk_indices,
)
from .meshes import Mesh, default_mesh_bank, load_mesh_dir, normalize_unit, read_off, sample_surface, write_off

__all__ = [
    "ForgeConfig",
    "ForgeMethod",
    "Mesh",
    "default_mesh_bank",
    "forge_gaussian",
    "forge_inject",
    "forge_pointmixup",
    "forge_resize",
    "forge_topk",
    "grid_sample",
    "load_mesh_dir",
    "match_point_sets",
    "mix_point_sets",
    "normalize_unit",
    "read_off",
    "resize_object",
    "sample_resize_factors",
    "sample_surface",
    "scan_bounds",
    "scan_rng",
    "topk_indices",
    "write_off",
]
