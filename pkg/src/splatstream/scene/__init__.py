"""Scene ingestion and offline LoD tree construction."""

from .partition import SubtreePartition, partition_subtrees
from .ply import load_ply, save_ply
from .synthetic import SceneSpec, generate_synthetic_scene, random_gaussians
from .tree import (
    LodNode,
    LodTree,
    LodTreeBuilder,
    build_lod_tree,
    level_order_layout,
    load_tree,
    save_tree,
    tree_from_parents,
)

__all__ = [
    "LodNode", "LodTree", "LodTreeBuilder", "SceneSpec", "SubtreePartition",
    "build_lod_tree", "generate_synthetic_scene", "level_order_layout", "load_ply",
    "load_tree", "partition_subtrees", "random_gaussians", "save_ply", "save_tree",
    "tree_from_parents",
]
