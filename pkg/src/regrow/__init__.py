"""Class-agnostic 3D point cloud instance segmentation by learned region growing."""

__version__ = "0.1.0"

from .pointcloud import PointCloud, load_scene, save_scene, export_colored_ply
from .features import SceneContext, build_context, compute_features
from .network import NetworkParams, Predictor, init_params, load_params, save_params
from .grow import segment_scene
from .search import SearchConfig

__all__ = [
    "PointCloud",
    "load_scene",
    "save_scene",
    "export_colored_ply",
    "SceneContext",
    "build_context",
    "compute_features",
    "NetworkParams",
    "Predictor",
    "init_params",
    "load_params",
    "save_params",
    "segment_scene",
    "SearchConfig",
]
