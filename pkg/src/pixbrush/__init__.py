"""Image-driven local texture editing on meshes via localization-masked score distillation."""

from .config import TrainConfig, localization_prompt
from .geometry import Mesh, SurfaceSampleSet, invert_uv, load_mesh, normalize_unit

__version__ = "0.1.0"

__all__ = [
    "Mesh",
    "SurfaceSampleSet",
    "TrainConfig",
    "invert_uv",
    "load_mesh",
    "localization_prompt",
    "normalize_unit",
]
