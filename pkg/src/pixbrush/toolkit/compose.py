"""Layering local texture edits on top of a base or existing texture."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .io import read_image


@dataclass(frozen=True)
class EditLayer:
    probability_map: np.ndarray  # (R, R) in [0, 1]
    rgb_map: np.ndarray  # (R, R, 3) in [0, 1]
    provenance: str = ""

    def __post_init__(self):
        p = np.asarray(self.probability_map, dtype=np.float64)
        rgb = np.asarray(self.rgb_map, dtype=np.float64)
        if p.ndim != 2 or rgb.shape != p.shape + (3,):
            raise ValueError(f"layer maps disagree: {p.shape} vs {rgb.shape}")
        if p.min() < 0 or p.max() > 1 or rgb.min() < 0 or rgb.max() > 1:
            raise ValueError("layer values must lie in [0, 1]")
        object.__setattr__(self, "probability_map", p)
        object.__setattr__(self, "rgb_map", rgb)


def composite_layers(base_texture, layers) -> np.ndarray:
    """Paint layers left to right: ``out = p * rgb + (1 - p) * out`` per texel."""
    out = np.array(base_texture, dtype=np.float64)
    for layer in layers:
        if layer.rgb_map.shape != out.shape:
            raise ValueError(f"layer resolution {layer.rgb_map.shape} != base {out.shape}")
        p = layer.probability_map[..., None]
        out = p * layer.rgb_map + (1 - p) * out
    return out


def overlay_on_existing(existing_texture, layer: EditLayer) -> np.ndarray:
    return composite_layers(existing_texture, [layer])


def load_layer(directory) -> EditLayer:
    """Load an exported edit (``texture.png`` + ``probability.png``) as an image-space layer."""
    d = Path(directory)
    rgb = read_image(d / "texture.png")
    p = read_image(d / "probability.png", gray=True)
    manifest = d / "manifest.txt"
    provenance = ""
    if manifest.is_file():
        for line in manifest.read_text().splitlines():
            if line.startswith("config_digest="):
                provenance = line.split("=", 1)[1]
    return EditLayer(p, rgb, provenance)
