"""Compositing, export, metrics and the command line entry point."""

from .compose import EditLayer, composite_layers, load_layer, overlay_on_existing
from .metrics import HashEmbedder, HistogramEmbedder, mean_similarity, r_precision

__all__ = [
    "EditLayer",
    "composite_layers",
    "load_layer",
    "overlay_on_existing",
    "HashEmbedder",
    "HistogramEmbedder",
    "mean_similarity",
    "r_precision",
]
