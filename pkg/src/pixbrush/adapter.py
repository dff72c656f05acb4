"""Contract for plugging a real diffusion model in as a guidance backend.

A request is a JSON-serializable dict::

    {
      "image":           {"shape": [H, W, C], "dtype": "float32", "data": <base64>},
      "timestep":        t,
      "prompt":          "a cow with sunglasses",
      "reference_image": {...same layout...} | null,
      "image_weight":    w,
      "mask_pyramid":    {"<res>": {"shape": [res, res], "bits": <base64 packbits>}, ...} | null
    }

Arrays are row-major, little-endian, H x W x C. The response is
``{"noise": {...array layout...}}`` with the request image's shape. A backend
receiving a mask pyramid must apply ``CA_text + w * CA_image * M_l`` inside
every cross-attention layer, using the level whose resolution matches that
layer (see :func:`pixbrush.guidance.masked_ca`).
"""

from __future__ import annotations

import base64
import importlib
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .guidance import Condition, GuidanceError, MaskPyramid, NoiseSchedule, make_schedule


def encode_array(arr: np.ndarray, dtype: str = "float32") -> dict:
    a = np.ascontiguousarray(arr, dtype=np.dtype(dtype).newbyteorder("<"))
    return {"shape": list(a.shape), "dtype": dtype, "data": base64.b64encode(a.tobytes()).decode("ascii")}


def decode_array(payload: dict) -> np.ndarray:
    try:
        dtype = np.dtype(payload["dtype"]).newbyteorder("<")
        raw = base64.b64decode(payload["data"])
        arr = np.frombuffer(raw, dtype=dtype).reshape(payload["shape"])
    except (KeyError, TypeError, ValueError) as exc:
        raise GuidanceError(f"malformed array payload: {exc}") from exc
    return arr.astype(np.float64)


def encode_mask_pyramid(pyramid: MaskPyramid) -> dict:
    levels = {pyramid.full.shape[0]: pyramid.full, **pyramid.levels}
    out = {}
    for res, m in sorted(levels.items()):
        bits = np.packbits(np.asarray(m, dtype=np.uint8).ravel())
        out[str(res)] = {"shape": list(m.shape), "bits": base64.b64encode(bits.tobytes()).decode("ascii")}
    return out


def decode_mask_pyramid(payload: dict, threshold: float = 0.5) -> MaskPyramid:
    levels = {}
    for key, entry in payload.items():
        shape = tuple(entry["shape"])
        bits = np.frombuffer(base64.b64decode(entry["bits"]), dtype=np.uint8)
        levels[int(key)] = np.unpackbits(bits)[: shape[0] * shape[1]].reshape(shape)
    full_res = max(levels)
    full = levels[full_res]
    return MaskPyramid(full, {r: m for r, m in levels.items() if r != full_res}, threshold)


def build_request(z_t: np.ndarray, t: int, cond: Condition) -> dict:
    return {
        "image": encode_array(z_t),
        "timestep": int(t),
        "prompt": cond.prompt,
        "reference_image": None if cond.reference_image is None else encode_array(cond.reference_image),
        "image_weight": float(cond.image_weight),
        "mask_pyramid": None if cond.mask is None else encode_mask_pyramid(cond.mask),
    }


def parse_request(request: dict) -> tuple[np.ndarray, int, Condition]:
    """Server-side inverse of :func:`build_request`."""
    z_t = decode_array(request["image"])
    ref = request.get("reference_image")
    mask = request.get("mask_pyramid")
    cond = Condition(
        request["prompt"],
        None if ref is None else decode_array(ref),
        None if mask is None else decode_mask_pyramid(mask),
        request.get("image_weight", 1.0),
    )
    return z_t, int(request["timestep"]), cond


@dataclass
class ExternalBackend:
    """Guidance backend that forwards requests to ``transport`` (e.g. an RPC call)."""

    transport: Callable[[dict], dict]
    feature_resolutions: Sequence[int] = ()
    schedule: NoiseSchedule | None = None
    reentrant: bool = False

    def __post_init__(self):
        if self.schedule is None:
            self.schedule = make_schedule()

    def predict_noise(self, z_t: np.ndarray, t: int, cond: Condition) -> np.ndarray:
        response = self.transport(build_request(z_t, t, cond))
        if not isinstance(response, dict) or "noise" not in response:
            raise GuidanceError("backend response lacks a 'noise' field")
        noise = decode_array(response["noise"])
        if noise.shape != np.shape(z_t):
            raise GuidanceError(f"backend returned shape {noise.shape}, expected {np.shape(z_t)}")
        return noise


def load_external_backend(target: str, config=None):
    """Resolve ``"package.module:factory"``; the factory gets the config.

    It may return one backend (used for both guidance roles) or a
    ``(localization_backend, image_backend)`` pair.
    """
    module_name, _, attr = target.partition(":")
    if not module_name or not attr:
        raise ValueError(f"external backend must look like 'module:factory', got {target!r}")
    factory = getattr(importlib.import_module(module_name), attr)
    made = factory(config) if callable(factory) else factory
    if isinstance(made, tuple):
        if len(made) != 2:
            raise ValueError("backend factory must return one backend or a (loc, image) pair")
        return made
    return made, made
