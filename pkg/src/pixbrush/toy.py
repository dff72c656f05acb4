"""The deterministic desk-scale toy experiment.

A flat square faces a fixed camera, so the whole frame is covered and every
quantity can be compared in image space against a known square edit region
``M*``:

* the localization backend's text-only belief is a soft (blurred) version of
  ``M*`` -- a coarse placement, like a text prompt gives;
* the reference image shows the edit object's appearance inside ``M*`` on a
  white photo background;
* the image backend's text-only belief is the bare base gray, so with the
  localization mask the image target is ``M*`` dressed in the reference and
  gray elsewhere, while unmasked guidance also imposes the white background.

Image guidance reinforces whichever mask it is given, so a poor starting
localization stays poor; the warm-up is what puts the mask in the right place.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .config import TrainConfig
from .fields import extract_maps, field_forward, scatter_to_map
from .geometry import unit_square_mesh
from .guidance import ToyBackend, ToyTargets, make_schedule
from .render import CameraPose, lookup, render_probability
from .trainer import RunResult, TrainState, make_context, run

CAMERA = CameraPose(elevation=0.0, azimuth=0.0, radius=1.5)
BOX = (18, 42, 22, 46)  # rows [r0, r1), cols [c0, c1) of the 64 x 64 frame
TEXT_BLUR = 1.5


def toy_config(**overrides) -> TrainConfig:
    base = dict(
        warmup_iters=300,
        joint_iters=1000,
        texture_resolution=128,
        render_resolution=64,
        elevation_lo=CAMERA.elevation,
        elevation_hi=CAMERA.elevation,
        azimuth_lo=CAMERA.azimuth,
        azimuth_hi=CAMERA.azimuth,
        radius_lo=CAMERA.radius,
        radius_hi=CAMERA.radius,
        prompt="a square with a patch",
        learning_rate=1e-3,
        hidden_width=32,
        num_frequencies=4,
        loc_loss_weight_joint=0.25,
        # differs from the untrained texture output (0.5) so image guidance can move p
        base_gray=0.3,
        seed=0,
    )
    base.update(overrides)
    return TrainConfig(**base)


def box_mask(resolution: int = 64, box=BOX) -> np.ndarray:
    scale = resolution / 64
    r0, r1, c0, c1 = (int(round(b * scale)) for b in box)
    m = np.zeros((resolution, resolution), dtype=bool)
    m[r0:r1, c0:c1] = True
    return m


def disk_mask(resolution: int = 64, center=(32.0, 32.0), radius: float = 14.0) -> np.ndarray:
    rr, cc = np.mgrid[:resolution, :resolution] + 0.5
    return (rr - center[0]) ** 2 + (cc - center[1]) ** 2 <= radius**2


def object_appearance(resolution: int = 64) -> np.ndarray:
    """Smooth two-axis color ramp: the edit object's look."""
    t = (np.arange(resolution) + 0.5) / resolution
    yy, xx = np.meshgrid(t, t, indexing="ij")
    return np.stack([0.15 + 0.7 * xx, 0.25 + 0.2 * yy, 0.85 - 0.6 * yy], axis=-1)


def reference_image(resolution: int = 64, region: np.ndarray | None = None) -> np.ndarray:
    region = box_mask(resolution) if region is None else region
    return np.where(region[..., None], object_appearance(resolution), 1.0)


def text_target(region: np.ndarray, blur: float = TEXT_BLUR) -> np.ndarray:
    return gaussian_filter(region.astype(np.float64), blur, mode="constant")


@dataclass
class ToyScene:
    config: TrainConfig
    region: np.ndarray  # M*, (H, W) bool
    reference: np.ndarray
    loc_target: np.ndarray
    backends: tuple = field(repr=False, default=None)

    def context(self):
        mesh = unit_square_mesh(2.0)
        return make_context(self.config, mesh, self.backends, self.reference)


def make_scene(config: TrainConfig | None = None, loc_target: np.ndarray | None = None) -> ToyScene:
    config = config or toy_config()
    res = config.render_resolution
    region = box_mask(res)
    ref = reference_image(res, region)
    loc_target = text_target(region) if loc_target is None else loc_target
    schedule = make_schedule(config.schedule_T, config.beta_lo, config.beta_hi)
    backends = (
        ToyBackend(ToyTargets(loc_target), schedule),
        ToyBackend(ToyTargets(config.base_gray), schedule, (res,)),
    )
    return ToyScene(config, region, ref, loc_target, backends)


def iou(a: np.ndarray, b: np.ndarray) -> float:
    a, b = a.astype(bool), b.astype(bool)
    union = (a | b).sum()
    return float((a & b).sum() / union) if union else 1.0


@dataclass
class ToyOutcome:
    iou: float
    texture_mse: float
    state: TrainState
    probability_map: np.ndarray
    rgb_map: np.ndarray


def evaluate(scene: ToyScene, ctx, p_map: np.ndarray, rgb_map: np.ndarray) -> tuple[float, float]:
    """IoU of the thresholded probability render with M*, and texture MSE inside M*."""
    buffers = ctx.buffers(CAMERA)
    prob = render_probability(buffers, p_map, 0.0)
    mask = (prob >= scene.config.mask_threshold) & buffers.coverage
    t_hat = lookup(buffers, rgb_map)
    err = ((t_hat - scene.reference) ** 2)[scene.region].mean()
    return iou(mask, scene.region), float(err)


def run_toy(scene: ToyScene | None = None, **config_overrides) -> ToyOutcome:
    if scene is None:
        scene = make_scene(toy_config(**config_overrides))
    ctx = scene.context()
    result: RunResult = run(scene.config, None, context=ctx)
    score, err = evaluate(scene, ctx, result.probability_map, result.rgb_map)
    return ToyOutcome(score, err, result.state, result.probability_map, result.rgb_map)


def training_maps(state: TrainState, ctx) -> tuple[np.ndarray, np.ndarray]:
    """Maps as seen during optimization (batch statistics), for diagnostics."""
    p, _ = field_forward(state.loc, ctx.samples.points, training=True)
    rgb, _ = field_forward(state.tex, ctx.samples.points, training=True)
    return scatter_to_map(p[:, 0], ctx.samples), scatter_to_map(rgb, ctx.samples)


__all__ = [
    "CAMERA",
    "ToyScene",
    "ToyOutcome",
    "box_mask",
    "disk_mask",
    "evaluate",
    "extract_maps",
    "iou",
    "make_scene",
    "reference_image",
    "run_toy",
    "text_target",
    "toy_config",
    "training_maps",
]
