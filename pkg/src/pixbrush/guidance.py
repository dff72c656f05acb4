"""Score-distillation guidance.

Implements the SDS gradient ``w(t) * (eps_hat - eps)`` for text, text+image
and localization-masked text+image conditions, the decoupled cross-attention
combination ``CA_text + w * CA_image`` and its masked form
``CA_text + w * CA_image * M_l``, the per-layer mask pyramid, and a
deterministic pixel-space toy backend whose noise prediction makes every
gradient available in closed form.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence, runtime_checkable

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 0.5
DEFAULT_T_RANGE = (20, 980)


class GuidanceError(RuntimeError):
    """Backend failure or a non-finite guidance gradient."""


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)

    def alpha_bar(self, t: int) -> float:
        """Cumulative product for a 1-based timestep."""
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [1, {self.T}]")
        return float(self.alpha_bars[t - 1])


def make_schedule(T: int = 1000, beta_lo: float = 1e-4, beta_hi: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0 < beta_lo <= beta_hi < 1:
        raise ValueError(f"invalid beta range [{beta_lo}, {beta_hi}]")
    betas = np.linspace(beta_lo, beta_hi, T) if T > 1 else np.array([beta_lo])
    return NoiseSchedule(betas, np.cumprod(1.0 - betas))


def add_noise(x, t: int, eps, schedule: NoiseSchedule) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x.shape != eps.shape:
        raise ValueError(f"noise shape {eps.shape} != image shape {x.shape}")
    a = schedule.alpha_bar(t)
    return np.sqrt(a) * x + np.sqrt(1 - a) * eps


def constant_weight(t: int, schedule: NoiseSchedule) -> float:
    return 1.0


def one_minus_alpha_bar_weight(t: int, schedule: NoiseSchedule) -> float:
    return 1.0 - schedule.alpha_bar(t)


WEIGHT_FUNCTIONS: dict[str, Callable[[int, NoiseSchedule], float]] = {
    "constant": constant_weight,
    "one_minus_alpha_bar": one_minus_alpha_bar_weight,
}


def combine_ca(ca_text, ca_image, w: float) -> np.ndarray:
    ca_text = np.asarray(ca_text, dtype=np.float64)
    ca_image = np.asarray(ca_image, dtype=np.float64)
    if ca_text.shape != ca_image.shape:
        raise ValueError(f"feature shapes differ: {ca_text.shape} vs {ca_image.shape}")
    return ca_text + w * ca_image


def masked_ca(ca_text, ca_image, w: float, mask_level) -> np.ndarray:
    """Image-branch features are kept only where the mask level is 1.

    Features are laid out ``(H, W, C)`` (or ``(H, W)``); the ``(h, w)`` mask
    must match the spatial resolution and is broadcast across channels.
    Masked-out positions carry ``ca_text`` exactly.
    """
    ca_text = np.asarray(ca_text, dtype=np.float64)
    ca_image = np.asarray(ca_image, dtype=np.float64)
    if ca_text.shape != ca_image.shape:
        raise ValueError(f"feature shapes differ: {ca_text.shape} vs {ca_image.shape}")
    m = np.asarray(mask_level)
    if m.shape != ca_text.shape[:2]:
        raise ValueError(f"mask resolution {m.shape} != feature resolution {ca_text.shape[:2]}")
    m = m.astype(bool)
    if ca_text.ndim == 3:
        m = m[..., None]
    return np.where(m, ca_text + w * ca_image, ca_text)


@dataclass(frozen=True)
class MaskPyramid:
    full: np.ndarray  # (H, W) uint8 in {0, 1}
    levels: dict[int, np.ndarray]
    threshold: float

    def level(self, resolution: int) -> np.ndarray:
        if resolution == self.full.shape[0]:
            return self.levels.get(resolution, self.full)
        try:
            return self.levels[resolution]
        except KeyError:
            raise KeyError(f"mask pyramid has no level at resolution {resolution}") from None

    @property
    def coverage(self) -> float:
        return float(self.full.mean())


def downsample_mask(full: np.ndarray, resolution: int) -> np.ndarray:
    """Area-average a binary mask to ``resolution`` and re-threshold at 0.5 (ties -> 1)."""
    H, W = full.shape
    if resolution < 1 or H % resolution or W % resolution:
        raise ValueError(f"level resolution {resolution} does not divide mask size {full.shape}")
    avg = full.reshape(resolution, H // resolution, resolution, W // resolution).mean(axis=(1, 3))
    return (avg >= 0.5).astype(np.uint8)


def build_mask_pyramid(
    probability_render, threshold: float = DEFAULT_THRESHOLD, level_resolutions: Sequence[int] = ()
) -> MaskPyramid:
    render = np.asarray(probability_render, dtype=np.float64)
    if render.ndim != 2 or render.shape[0] != render.shape[1]:
        raise ValueError("probability render must be a square H x W image")
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    full = (render >= threshold).astype(np.uint8)
    levels = {int(r): downsample_mask(full, int(r)) for r in level_resolutions}
    return MaskPyramid(full, levels, threshold)


@dataclass(frozen=True)
class Condition:
    """Guidance condition: text only, text + image, or text + image + mask."""

    prompt: str
    reference_image: np.ndarray | None = None
    mask: MaskPyramid | None = None
    image_weight: float = 1.0

    def __post_init__(self):
        if self.mask is not None and self.reference_image is None:
            raise ValueError("a mask requires a reference image")
        if self.image_weight < 0:
            raise ValueError("image_weight must be >= 0")

    @property
    def kind(self) -> str:
        if self.reference_image is None:
            return "text"
        return "text+image" if self.mask is None else "text+image+mask"


@dataclass(frozen=True)
class GuidanceGradient:
    grad: np.ndarray
    t: int
    weight: float
    grad_norm: float
    mask_coverage: float | None = None


@runtime_checkable
class GuidanceBackend(Protocol):
    """A noise predictor used for score distillation.

    ``feature_resolutions`` lists the spatial sizes of the attention layers the
    backend masks; ``schedule`` is the noise schedule it was trained with.
    """

    feature_resolutions: Sequence[int]
    schedule: NoiseSchedule

    def predict_noise(self, z_t: np.ndarray, t: int, cond: Condition) -> np.ndarray: ...


def prompt_color(prompt: str) -> np.ndarray:
    """Flat RGB color for a prompt: the first three bytes of its SHA-256 digest / 255."""
    digest = hashlib.sha256(prompt.encode("utf-8")).digest()
    return np.frombuffer(digest[:3], dtype=np.uint8).astype(np.float64) / 255.0


def resize_image(image: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Area/nearest resize on a regular grid (exact when sizes are equal)."""
    image = np.asarray(image, dtype=np.float64)
    H, W = shape
    h, w = image.shape[:2]
    if (h, w) == (H, W):
        return image.copy()
    if h % H == 0 and w % W == 0:
        return image.reshape(H, h // H, W, w // W, *image.shape[2:]).mean(axis=(1, 3))
    rows = np.minimum(((np.arange(H) + 0.5) * h / H).astype(int), h - 1)
    cols = np.minimum(((np.arange(W) + 0.5) * w / W).astype(int), w - 1)
    return image[rows][:, cols]


@dataclass
class ToyTargets:
    """What the toy backend "believes" the denoised image should be.

    ``text_target`` overrides the flat prompt color used for the text-only
    condition; it may be an H x W (x C) image or a scalar/RGB value.
    """

    text_target: np.ndarray | float | None = None

    def text_image(self, prompt: str, shape: tuple[int, ...]) -> np.ndarray:
        if self.text_target is None:
            value = prompt_color(prompt)
            if len(shape) == 2:
                value = value.mean()
            elif shape[2] != 3:
                value = np.full(shape[2], value.mean())
            return np.broadcast_to(value, shape).astype(np.float64)
        target = np.asarray(self.text_target, dtype=np.float64)
        if target.ndim >= 2:
            target = resize_image(target, shape[:2])
            if len(shape) == 3 and target.ndim == 2:
                target = target[..., None]
        return np.broadcast_to(target, shape).astype(np.float64)

    def target_image(self, cond: Condition, shape: tuple[int, ...]) -> np.ndarray:
        text = self.text_image(cond.prompt, shape)
        if cond.reference_image is None:
            return text
        ref = resize_image(cond.reference_image, shape[:2])
        if len(shape) == 2 and ref.ndim == 3:
            ref = ref.mean(axis=-1)
        ref = np.broadcast_to(ref, shape)
        # equals combine_ca / masked_ca with CA_text = text and CA_image = ref - text,
        # written as a blend so that w = 1 reproduces the reference bit-exactly
        w = cond.image_weight
        blended = (1.0 - w) * text + w * ref
        if cond.mask is None:
            return blended
        m = cond.mask.level(shape[0]).astype(bool)
        if len(shape) == 3:
            m = m[..., None]
        return np.where(m, blended, text)


def toy_predict_noise(z_t, t: int, cond: Condition, schedule: NoiseSchedule, toy_targets: ToyTargets) -> np.ndarray:
    """``(z_t - sqrt(abar) * target) / sqrt(1 - abar)``: the exact noise if the clean image were the target."""
    z_t = np.asarray(z_t, dtype=np.float64)
    a = schedule.alpha_bar(t)
    if 1 - a < 1e-8:
        raise GuidanceError(f"timestep {t} too close to the clean end (1 - alpha_bar = {1 - a:.2e})")
    target = toy_targets.target_image(cond, z_t.shape)
    return (z_t - np.sqrt(a) * target) / np.sqrt(1 - a)


@dataclass
class ToyBackend:
    """Deterministic, reentrant stand-in for a pretrained diffusion model."""

    targets: ToyTargets = field(default_factory=ToyTargets)
    schedule: NoiseSchedule = field(default_factory=make_schedule)
    feature_resolutions: Sequence[int] = ()
    reentrant: bool = True

    def predict_noise(self, z_t: np.ndarray, t: int, cond: Condition) -> np.ndarray:
        return toy_predict_noise(z_t, t, cond, self.schedule, self.targets)


def sample_timestep(rng: np.random.Generator, t_range: tuple[int, int] = DEFAULT_T_RANGE) -> int:
    lo, hi = t_range
    if not 1 <= lo <= hi:
        raise ValueError(f"invalid timestep range {t_range}")
    return int(rng.integers(lo, hi + 1))


def sds_grad(
    backend: GuidanceBackend,
    x,
    cond: Condition,
    t: int,
    eps,
    schedule: NoiseSchedule | None = None,
    weight_fn: Callable[[int, NoiseSchedule], float] = constant_weight,
) -> GuidanceGradient:
    """Score-distillation gradient on a rendered image ``x``."""
    schedule = schedule or backend.schedule
    x = np.asarray(x, dtype=np.float64)
    z_t = add_noise(x, t, eps, schedule)
    try:
        eps_hat = np.asarray(backend.predict_noise(z_t, t, cond), dtype=np.float64)
    except GuidanceError:
        raise
    except Exception as exc:
        raise GuidanceError(f"backend failed: {exc}") from exc
    if eps_hat.shape != x.shape:
        raise GuidanceError(f"backend returned shape {eps_hat.shape}, expected {x.shape}")
    w = float(weight_fn(t, schedule))
    grad = w * (eps_hat - np.asarray(eps, dtype=np.float64))
    if not np.all(np.isfinite(grad)):
        raise GuidanceError("non-finite guidance gradient")
    coverage = cond.mask.coverage if cond.mask is not None else None
    return GuidanceGradient(grad, t, w, float(np.linalg.norm(grad)), coverage)
