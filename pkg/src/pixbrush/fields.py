"""Neural localization and texture fields over surface points.

Each field is a Fourier-feature encoding followed by six blocks of
(linear, batch norm, ReLU) and a logistic head. Forward and backward passes
are written out explicitly so gradients are exact and bit-reproducible.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .geometry import SurfaceSampleSet

NUM_BLOCKS = 6
BN_EPS = 1e-5

HeadKind = Literal["probability", "rgb"]


@dataclass(frozen=True)
class EncodingSpec:
    num_frequencies: int = 6
    frequency_scale: float = 1.0
    seed: int = 0
    mode: Literal["axis", "gaussian"] = "axis"

    def __post_init__(self):
        if self.num_frequencies < 1:
            raise ValueError("at least one frequency is required")
        if not self.frequency_scale > 0:
            raise ValueError("frequency_scale must be positive")
        if self.mode not in ("axis", "gaussian"):
            raise ValueError(f"unknown encoding mode {self.mode!r}")

    @property
    def output_dim(self) -> int:
        if self.mode == "axis":
            return 2 * self.num_frequencies * 3
        return 2 * self.num_frequencies

    def frequency_matrix(self) -> np.ndarray:
        """(L, 3) matrix of frequency vectors, in cycles per unit length.

        Axis mode uses octaves ``scale * 2**k`` along each axis; gaussian mode
        draws entries from ``N(0, scale**2)`` with ``np.random.default_rng(seed)``.
        """
        L = self.num_frequencies
        if self.mode == "axis":
            return self.frequency_scale * 2.0 ** np.arange(L, dtype=np.float64)[:, None] * np.ones((1, 3))
        rng = np.random.default_rng(self.seed)
        return self.frequency_scale * rng.standard_normal((L, 3))


def fourier_encode(points, spec: EncodingSpec) -> np.ndarray:
    """Encode points as ``[sin(2 pi f.x), cos(2 pi f.x)]``.

    In axis mode every frequency is applied to each coordinate separately,
    giving ``2 * L * 3`` features ordered (frequency, axis); gaussian mode
    projects onto the sampled frequency vectors and gives ``2 * L``.
    """
    x = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite coordinates")
    B = spec.frequency_matrix()
    if spec.mode == "axis":
        proj = 2 * np.pi * (B[None, :, :] * x[:, None, :]).reshape(len(x), -1)
    else:
        proj = 2 * np.pi * x @ B.T
    return np.concatenate([np.sin(proj), np.cos(proj)], axis=1)


@dataclass
class Block:
    weight: np.ndarray
    bias: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray


@dataclass
class FieldParams:
    encoding: EncodingSpec
    blocks: list[Block]
    head_weight: np.ndarray
    head_bias: np.ndarray
    head_kind: HeadKind

    def arrays(self) -> list[np.ndarray]:
        """Trainable arrays in a fixed order; gradients are returned in the same order."""
        out = []
        for blk in self.blocks:
            out += [blk.weight, blk.bias, blk.gamma, blk.beta]
        return out + [self.head_weight, self.head_bias]

    def running_stats(self) -> list[np.ndarray]:
        out = []
        for blk in self.blocks:
            out += [blk.running_mean, blk.running_var]
        return out

    @property
    def out_dim(self) -> int:
        return 1 if self.head_kind == "probability" else 3

    def copy(self) -> "FieldParams":
        return copy.deepcopy(self)

    def update_running_stats(self, batch_stats, momentum: float = 0.1) -> None:
        for blk, (mean, var) in zip(self.blocks, batch_stats):
            blk.running_mean[...] = (1 - momentum) * blk.running_mean + momentum * mean
            blk.running_var[...] = (1 - momentum) * blk.running_var + momentum * var


def init_field_params(
    spec: EncodingSpec, head_kind: HeadKind, seed: int, width: int = 256
) -> FieldParams:
    if head_kind not in ("probability", "rgb"):
        raise ValueError(f"unknown head kind {head_kind!r}")
    rng = np.random.default_rng(seed)
    blocks = []
    fan_in = spec.output_dim
    for _ in range(NUM_BLOCKS):
        blocks.append(
            Block(
                weight=rng.standard_normal((fan_in, width)) * np.sqrt(2.0 / fan_in),
                bias=np.zeros(width),
                gamma=np.ones(width),
                beta=np.zeros(width),
                running_mean=np.zeros(width),
                running_var=np.ones(width),
            )
        )
        fan_in = width
    out_dim = 1 if head_kind == "probability" else 3
    # small head keeps initial outputs near logistic(0) = 0.5
    head_weight = rng.standard_normal((width, out_dim)) * (0.1 / np.sqrt(width))
    return FieldParams(spec, blocks, head_weight, np.zeros(out_dim), head_kind)


@dataclass
class ForwardCache:
    training: bool
    inputs: list = field(default_factory=list)  # per block: (h_in, zhat, inv_std, relu_mask)
    head_in: np.ndarray | None = None
    output: np.ndarray | None = None
    batch_stats: list = field(default_factory=list)


def field_forward(params: FieldParams, points, training: bool = False) -> tuple[np.ndarray, ForwardCache]:
    """Evaluate a field; returns ``(outputs (N, out_dim), cache)``.

    ``training=True`` normalizes with batch statistics and records them in
    ``cache.batch_stats`` (running statistics are NOT modified here).
    """
    h = fourier_encode(points, params.encoding)
    cache = ForwardCache(training=training)
    for blk in params.blocks:
        z = h @ blk.weight + blk.bias
        if training:
            if len(z) < 2:
                raise ValueError("batch statistics need at least 2 points")
            mean = z.mean(axis=0)
            var = z.var(axis=0)
            n = len(z)
            cache.batch_stats.append((mean, var * n / (n - 1)))
        else:
            mean, var = blk.running_mean, blk.running_var
        inv_std = 1.0 / np.sqrt(var + BN_EPS)
        zhat = (z - mean) * inv_std
        y = blk.gamma * zhat + blk.beta
        mask = y > 0
        cache.inputs.append((h, zhat, inv_std, mask))
        h = y * mask
    cache.head_in = h
    logits = h @ params.head_weight + params.head_bias
    out = 1.0 / (1.0 + np.exp(-logits))
    cache.output = out
    return out, cache


def field_backward(params: FieldParams, cache: ForwardCache, grad_out) -> list[np.ndarray]:
    """Gradients of ``sum(grad_out * outputs)`` w.r.t. ``params.arrays()``."""
    g = np.asarray(grad_out, dtype=np.float64).reshape(cache.output.shape)
    out = cache.output
    d_logits = g * out * (1 - out)
    grads_head = [cache.head_in.T @ d_logits, d_logits.sum(axis=0)]
    dh = d_logits @ params.head_weight.T

    grads: list[np.ndarray] = []
    for blk, (h_in, zhat, inv_std, mask) in zip(reversed(params.blocks), reversed(cache.inputs)):
        dy = dh * mask
        dgamma = (dy * zhat).sum(axis=0)
        dbeta = dy.sum(axis=0)
        dzhat = dy * blk.gamma
        if cache.training:
            n = len(dzhat)
            dz = inv_std / n * (n * dzhat - dzhat.sum(axis=0) - zhat * (dzhat * zhat).sum(axis=0))
        else:
            dz = dzhat * inv_std
        dW = h_in.T @ dz
        db = dz.sum(axis=0)
        grads = [dW, db, dgamma, dbeta] + grads
        dh = dz @ blk.weight.T
    return grads + grads_head


def _check_head(params: FieldParams, kind: str) -> None:
    if params.head_kind != kind:
        raise ValueError(f"expected a {kind} field, got {params.head_kind}")


def eval_localization(params: FieldParams, points, training: bool = False) -> np.ndarray:
    """Edit-membership probability per point, shape (N,)."""
    _check_head(params, "probability")
    out, _ = field_forward(params, points, training)
    return out[:, 0]


def eval_texture(params: FieldParams, points, training: bool = False) -> np.ndarray:
    """RGB color per point, shape (N, 3)."""
    _check_head(params, "rgb")
    out, _ = field_forward(params, points, training)
    return out


def scatter_to_map(values: np.ndarray, samples: SurfaceSampleSet) -> np.ndarray:
    """Place per-sample values into an R x R (x C) grid; uncovered texels are 0."""
    R = samples.resolution
    values = np.asarray(values)
    grid = np.zeros((R * R,) + values.shape[1:])
    grid[samples.flat_index] = values
    return grid.reshape((R, R) + values.shape[1:])


def gather_from_map(grid: np.ndarray, samples: SurfaceSampleSet) -> np.ndarray:
    R = samples.resolution
    return grid.reshape((R * R,) + grid.shape[2:])[samples.flat_index]


def extract_maps(
    loc_params: FieldParams, tex_params: FieldParams, samples: SurfaceSampleSet
) -> tuple[np.ndarray, np.ndarray]:
    """Bake both fields into texture maps using stored normalization statistics."""
    if len(samples) == 0:
        raise ValueError("no surface samples")
    p = eval_localization(loc_params, samples.points)
    rgb = eval_texture(tex_params, samples.points)
    return scatter_to_map(p, samples), scatter_to_map(rgb, samples)
