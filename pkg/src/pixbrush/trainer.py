"""Two-phase optimization: text-only localization warm-up, then joint
localization + texture optimization with localization-masked image guidance.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .config import TrainConfig
from .fields import (
    EncodingSpec,
    FieldParams,
    extract_maps,
    field_backward,
    field_forward,
    gather_from_map,
    init_field_params,
    scatter_to_map,
)
from .geometry import Mesh, SurfaceSampleSet, invert_uv, normalize_unit
from .guidance import (
    WEIGHT_FUNCTIONS,
    Condition,
    GuidanceBackend,
    GuidanceError,
    ToyBackend,
    ToyTargets,
    build_mask_pyramid,
    make_schedule,
    sample_timestep,
    sds_grad,
)
from .render import (
    CameraPose,
    RenderBuffers,
    probability_backward,
    rasterize,
    render_backward,
    render_local_texture,
    render_probability,
    sample_camera,
)

logger = logging.getLogger(__name__)

PHASES = ("warmup", "joint", "done")


class TrainingError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, arrays) -> "AdamState":
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays])

    def update(self, params: list[np.ndarray], grads: list[np.ndarray], lr, beta1, beta2, eps) -> None:
        self.step += 1
        c1 = 1 - beta1**self.step
        c2 = 1 - beta2**self.step
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= beta1
            m += (1 - beta1) * g
            v *= beta2
            v += (1 - beta2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


@dataclass
class TrainState:
    iteration: int
    phase: str
    loc: FieldParams
    tex: FieldParams
    opt_loc: AdamState
    opt_tex: AdamState
    rng: np.random.Generator
    history: list[dict] = field(default_factory=list)
    consecutive_failures: int = 0
    config_digest: str = ""

    def advance_phase(self, new_phase: str) -> None:
        if PHASES.index(new_phase) < PHASES.index(self.phase):
            raise TrainingError(f"illegal phase transition {self.phase} -> {new_phase}")
        self.phase = new_phase


@dataclass
class TrainContext:
    """Everything a step reads but never mutates."""

    config: TrainConfig
    mesh: Mesh
    samples: SurfaceSampleSet
    loc_backend: GuidanceBackend
    image_backend: GuidanceBackend
    reference_image: np.ndarray | None
    base_appearance: np.ndarray | float
    weight_fn: Callable
    _raster_cache: OrderedDict = field(default_factory=OrderedDict, repr=False)

    @property
    def prompt(self) -> str:
        return self.config.text_prompt()

    def buffers(self, camera: CameraPose) -> RenderBuffers:
        cached = self._raster_cache.get(camera)
        if cached is None:
            cached = rasterize(
                self.mesh, camera, self.config.render_resolution, self.config.texture_resolution
            )
            self._raster_cache[camera] = cached
            if len(self._raster_cache) > 16:
                self._raster_cache.popitem(last=False)
        return cached


def init_state(config: TrainConfig) -> TrainState:
    seq = np.random.SeedSequence(config.seed)
    loc_seed, tex_seed, rng_seed = (int(s.generate_state(1)[0]) for s in seq.spawn(3))
    spec = config.encoding_spec()
    loc = init_field_params(spec, "probability", loc_seed, config.hidden_width)
    tex = init_field_params(spec, "rgb", tex_seed, config.hidden_width)
    phase = "warmup"
    if config.no_warmup or config.no_loc_loss or config.warmup_iters == 0:
        phase = "joint" if config.joint_iters > 0 else "done"
    return TrainState(
        iteration=0,
        phase=phase,
        loc=loc,
        tex=tex,
        opt_loc=AdamState.zeros_like(loc.arrays()),
        opt_tex=AdamState.zeros_like(tex.arrays()),
        rng=np.random.default_rng(rng_seed),
        config_digest=config.digest(),
    )


def default_backends(config: TrainConfig) -> tuple[GuidanceBackend, GuidanceBackend]:
    """Localization and image guidance backends chosen by the config."""
    schedule = make_schedule(config.schedule_T, config.beta_lo, config.beta_hi)
    if config.backend == "toy":
        from .toolkit.io import read_image

        loc_target = read_image(config.toy_loc_target, gray=True) if config.toy_loc_target else None
        loc = ToyBackend(ToyTargets(loc_target), schedule)
        # a bare mesh under text-only image guidance should look like its base
        image = ToyBackend(ToyTargets(config.base_gray), schedule, (config.render_resolution,))
        return loc, image
    from .adapter import load_external_backend

    return load_external_backend(config.external_backend, config)


def make_context(
    config: TrainConfig,
    mesh: Mesh,
    backends: tuple[GuidanceBackend, GuidanceBackend] | None = None,
    reference_image: np.ndarray | None = None,
    base_appearance=None,
) -> TrainContext:
    from .toolkit.io import read_image, read_texture

    mesh = normalize_unit(mesh)
    samples = invert_uv(mesh, config.texture_resolution)
    if len(samples) < 2:
        raise TrainingError("mesh UVs cover fewer than 2 texels at this texture resolution")
    loc_backend, image_backend = backends or default_backends(config)
    if reference_image is None and config.reference_image:
        reference_image = read_image(config.reference_image)
    if base_appearance is None:
        if config.base_texture:
            base_appearance = read_texture(config.base_texture, config.texture_resolution)
        else:
            base_appearance = config.base_gray
    if config.weight_fn not in WEIGHT_FUNCTIONS:
        raise TrainingError(f"unknown weight function {config.weight_fn!r}")
    return TrainContext(
        config, mesh, samples, loc_backend, image_backend, reference_image, base_appearance,
        WEIGHT_FUNCTIONS[config.weight_fn],
    )


def _adam(state_opt: AdamState, params: FieldParams, grads, cfg: TrainConfig) -> None:
    state_opt.update(params.arrays(), grads, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)


def _residual(backend, x, cond) -> float | None:
    targets = getattr(backend, "targets", None)
    if not isinstance(targets, ToyTargets):
        return None
    return float(np.mean((x - targets.target_image(cond, x.shape)) ** 2))


def _guidance(backend, x, cond, state: TrainState, ctx: TrainContext):
    cfg = ctx.config
    t = sample_timestep(state.rng, (cfg.t_min, cfg.t_max))
    eps = state.rng.standard_normal(x.shape)
    return sds_grad(backend, x, cond, t, eps, backend.schedule, ctx.weight_fn)


def _record_failure(state: TrainState, ctx: TrainContext, exc: Exception, metrics: dict) -> dict:
    state.consecutive_failures += 1
    metrics["skipped"] = str(exc)
    logger.warning("step %d skipped: %s", state.iteration, exc)
    if state.consecutive_failures >= ctx.config.failure_budget:
        raise TrainingError(
            f"{state.consecutive_failures} consecutive failed steps (budget {ctx.config.failure_budget})"
        ) from exc
    return metrics


def _finish_step(state: TrainState, ctx: TrainContext, metrics: dict) -> dict:
    cfg = ctx.config
    state.iteration += 1
    state.history.append(metrics)
    if state.phase == "warmup" and state.iteration >= cfg.warmup_iters:
        state.advance_phase("joint" if cfg.joint_iters > 0 else "done")
    elif state.phase == "joint" and state.iteration >= _total_iters(cfg):
        state.advance_phase("done")
    return metrics


def _total_iters(cfg: TrainConfig) -> int:
    skip_warmup = cfg.no_warmup or cfg.no_loc_loss
    return (0 if skip_warmup else cfg.warmup_iters) + cfg.joint_iters


def warmup_step(state: TrainState, ctx: TrainContext) -> dict:
    """One text-only localization step; the texture field is not touched."""
    cfg = ctx.config
    if cfg.no_loc_loss:
        if state.phase == "warmup":
            state.advance_phase("joint" if cfg.joint_iters > 0 else "done")
        return {}
    if state.phase != "warmup":
        raise TrainingError(f"warmup_step called in phase {state.phase!r}")
    metrics = {"iteration": state.iteration, "phase": "warmup"}
    camera = sample_camera(state.rng, cfg.view_config())
    buffers = ctx.buffers(camera)
    p, cache = field_forward(state.loc, ctx.samples.points, training=True)
    p_map = scatter_to_map(p[:, 0], ctx.samples)
    x = render_probability(buffers, p_map, cfg.background)
    cond = Condition(ctx.prompt)
    try:
        g = _guidance(ctx.loc_backend, x, cond, state, ctx)
    except GuidanceError as exc:
        return _finish_step(state, ctx, _record_failure(state, ctx, exc, metrics))
    state.consecutive_failures = 0
    grad_map = probability_backward(buffers, g.grad)
    grads = field_backward(state.loc, cache, gather_from_map(grad_map, ctx.samples)[:, None])
    _adam(state.opt_loc, state.loc, grads, cfg)
    state.loc.update_running_stats(cache.batch_stats, cfg.bn_momentum)
    metrics.update(t=g.t, loc_grad_norm=g.grad_norm)
    residual = _residual(ctx.loc_backend, x, cond)
    if residual is not None:
        metrics["loc_residual"] = residual
        metrics["loss"] = residual
    return _finish_step(state, ctx, metrics)


def joint_step(state: TrainState, ctx: TrainContext) -> dict:
    """One joint step: text localization loss plus masked image guidance.

    The image gradient reaches the localization field through the matting
    blend (``dc/dp = t - b``) as well as the texture field.
    """
    cfg = ctx.config
    if state.phase != "joint":
        raise TrainingError(f"joint_step called in phase {state.phase!r}")
    if ctx.reference_image is None:
        raise TrainingError("joint optimization needs a reference image")
    metrics = {"iteration": state.iteration, "phase": "joint"}
    camera = sample_camera(state.rng, cfg.view_config())
    buffers = ctx.buffers(camera)

    p, loc_cache = field_forward(state.loc, ctx.samples.points, training=True)
    rgb, tex_cache = field_forward(state.tex, ctx.samples.points, training=True)
    p_map = scatter_to_map(p[:, 0], ctx.samples)
    rgb_map = scatter_to_map(rgb, ctx.samples)
    x_prob = render_probability(buffers, p_map, cfg.background)

    pyramid = None
    if not cfg.no_ca_mask:
        # the mask is built from this step's render; background never counts as edit region
        pyramid = build_mask_pyramid(
            np.where(buffers.coverage, x_prob, 0.0), cfg.mask_threshold, ctx.image_backend.feature_resolutions
        )
    record = render_local_texture(buffers, p_map, rgb_map, ctx.base_appearance, cfg.background, cfg.shade_base)
    text_cond = Condition(ctx.prompt)
    image_cond = Condition(ctx.prompt, ctx.reference_image, pyramid, cfg.image_weight)

    try:
        g_loc = None
        if not cfg.no_loc_loss:
            g_loc = _guidance(ctx.loc_backend, x_prob, text_cond, state, ctx)
        g_img = _guidance(ctx.image_backend, record.image, image_cond, state, ctx)
    except GuidanceError as exc:
        return _finish_step(state, ctx, _record_failure(state, ctx, exc, metrics))
    state.consecutive_failures = 0

    grad_p_img, grad_rgb = render_backward(buffers, g_img.grad, record)
    grad_p = grad_p_img
    if g_loc is not None:
        grad_p = grad_p + cfg.loc_loss_weight_joint * probability_backward(buffers, g_loc.grad)
    loc_grads = field_backward(state.loc, loc_cache, gather_from_map(grad_p, ctx.samples)[:, None])
    tex_grads = field_backward(state.tex, tex_cache, gather_from_map(grad_rgb, ctx.samples))
    _adam(state.opt_loc, state.loc, loc_grads, cfg)
    _adam(state.opt_tex, state.tex, tex_grads, cfg)
    state.loc.update_running_stats(loc_cache.batch_stats, cfg.bn_momentum)
    state.tex.update_running_stats(tex_cache.batch_stats, cfg.bn_momentum)

    metrics.update(t=g_img.t, image_grad_norm=g_img.grad_norm, mask_coverage=g_img.mask_coverage)
    loss = 0.0
    res_img = _residual(ctx.image_backend, record.image, image_cond)
    if res_img is not None:
        metrics["image_residual"] = res_img
        loss += res_img
    if g_loc is not None:
        metrics["loc_grad_norm"] = g_loc.grad_norm
        res_loc = _residual(ctx.loc_backend, x_prob, text_cond)
        if res_loc is not None:
            metrics["loc_residual"] = res_loc
            loss += cfg.loc_loss_weight_joint * res_loc
    if res_img is not None:
        metrics["loss"] = loss
    return _finish_step(state, ctx, metrics)


@dataclass
class RunResult:
    state: TrainState
    probability_map: np.ndarray
    rgb_map: np.ndarray
    files: dict[str, Path] = field(default_factory=dict)


def run(
    config: TrainConfig,
    mesh: Mesh,
    out_dir=None,
    *,
    context: TrainContext | None = None,
    state: TrainState | None = None,
    stop_at: int | None = None,
    checkpoint_dir=None,
) -> RunResult:
    """Run warm-up then joint optimization to completion (or to ``stop_at``).

    Pass a ``state`` from :func:`load_checkpoint` to resume. Checkpoints are
    written every ``config.checkpoint_every`` iterations into
    ``checkpoint_dir`` (default ``<out_dir>/checkpoints``).
    """
    ctx = context or make_context(config, mesh)
    state = state or init_state(config)
    total = _total_iters(config)
    if checkpoint_dir is None and out_dir is not None:
        checkpoint_dir = Path(out_dir) / "checkpoints"
    while state.phase != "done":
        if stop_at is not None and state.iteration >= stop_at:
            break
        if state.phase == "warmup":
            warmup_step(state, ctx)
        else:
            joint_step(state, ctx)
        if config.checkpoint_every and checkpoint_dir and state.iteration % config.checkpoint_every == 0:
            save_checkpoint(state, Path(checkpoint_dir) / f"ckpt_{state.iteration:07d}.pxb")
        if state.iteration % 100 == 0:
            logger.info("iteration %d/%d (%s)", state.iteration, total, state.phase)
    p_map, rgb_map = extract_maps(state.loc, state.tex, ctx.samples)
    result = RunResult(state, p_map, rgb_map)
    if out_dir is not None:
        from .toolkit.export import export_assets

        result.files = export_assets(state, ctx, out_dir)
    return result


# ---------------------------------------------------------------- checkpoints

MAGIC = b"PXBRCKPT"
SCHEMA_VERSION = 1
_HEADER = struct.Struct("<8sIQ32s")


def _field_meta(params: FieldParams) -> dict:
    enc = params.encoding
    return {
        "head_kind": params.head_kind,
        "num_blocks": len(params.blocks),
        "encoding": [enc.num_frequencies, enc.frequency_scale, enc.seed, enc.mode],
    }


def _field_arrays(prefix: str, params: FieldParams, opt: AdamState) -> dict:
    out = {}
    for k, a in enumerate(params.arrays()):
        out[f"{prefix}/p{k}"] = a
    for k, a in enumerate(params.running_stats()):
        out[f"{prefix}/s{k}"] = a
    for k, (m, v) in enumerate(zip(opt.m, opt.v)):
        out[f"{prefix}/m{k}"] = m
        out[f"{prefix}/v{k}"] = v
    return out


def save_checkpoint(state: TrainState, path) -> Path:
    """Write a versioned, checksummed checkpoint (temp file + rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "iteration": state.iteration,
        "phase": state.phase,
        "rng": state.rng.bit_generator.state,
        "history": state.history,
        "consecutive_failures": state.consecutive_failures,
        "config_digest": state.config_digest,
        "loc": {**_field_meta(state.loc), "adam_step": state.opt_loc.step},
        "tex": {**_field_meta(state.tex), "adam_step": state.opt_tex.step},
    }
    arrays = {**_field_arrays("loc", state.loc, state.opt_loc), **_field_arrays("tex", state.tex, state.opt_tex)}
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    payload = buf.getvalue()
    header = _HEADER.pack(MAGIC, SCHEMA_VERSION, len(payload), hashlib.sha256(payload).digest())
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(header + payload)
    tmp.replace(path)
    return path


def _restore_field(meta: dict, data, prefix: str) -> tuple[FieldParams, AdamState]:
    n, scale, seed, mode = meta["encoding"]
    spec = EncodingSpec(int(n), float(scale), int(seed), mode)
    # rebuild the structure, then overwrite every array
    width = data[f"{prefix}/p0"].shape[1]
    params = init_field_params(spec, meta["head_kind"], 0, width)
    for dst, k in zip(params.arrays(), range(len(params.arrays()))):
        dst[...] = data[f"{prefix}/p{k}"]
    for dst, k in zip(params.running_stats(), range(len(params.running_stats()))):
        dst[...] = data[f"{prefix}/s{k}"]
    count = len(params.arrays())
    opt = AdamState(
        [data[f"{prefix}/m{k}"].copy() for k in range(count)],
        [data[f"{prefix}/v{k}"].copy() for k in range(count)],
        int(meta["adam_step"]),
    )
    return params, opt


def load_checkpoint(path) -> TrainState:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(blob) < _HEADER.size:
        raise CheckpointError("checkpoint truncated (header)")
    magic, version, length, digest = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if version != SCHEMA_VERSION:
        raise CheckpointError(f"unsupported checkpoint schema version {version}")
    payload = blob[_HEADER.size :]
    if len(payload) != length:
        raise CheckpointError(f"checkpoint truncated ({len(payload)} of {length} payload bytes)")
    if hashlib.sha256(payload).digest() != digest:
        raise CheckpointError("checkpoint checksum mismatch")
    try:
        with np.load(io.BytesIO(payload)) as data:
            meta = json.loads(bytes(data["meta"]).decode())
            loc, opt_loc = _restore_field(meta["loc"], data, "loc")
            tex, opt_tex = _restore_field(meta["tex"], data, "tex")
    except (KeyError, ValueError, OSError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng"]
    return TrainState(
        iteration=meta["iteration"],
        phase=meta["phase"],
        loc=loc,
        tex=tex,
        opt_loc=opt_loc,
        opt_tex=opt_tex,
        rng=rng,
        history=meta["history"],
        consecutive_failures=meta["consecutive_failures"],
        config_digest=meta.get("config_digest", ""),
    )
