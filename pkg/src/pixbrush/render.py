"""Camera sampling and a minimal differentiable rasterizer.

Rasterization is a geometry-only pass: it records, for every covered pixel,
the four bilinear texel taps of its interpolated UV. Texture renders are then
linear (probability) or bilinear (local-texture blend) in texel values, and
the adjoints below are exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import Mesh

DEFAULT_BACKGROUND = 0.8
DEFAULT_BASE_GRAY = 0.5
NEAR_PLANE = 1e-2


@dataclass(frozen=True)
class ViewConfig:
    elevation: tuple[float, float] = (0.0, 60.0)
    azimuth: tuple[float, float] = (0.0, 360.0)
    radius: tuple[float, float] = (1.0, 1.5)
    fov: float = 45.0

    def __post_init__(self):
        for name in ("elevation", "azimuth", "radius"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ValueError(f"empty {name} range [{lo}, {hi}]")
        if self.radius[0] <= 0:
            raise ValueError("radius must be positive")
        if not (-180 <= self.elevation[0] and self.elevation[1] <= 180):
            raise ValueError("elevation must lie in [-180, 180]")
        if not 0 < self.fov < 180:
            raise ValueError("fov must lie in (0, 180)")

    @classmethod
    def fixed(cls, elevation: float, azimuth: float, radius: float, fov: float = 45.0) -> "ViewConfig":
        return cls((elevation, elevation), (azimuth, azimuth), (radius, radius), fov)


@dataclass(frozen=True)
class CameraPose:
    elevation: float
    azimuth: float
    radius: float
    target: tuple[float, float, float] = (0.0, 0.0, 0.0)
    fov: float = 45.0

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("radius must be positive")

    def frame(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Eye position and (right, up, forward) unit axes.

        Azimuth 0 / elevation 0 looks down -z from +z. The up axis follows the
        elevation tangent, so elevations past 90 degrees stay well defined.
        """
        el, az = math.radians(self.elevation), math.radians(self.azimuth)
        offset = np.array([math.cos(el) * math.sin(az), math.sin(el), math.cos(el) * math.cos(az)])
        eye = np.asarray(self.target, dtype=np.float64) + self.radius * offset
        forward = -offset
        up = np.array([-math.sin(el) * math.sin(az), math.cos(el), -math.sin(el) * math.cos(az)])
        right = np.cross(forward, up)
        return eye, right, up, forward


def sample_camera(rng: np.random.Generator, view: ViewConfig) -> CameraPose:
    elevation = rng.uniform(*view.elevation)
    azimuth = rng.uniform(*view.azimuth)
    radius = rng.uniform(*view.radius)
    if view.azimuth[1] - view.azimuth[0] >= 360.0:
        azimuth = azimuth % 360.0
    return CameraPose(float(elevation), float(azimuth), float(radius), fov=view.fov)


@dataclass(frozen=True)
class RenderBuffers:
    face_id: np.ndarray  # (H, W) int64, -1 on background
    coverage: np.ndarray  # (H, W) bool
    uv: np.ndarray  # (H, W, 2)
    texel_index: np.ndarray  # (H, W, 4) flat texel index i * R + j
    texel_weight: np.ndarray  # (H, W, 4), sums to 1 on covered pixels
    texel_frac: np.ndarray  # (H, W, 2) bilinear fractions (fx, fy)
    shading: np.ndarray  # (H, W) Lambertian headlight factor
    texture_resolution: int

    @property
    def shape(self) -> tuple[int, int]:
        return self.face_id.shape


def bilinear_taps(uv: np.ndarray, R: int, return_frac: bool = False):
    """Flat texel indices and weights of the 4 bilinear taps, clamped at the border.

    Tap order is (i0, j0), (i1, j0), (i0, j1), (i1, j1).
    """
    x = uv[..., 0] * R - 0.5
    y = uv[..., 1] * R - 0.5
    i0 = np.floor(x)
    j0 = np.floor(y)
    fx, fy = x - i0, y - j0
    i0 = i0.astype(np.int64)
    j0 = j0.astype(np.int64)
    ia, ib = np.clip(i0, 0, R - 1), np.clip(i0 + 1, 0, R - 1)
    ja, jb = np.clip(j0, 0, R - 1), np.clip(j0 + 1, 0, R - 1)
    idx = np.stack([ia * R + ja, ib * R + ja, ia * R + jb, ib * R + jb], axis=-1)
    w = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=-1)
    if return_frac:
        return idx, w, np.stack([fx, fy], axis=-1)
    return idx, w


def rasterize(
    mesh: Mesh,
    camera: CameraPose,
    resolution: int,
    texture_resolution: int,
    ambient: float = 0.3,
) -> RenderBuffers:
    """Perspective z-buffer rasterization of a square ``resolution`` image.

    Faces with a vertex behind the near plane are skipped. Depth ties keep the
    earlier face, so the output is deterministic.
    """
    H = W = int(resolution)
    eye, right, up, forward = camera.frame()
    rel = mesh.vertices - eye
    cam = np.stack([rel @ right, rel @ up, rel @ forward], axis=1)
    depth_v = cam[:, 2]
    tan_half = math.tan(math.radians(camera.fov) / 2)
    safe = np.where(depth_v > NEAR_PLANE, depth_v, 1.0)
    sx = cam[:, 0] / (safe * tan_half)
    sy = cam[:, 1] / (safe * tan_half)
    px = (sx + 1) / 2 * W - 0.5  # continuous column of the vertex
    py = (1 - sy) / 2 * H - 0.5

    zbuf = np.full((H, W), np.inf)
    face_id = np.full((H, W), -1, dtype=np.int64)
    bary = np.zeros((H, W, 3))
    for fi, (a, b, c) in enumerate(mesh.faces):
        if min(depth_v[a], depth_v[b], depth_v[c]) <= NEAR_PLANE:
            continue
        xs = np.array([px[a], px[b], px[c]])
        ys = np.array([py[a], py[b], py[c]])
        area = (xs[1] - xs[0]) * (ys[2] - ys[0]) - (xs[2] - xs[0]) * (ys[1] - ys[0])
        if abs(area) < 1e-12:
            continue
        c0, c1 = max(int(math.ceil(xs.min())), 0), min(int(math.floor(xs.max())), W - 1)
        r0, r1 = max(int(math.ceil(ys.min())), 0), min(int(math.floor(ys.max())), H - 1)
        if c0 > c1 or r0 > r1:
            continue
        rr, cc = np.meshgrid(np.arange(r0, r1 + 1), np.arange(c0, c1 + 1), indexing="ij")
        l1 = ((cc - xs[0]) * (ys[2] - ys[0]) - (xs[2] - xs[0]) * (rr - ys[0])) / area
        l2 = ((xs[1] - xs[0]) * (rr - ys[0]) - (cc - xs[0]) * (ys[1] - ys[0])) / area
        l0 = 1 - l1 - l2
        inside = (l0 >= -1e-9) & (l1 >= -1e-9) & (l2 >= -1e-9)
        if not inside.any():
            continue
        rr, cc = rr[inside], cc[inside]
        lam = np.stack([l0[inside], l1[inside], l2[inside]], axis=1).clip(0, None)
        inv_d = lam / np.array([depth_v[a], depth_v[b], depth_v[c]])
        s = inv_d.sum(axis=1)
        z = 1.0 / s
        closer = z < zbuf[rr, cc]
        rr, cc = rr[closer], cc[closer]
        zbuf[rr, cc] = z[closer]
        face_id[rr, cc] = fi
        bary[rr, cc] = inv_d[closer] / s[closer, None]

    coverage = face_id >= 0
    fid = np.where(coverage, face_id, 0)
    uv = np.einsum("hwk,hwkd->hwd", bary, mesh.corner_uvs[fid])
    R = int(texture_resolution)
    idx, w, frac = bilinear_taps(uv, R, return_frac=True)
    idx = np.where(coverage[..., None], idx, 0)
    w = np.where(coverage[..., None], w, 0.0)
    frac = np.where(coverage[..., None], frac, 0.0)
    n = mesh.face_normals()[fid]
    shading = ambient + (1 - ambient) * np.abs(n @ forward)
    shading = np.where(coverage, shading, 0.0)
    uv = np.where(coverage[..., None], uv, 0.0)
    return RenderBuffers(face_id, coverage, uv, idx, w, frac, shading, R)


def lookup(buffers: RenderBuffers, texture: np.ndarray) -> np.ndarray:
    """Bilinear lookup of an R x R (x C) map at every pixel (0 on background).

    Evaluated as nested lerps so constant maps come back bit-exact; this is
    the same linear map as the tap weights used by :func:`scatter`.
    """
    R = buffers.texture_resolution
    texture = np.asarray(texture, dtype=np.float64)
    flat = texture.reshape((R * R,) + texture.shape[2:])
    taps = flat[buffers.texel_index]  # (H, W, 4[, C])
    fx, fy = buffers.texel_frac[..., 0], buffers.texel_frac[..., 1]
    if taps.ndim == 4:
        fx, fy = fx[..., None], fy[..., None]
    t00, t10, t01, t11 = (taps[:, :, k] for k in range(4))
    top = t00 + fx * (t10 - t00)
    bottom = t01 + fx * (t11 - t01)
    out = top + fy * (bottom - top)
    cov = buffers.coverage if out.ndim == 2 else buffers.coverage[..., None]
    return np.where(cov, out, 0.0)


def scatter(buffers: RenderBuffers, pixel_grad: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`lookup`."""
    R = buffers.texture_resolution
    cov = buffers.coverage
    idx = buffers.texel_index[cov].ravel()
    w = buffers.texel_weight[cov]
    g = np.asarray(pixel_grad, dtype=np.float64)[cov]
    if g.ndim == 1:
        return np.bincount(idx, weights=(w * g[:, None]).ravel(), minlength=R * R).reshape(R, R)
    out = np.empty((R * R, g.shape[1]))
    for ch in range(g.shape[1]):
        out[:, ch] = np.bincount(idx, weights=(w * g[:, ch : ch + 1]).ravel(), minlength=R * R)
    return out.reshape(R, R, g.shape[1])


def render_probability(
    buffers: RenderBuffers, probability_map: np.ndarray, background_value: float = DEFAULT_BACKGROUND
) -> np.ndarray:
    """Grayscale H x W render of the probability texture over a flat background."""
    _check_map(buffers, probability_map)
    return np.where(buffers.coverage, lookup(buffers, probability_map), background_value)


def probability_backward(buffers: RenderBuffers, upstream: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the probability map of ``sum(upstream * render_probability(...))``."""
    if upstream.shape != buffers.shape:
        raise ValueError(f"upstream shape {upstream.shape} != render shape {buffers.shape}")
    return scatter(buffers, upstream)


@dataclass(frozen=True)
class TextureRender:
    """Forward record of a local-texture render; needed by :func:`render_backward`."""

    image: np.ndarray  # (H, W, 3)
    p_hat: np.ndarray  # (H, W)
    t_hat: np.ndarray  # (H, W, 3)
    b_hat: np.ndarray  # (H, W, 3), shaded base appearance


def base_lookup(buffers: RenderBuffers, base_appearance, shade: bool = True) -> np.ndarray:
    base = np.asarray(base_appearance, dtype=np.float64)
    H, W = buffers.shape
    if base.ndim == 3:
        _check_map(buffers, base[..., 0])
        b = lookup(buffers, base)
    else:
        b = np.broadcast_to(base, (H, W, 3)).copy()
    if shade:
        b = b * buffers.shading[..., None]
    return np.where(buffers.coverage[..., None], b, 0.0)


def render_local_texture(
    buffers: RenderBuffers,
    probability_map: np.ndarray,
    rgb_map: np.ndarray,
    base_appearance=DEFAULT_BASE_GRAY,
    background_color=DEFAULT_BACKGROUND,
    shade_base: bool = True,
) -> TextureRender:
    """Matte the texture over the base: ``c = p * t + (1 - p) * b`` per covered pixel.

    ``base_appearance`` is a flat gray/RGB value or an R x R x 3 texture map;
    only the base is shaded.
    """
    _check_map(buffers, probability_map)
    _check_map(buffers, rgb_map[..., 0])
    p = lookup(buffers, probability_map)
    t = lookup(buffers, rgb_map)
    b = base_lookup(buffers, base_appearance, shade_base)
    c = p[..., None] * t + (1 - p[..., None]) * b
    bg = np.broadcast_to(np.asarray(background_color, dtype=np.float64), c.shape)
    image = np.where(buffers.coverage[..., None], c, bg)
    return TextureRender(image, p, t, b)


def render_backward(
    buffers: RenderBuffers, upstream: np.ndarray, record: TextureRender
) -> tuple[np.ndarray, np.ndarray]:
    """Exact adjoint of :func:`render_local_texture` w.r.t. both maps."""
    if upstream.shape != record.image.shape:
        raise ValueError(f"upstream shape {upstream.shape} != render shape {record.image.shape}")
    cov = buffers.coverage[..., None]
    g = np.where(cov, upstream, 0.0)
    grad_p_pixel = (g * (record.t_hat - record.b_hat)).sum(axis=-1)
    grad_t_pixel = g * record.p_hat[..., None]
    return scatter(buffers, grad_p_pixel), scatter(buffers, grad_t_pixel)


def _check_map(buffers: RenderBuffers, m: np.ndarray) -> None:
    R = buffers.texture_resolution
    if m.shape[:2] != (R, R):
        raise ValueError(f"map resolution {m.shape[:2]} != buffers texture resolution {R}")
