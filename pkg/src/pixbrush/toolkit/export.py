"""Writing a finished (or checkpointed) edit to disk."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from ..fields import extract_maps
from ..geometry import Mesh
from ..render import CameraPose, rasterize, render_local_texture
from .compose import EditLayer, overlay_on_existing
from .io import atomic_write_text, map_to_image, write_png

TURNTABLE_AZIMUTHS = tuple(range(0, 360, 45))
TURNTABLE_ELEVATION = 30.0
TURNTABLE_RADIUS = 1.25


def obj_text(mesh: Mesh, mtl_name: str | None = None, material: str = "edit") -> str:
    """Wavefront OBJ with deduplicated per-corner UVs."""
    uv_flat = mesh.corner_uvs.reshape(-1, 2)
    uniq, inverse = np.unique(uv_flat, axis=0, return_inverse=True)
    ft = inverse.reshape(-1, 3) + 1
    lines = ["# pixbrush export"]
    if mtl_name:
        lines.append(f"mtllib {mtl_name}")
    lines += [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    lines += [f"vt {u:.9g} {v:.9g}" for u, v in uniq]
    has_n = mesh.normals is not None
    if has_n:
        lines += [f"vn {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.normals]
    if mtl_name:
        lines.append(f"usemtl {material}")
    for f, t in zip(mesh.faces + 1, ft):
        if has_n:
            lines.append("f " + " ".join(f"{a}/{b}/{a}" for a, b in zip(f, t)))
        else:
            lines.append("f " + " ".join(f"{a}/{b}" for a, b in zip(f, t)))
    return "\n".join(lines) + "\n"


def mtl_text(texture_name: str, material: str = "edit") -> str:
    return (
        f"newmtl {material}\n"
        "Ka 1.000 1.000 1.000\n"
        "Kd 1.000 1.000 1.000\n"
        "Ks 0.000 0.000 0.000\n"
        "d 1.0\n"
        "illum 1\n"
        f"map_Kd {texture_name}\n"
    )


def turntable(ctx, p_map, rgb_map, resolution: int | None = None) -> np.ndarray:
    """2 x 4 grid of local-texture renders around the shape."""
    cfg = ctx.config
    res = resolution or cfg.render_resolution
    tiles = []
    for az in TURNTABLE_AZIMUTHS:
        cam = CameraPose(TURNTABLE_ELEVATION, float(az), TURNTABLE_RADIUS, fov=cfg.fov)
        buffers = rasterize(ctx.mesh, cam, res, cfg.texture_resolution)
        rec = render_local_texture(buffers, p_map, rgb_map, ctx.base_appearance, cfg.background, cfg.shade_base)
        tiles.append(rec.image)
    rows = [np.concatenate(tiles[k : k + 4], axis=1) for k in (0, 4)]
    return np.concatenate(rows, axis=0)


def export_assets(state, ctx, out_dir) -> dict[str, Path]:
    """Write texture, masks, OBJ/MTL, turntable grid and a manifest into ``out_dir``."""
    cfg = ctx.config
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc

    p_map, rgb_map = extract_maps(state.loc, state.tex, ctx.samples)
    mask = (p_map >= cfg.mask_threshold).astype(np.float64)
    base = ctx.base_appearance
    base_map = np.asarray(base, dtype=np.float64)
    if base_map.ndim != 3:
        base_map = np.broadcast_to(base_map, rgb_map.shape)
    composite = overlay_on_existing(base_map, EditLayer(p_map, rgb_map, cfg.digest()))

    files = {
        "texture": write_png(out / "texture.png", map_to_image(rgb_map)),
        "probability": write_png(out / "probability.png", map_to_image(p_map), 16 if cfg.export_16bit else 8),
        "mask": write_png(out / "mask.png", map_to_image(mask)),
        "composite": write_png(out / "composite.png", map_to_image(composite)),
    }
    files["mtl"] = atomic_write_text(out / "mesh.mtl", mtl_text("composite.png"))
    files["obj"] = atomic_write_text(out / "mesh.obj", obj_text(ctx.mesh, "mesh.mtl"))
    files["turntable"] = write_png(out / "turntable.png", turntable(ctx, p_map, rgb_map))
    manifest = [
        f"config_digest={cfg.digest()}",
        f"iteration={state.iteration}",
        f"phase={state.phase}",
        f"texture_resolution={cfg.texture_resolution}",
        f"mask_threshold={cfg.mask_threshold}",
        f"probability_bits={16 if cfg.export_16bit else 8}",
    ]
    manifest += [f"file.{k}={v.name}" for k, v in sorted(files.items())]
    files["manifest"] = atomic_write_text(out / "manifest.txt", "\n".join(manifest) + "\n")
    return files
