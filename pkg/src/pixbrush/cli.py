"""Command line entry point: ``pixbrush run | compose | eval``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

BACKEND_ENV = "PIXBRUSH_BACKEND"
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


class CliError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


def _apply_backend_env(cfg):
    """``PIXBRUSH_BACKEND`` is either ``toy`` or ``module:factory``."""
    value = os.environ.get(BACKEND_ENV, "").strip()
    if not value:
        return cfg
    if value == "toy":
        return cfg.replace(backend="toy")
    if ":" not in value:
        raise CliError("config", f"{BACKEND_ENV} must be 'toy' or 'module:factory', got {value!r}")
    return cfg.replace(backend="external", external_backend=value)


def cmd_run(args) -> dict:
    from .config import TrainConfig
    from .geometry import load_mesh
    from .toolkit.io import read_image
    from .trainer import load_checkpoint, make_context, run

    cfg = TrainConfig.load(args.config) if args.config else TrainConfig()
    overrides = {}
    if args.prompt:
        overrides["prompt"] = args.prompt
    if args.image:
        overrides["reference_image"] = str(args.image)
    if args.seed is not None:
        overrides["seed"] = args.seed
    cfg = _apply_backend_env(cfg.replace(**overrides))
    cfg.text_prompt()  # fail early without a prompt

    mesh = load_mesh(args.mesh)
    reference = read_image(cfg.reference_image) if cfg.reference_image else None
    ctx = make_context(cfg, mesh, reference_image=reference)
    state = load_checkpoint(args.resume) if args.resume else None
    if state is not None and state.config_digest not in ("", cfg.digest()):
        raise CliError("checkpoint", "checkpoint was written with a different config")
    out = Path(args.out)
    result = run(cfg, mesh, out, context=ctx, state=state)
    cfg.dump(out / "config.yaml")
    return {
        "status": "ok",
        "iteration": result.state.iteration,
        "phase": result.state.phase,
        "config_digest": cfg.digest(),
        "files": {k: str(v) for k, v in sorted(result.files.items())},
    }


def cmd_compose(args) -> dict:
    from .toolkit.compose import composite_layers, load_layer
    from .toolkit.io import read_image, write_png

    base = read_image(args.base)
    layers = [load_layer(d) for d in args.layer]
    out = composite_layers(base, layers)
    path = write_png(args.out, out)
    return {"status": "ok", "out": str(path), "layers": len(layers)}


def _image_files(directory) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise CliError("io", f"not a directory: {d}")
    return sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def cmd_eval(args) -> dict:
    from .toolkit.io import read_image
    from .toolkit.metrics import HashEmbedder, HistogramEmbedder, mean_similarity, r_precision

    results = _image_files(args.results)
    refs = _image_files(args.refs)
    names = [p.name for p in results]
    if names != [p.name for p in refs]:
        raise CliError("input", "results and refs must hold the same image file names")
    embedder = HistogramEmbedder() if args.embedder == "histogram" else HashEmbedder()
    res_imgs = [read_image(p) for p in results]
    ref_imgs = [read_image(p) for p in refs]
    return {
        "status": "ok",
        "n": len(names),
        "embedder": args.embedder,
        "r_precision": r_precision(res_imgs, ref_imgs, embedder),
        "mean_similarity": mean_similarity(res_imgs, ref_imgs, embedder),
    }


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pixbrush", description="Localized texture editing on meshes.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="optimize a localization mask and local texture")
    p.add_argument("--config", type=Path)
    p.add_argument("--mesh", type=Path, required=True)
    p.add_argument("--image", type=Path, help="reference image of the edit object")
    p.add_argument("--prompt", help="coarse localization prompt, e.g. 'a cow with sunglasses'")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", type=Path, help="checkpoint to continue from")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compose", help="paint exported edits over a texture")
    p.add_argument("--base", type=Path, required=True)
    p.add_argument("--layer", type=Path, nargs="+", required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_compose)

    p = sub.add_parser("eval", help="retrieval metrics of renders against references")
    p.add_argument("--results", type=Path, required=True)
    p.add_argument("--refs", type=Path, required=True)
    p.add_argument("--embedder", choices=("histogram", "hash"), default="histogram")
    p.set_defaults(func=cmd_eval)
    return parser


def _error_kind(exc: Exception) -> str:
    from .config import ConfigError
    from .geometry import MeshError
    from .guidance import GuidanceError
    from .trainer import CheckpointError, TrainingError

    for cls, kind in (
        (ConfigError, "config"),
        (MeshError, "mesh"),
        (CheckpointError, "checkpoint"),
        (TrainingError, "training"),
        (GuidanceError, "guidance"),
        (OSError, "io"),
        (ValueError, "input"),
    ):
        if isinstance(exc, cls):
            return kind
    return "internal"


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        report = args.func(args)
    except CliError as exc:
        print(json.dumps({"status": "error", "kind": exc.kind, "message": str(exc)}), file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - every failure becomes one JSON line
        kind = _error_kind(exc)
        if kind == "internal" and args.verbose:
            raise
        print(json.dumps({"status": "error", "kind": kind, "message": str(exc)}), file=sys.stderr)
        return 1
    print(json.dumps(report, default=lambda o: o.item() if isinstance(o, np.generic) else str(o)))
    return 0


if __name__ == "__main__":
    sys.exit(main())
