"""Mesh ingestion, normalization and UV inversion.

Texel convention used throughout the package: texel ``(i, j)`` of an ``R x R``
texture has its center at ``u = (i + 0.5) / R``, ``v = (j + 0.5) / R`` and maps
are stored as arrays indexed ``[i, j]``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

# barycentric slack for the edge-inclusive inside test
EDGE_EPS = 1e-9


class MeshError(ValueError):
    """Raised for malformed or unusable mesh input."""


@dataclass(frozen=True)
class Mesh:
    vertices: np.ndarray  # (V, 3) float64
    faces: np.ndarray  # (F, 3) int64
    corner_uvs: np.ndarray  # (F, 3, 2) float64
    normals: np.ndarray | None = None  # (V, 3) unit vectors

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        f = np.asarray(self.faces, dtype=np.int64)
        uv = np.asarray(self.corner_uvs, dtype=np.float64)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        object.__setattr__(self, "corner_uvs", uv)
        if v.ndim != 2 or v.shape[1] != 3:
            raise MeshError(f"vertices must have shape (V, 3), got {v.shape}")
        if f.ndim != 2 or f.shape[1] != 3:
            raise MeshError(f"faces must have shape (F, 3), got {f.shape}")
        if uv.shape != (len(f), 3, 2):
            raise MeshError("every face needs exactly 3 corner UVs")
        if not np.all(np.isfinite(v)) or not np.all(np.isfinite(uv)):
            raise MeshError("non-finite coordinates")
        if len(f) and (f.min() < 0 or f.max() >= len(v)):
            raise MeshError("face index out of range")
        if uv.size and (uv.min() < -1e-9 or uv.max() > 1 + 1e-9):
            raise MeshError("UV coordinates must lie in [0, 1]^2")
        if self.normals is not None:
            n = np.asarray(self.normals, dtype=np.float64)
            if n.shape != v.shape:
                raise MeshError("normals must match vertices")
            object.__setattr__(self, "normals", n)

    @property
    def num_faces(self) -> int:
        return len(self.faces)

    def face_normals(self) -> np.ndarray:
        tri = self.vertices[self.faces]
        n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        norm = np.linalg.norm(n, axis=1, keepdims=True)
        fallback = np.array([0.0, 0.0, 1.0])
        return np.where(norm > 0, n / np.where(norm > 0, norm, 1.0), fallback)


@dataclass(frozen=True)
class SurfaceSampleSet:
    """Texel-center to surface-point correspondences, ordered row-major by texel."""

    resolution: int
    texels: np.ndarray  # (N, 2) int64, (i, j)
    face_ids: np.ndarray  # (N,)
    barycentric: np.ndarray  # (N, 3)
    points: np.ndarray  # (N, 3)
    normals: np.ndarray  # (N, 3)
    coverage_mask: np.ndarray = field(repr=False)  # (R, R) bool

    def __len__(self) -> int:
        return len(self.face_ids)

    @property
    def flat_index(self) -> np.ndarray:
        return self.texels[:, 0] * self.resolution + self.texels[:, 1]


def _parse_index(token: str, count: int) -> int:
    k = int(token)
    # OBJ indices are 1-based, negatives are relative to the current end
    return k - 1 if k > 0 else count + k


def load_mesh(path) -> Mesh:
    """Read a Wavefront OBJ with per-corner UVs; polygons are fan-triangulated."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"mesh file not found: {path}")

    verts, uvs, vns = [], [], []
    faces, face_uvs, face_vns = [], [], []
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        parts = raw.split("#", 1)[0].split()
        if not parts:
            continue
        tag, args = parts[0], parts[1:]
        try:
            if tag == "v":
                verts.append([float(a) for a in args[:3]])
            elif tag == "vt":
                uvs.append([float(a) for a in args[:2]])
            elif tag == "vn":
                vns.append([float(a) for a in args[:3]])
            elif tag == "f":
                if len(args) < 3:
                    raise MeshError(f"line {lineno}: face with fewer than 3 corners")
                corners = [a.split("/") for a in args]
                if any(len(c) < 2 or c[1] == "" for c in corners):
                    raise MeshError("mesh has no UV parametrization")
                vi = [_parse_index(c[0], len(verts)) for c in corners]
                ti = [_parse_index(c[1], len(uvs)) for c in corners]
                ni = [_parse_index(c[2], len(vns)) if len(c) > 2 and c[2] else -1 for c in corners]
                for k in range(1, len(corners) - 1):
                    faces.append([vi[0], vi[k], vi[k + 1]])
                    face_uvs.append([ti[0], ti[k], ti[k + 1]])
                    face_vns.append([ni[0], ni[k], ni[k + 1]])
        except (ValueError, IndexError) as exc:
            if isinstance(exc, MeshError):
                raise
            raise MeshError(f"line {lineno}: cannot parse {raw!r}") from exc

    if not faces:
        raise MeshError("mesh has no faces")
    v = np.array(verts, dtype=np.float64).reshape(-1, 3)
    uv_table = np.array(uvs, dtype=np.float64).reshape(-1, 2)
    f = np.array(faces, dtype=np.int64)
    ft = np.array(face_uvs, dtype=np.int64)
    if ft.min() < 0 or ft.max() >= len(uv_table):
        raise MeshError("UV index out of range")
    if not np.all(np.isfinite(v)) or not np.all(np.isfinite(uv_table)):
        raise MeshError("non-finite coordinates")

    normals = None
    fn = np.array(face_vns, dtype=np.int64)
    if vns and np.all(fn >= 0):
        table = np.array(vns, dtype=np.float64)
        acc = np.zeros_like(v)
        np.add.at(acc, f.ravel(), table[fn.ravel()])
        norm = np.linalg.norm(acc, axis=1, keepdims=True)
        if np.all(norm > 0):
            normals = acc / norm
    return Mesh(v, f, uv_table[ft], normals)


def normalize_unit(mesh: Mesh) -> Mesh:
    """Center the bounding box at the origin and scale the farthest vertex to norm 1."""
    v = mesh.vertices
    if len(v) == 0:
        raise MeshError("mesh has no vertices")
    center = (v.min(axis=0) + v.max(axis=0)) / 2
    shifted = v - center
    radius = np.linalg.norm(shifted, axis=1).max()
    if not radius > 0:
        raise MeshError("degenerate extent")
    return Mesh(shifted / radius, mesh.faces, mesh.corner_uvs, mesh.normals)


def invert_uv(mesh: Mesh, resolution: int) -> SurfaceSampleSet:
    """Map every covered texel center back to a point on the surface.

    Faces are visited in file order and the first face containing a texel
    center keeps it; later overlapping faces only trigger a warning.
    """
    if resolution < 1:
        raise ValueError("resolution must be >= 1")
    R = resolution
    owner = np.full((R, R), -1, dtype=np.int64)
    bary = np.zeros((R, R, 3))
    overlaps = 0

    for fi, tri in enumerate(mesh.corner_uvs):
        a, b, c = tri
        e1, e2 = b - a, c - a
        det = e1[0] * e2[1] - e1[1] * e2[0]
        if abs(det) < 1e-15:
            continue
        lo = np.floor(tri.min(axis=0) * R - 0.5).astype(int)
        hi = np.ceil(tri.max(axis=0) * R - 0.5).astype(int)
        i0, j0 = max(lo[0], 0), max(lo[1], 0)
        i1, j1 = min(hi[0], R - 1), min(hi[1], R - 1)
        if i0 > i1 or j0 > j1:
            continue
        ii, jj = np.meshgrid(np.arange(i0, i1 + 1), np.arange(j0, j1 + 1), indexing="ij")
        du = (ii + 0.5) / R - a[0]
        dv = (jj + 0.5) / R - a[1]
        b1 = (du * e2[1] - dv * e2[0]) / det
        b2 = (e1[0] * dv - e1[1] * du) / det
        b0 = 1.0 - b1 - b2
        inside = (b0 >= -EDGE_EPS) & (b1 >= -EDGE_EPS) & (b2 >= -EDGE_EPS)
        if not inside.any():
            continue
        ti, tj = ii[inside], jj[inside]
        taken = owner[ti, tj] >= 0
        # texels on a shared seam edge are not a real overlap
        interior = np.minimum(np.minimum(b0, b1), b2)[inside] > 1e-7
        overlaps += int((taken & interior).sum())
        free = ~taken
        ti, tj = ti[free], tj[free]
        owner[ti, tj] = fi
        bary[ti, tj] = np.stack([b0[inside][free], b1[inside][free], b2[inside][free]], axis=-1)

    if overlaps:
        logger.warning("UV charts overlap at %d texel(s); first face wins", overlaps)

    coverage = owner >= 0
    ti, tj = np.nonzero(coverage)  # C-order, i.e. row-major by texel
    face_ids = owner[ti, tj]
    b = np.clip(bary[ti, tj], 0.0, None)
    b /= b.sum(axis=1, keepdims=True)
    tri_v = mesh.vertices[mesh.faces[face_ids]]
    points = np.einsum("nk,nkd->nd", b, tri_v)
    if mesh.normals is not None:
        n = np.einsum("nk,nkd->nd", b, mesh.normals[mesh.faces[face_ids]])
        norm = np.linalg.norm(n, axis=1, keepdims=True)
        fallback = mesh.face_normals()[face_ids]
        normals = np.where(norm > 1e-12, n / np.maximum(norm, 1e-12), fallback)
    else:
        normals = mesh.face_normals()[face_ids]
    return SurfaceSampleSet(
        resolution=R,
        texels=np.stack([ti, tj], axis=1).astype(np.int64),
        face_ids=face_ids,
        barycentric=b,
        points=points,
        normals=normals,
        coverage_mask=coverage,
    )


def unit_square_mesh(size: float = 1.0) -> Mesh:
    """Two-triangle square in the z=0 plane whose UV chart is the full unit square."""
    h = size / 2
    v = np.array([[-h, -h, 0.0], [h, -h, 0.0], [h, h, 0.0], [-h, h, 0.0]])
    uv = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    f = np.array([[0, 1, 2], [0, 2, 3]])
    return Mesh(v, f, uv[f], np.tile([0.0, 0.0, 1.0], (4, 1)))

