"""Independent oracles shared by the test modules."""

from __future__ import annotations

import numpy as np

from pixbrush.geometry import Mesh


def brute_force_inversion(mesh: Mesh, R: int):
    """Reference UV inversion: every texel center against every triangle, in plain loops.

    Returns ``{(i, j): (face_id, barycentric)}`` with first-face-wins.
    """
    tris = mesh.corner_uvs.tolist()
    out = {}
    for i in range(R):
        for j in range(R):
            px, py = (i + 0.5) / R, (j + 0.5) / R
            for f, ((ax, ay), (bx, by), (cx, cy)) in enumerate(tris):
                # Cramer's rule on p = a + s (b - a) + t (c - a)
                det = (bx - ax) * (cy - ay) - (cx - ax) * (by - ay)
                if abs(det) < 1e-15:
                    continue
                s = ((px - ax) * (cy - ay) - (cx - ax) * (py - ay)) / det
                t = ((bx - ax) * (py - ay) - (px - ax) * (by - ay)) / det
                if 1 - s - t >= -1e-9 and s >= -1e-9 and t >= -1e-9:
                    out[(i, j)] = (f, np.array([1 - s - t, s, t]))
                    break
    return out


def random_uv_mesh(rng: np.random.Generator, n_faces: int) -> Mesh:
    """Random triangle soup with random UV triangles (overlaps welcome)."""
    verts = rng.normal(size=(3 * n_faces, 3))
    faces = np.arange(3 * n_faces).reshape(n_faces, 3)
    centers = rng.uniform(0.1, 0.9, size=(n_faces, 1, 2))
    uvs = np.clip(centers + rng.uniform(-0.25, 0.25, size=(n_faces, 3, 2)), 0, 1)
    return Mesh(verts, faces, uvs)


def central_difference(f, x: np.ndarray, index, h: float = 1e-6) -> float:
    """d f / d x[index] by central differences; ``x`` is modified in place and restored."""
    old = x[index]
    x[index] = old + h
    fp = f()
    x[index] = old - h
    fm = f()
    x[index] = old
    return (fp - fm) / (2 * h)


def rel_error(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)))


def write_obj(path, text: str):
    path.write_text(text)
    return path
