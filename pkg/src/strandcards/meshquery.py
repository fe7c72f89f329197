"""Triangle-mesh proximity and intersection queries.

Vectorized closest-point-on-triangle (all Voronoi regions), ray-triangle
intersection, and a KDTree-pruned exact nearest-triangle query. Shared by the
card projection operator, the collision SDF, ambient-occlusion baking, and the
hair-cap root projection.
"""

from __future__ import annotations

from itertools import chain

import numpy as np
from scipy.spatial import cKDTree

_EPS = 1e-300


def _closest_point_core(a: np.ndarray, b: np.ndarray, c: np.ndarray,
                        p: np.ndarray) -> np.ndarray:
    """Closest point on triangle (a, b, c) to p, broadcasting over (..., 3).

    Branch-free region selection after Ericson, Real-Time Collision
    Detection 5.1.5.
    """
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = np.einsum("...k,...k->...", ab, ap)
    d2 = np.einsum("...k,...k->...", ac, ap)

    bp = p - b
    d3 = np.einsum("...k,...k->...", ab, bp)
    d4 = np.einsum("...k,...k->...", ac, bp)

    cp = p - c
    d5 = np.einsum("...k,...k->...", ab, cp)
    d6 = np.einsum("...k,...k->...", ac, cp)

    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    # face region barycentric solve
    denom = va + vb + vc
    denom = np.where(np.abs(denom) < _EPS, 1.0, denom)
    v_face = vb / denom
    w_face = vc / denom
    out = a + v_face[..., None] * ab + w_face[..., None] * ac

    # edge AC region
    w_ac = np.clip(d2 / np.where(np.abs(d2 - d6) < _EPS, 1.0, d2 - d6), 0.0, 1.0)
    in_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    out = np.where(in_ac[..., None], a + w_ac[..., None] * ac, out)

    # edge BC region
    num = d4 - d3
    den = (d4 - d3) + (d5 - d6)
    w_bc = np.clip(num / np.where(np.abs(den) < _EPS, 1.0, den), 0.0, 1.0)
    in_bc = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
    out = np.where(in_bc[..., None], b + w_bc[..., None] * (c - b), out)

    # edge AB region
    v_ab = np.clip(d1 / np.where(np.abs(d1 - d3) < _EPS, 1.0, d1 - d3), 0.0, 1.0)
    in_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    out = np.where(in_ab[..., None], a + v_ab[..., None] * ab, out)

    # vertex regions last so they override the edge selections
    out = np.where(((d6 >= 0) & (d5 <= d6))[..., None], c, out)
    out = np.where(((d3 >= 0) & (d4 <= d3))[..., None], b, out)
    out = np.where(((d1 <= 0) & (d2 <= 0))[..., None], a, out)
    return out


def closest_point_pairwise(tris: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Closest point on each triangle to each query point.

    Args:
        tris: (T, 3, 3) triangle vertices.
        pts: (N, 3) query points.

    Returns:
        (N, T, 3) closest points.
    """
    return _closest_point_core(tris[None, :, 0, :], tris[None, :, 1, :],
                               tris[None, :, 2, :], pts[:, None, :])


def closest_point_paired(tris: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Closest point on the i-th triangle to the i-th point.

    tris: (N, 3, 3); pts: (N, 3). Returns (N, 3). Element-wise, so memory
    stays linear in N regardless of how many distinct triangles appear.
    """
    return _closest_point_core(tris[:, 0, :], tris[:, 1, :], tris[:, 2, :],
                               pts)


def closest_on_triangle_soup(tris: np.ndarray, pts: np.ndarray,
                             chunk: int = 1_000_000
                             ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Exact nearest triangle for each point by brute force (chunked).

    Returns (tri_index, foot_point, distance); ties go to the lowest index.
    """
    n, t = len(pts), len(tris)
    best_d = np.full(n, np.inf)
    best_i = np.zeros(n, dtype=np.int64)
    best_p = np.zeros((n, 3))
    rows = max(1, min(n, chunk // max(t, 1)))
    for s in range(0, n, rows):
        sl = slice(s, min(s + rows, n))
        feet = closest_point_pairwise(tris, pts[sl])  # (r, T, 3)
        d2 = ((pts[sl, None, :] - feet) ** 2).sum(axis=2)
        i = d2.argmin(axis=1)
        r = np.arange(sl.stop - sl.start)
        best_i[sl] = i
        best_p[sl] = feet[r, i]
        best_d[sl] = np.sqrt(d2[r, i])
    return best_i, best_p, best_d


def barycentric(tri: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Barycentric coordinates (wa, wb, wc) of points on/near a triangle plane.

    tri: (..., 3, 3); p: (..., 3). Degenerate triangles get vertex A.
    """
    a, b, c = tri[..., 0, :], tri[..., 1, :], tri[..., 2, :]
    v0 = b - a
    v1 = c - a
    v2 = p - a
    d00 = np.einsum("...k,...k->...", v0, v0)
    d01 = np.einsum("...k,...k->...", v0, v1)
    d11 = np.einsum("...k,...k->...", v1, v1)
    d20 = np.einsum("...k,...k->...", v2, v0)
    d21 = np.einsum("...k,...k->...", v2, v1)
    denom = d00 * d11 - d01 * d01
    safe = np.where(np.abs(denom) < _EPS, 1.0, denom)
    v = (d11 * d20 - d01 * d21) / safe
    w = (d00 * d21 - d01 * d20) / safe
    v = np.where(np.abs(denom) < _EPS, 0.0, v)
    w = np.where(np.abs(denom) < _EPS, 0.0, w)
    return np.stack([1.0 - v - w, v, w], axis=-1)


class MeshQuery:
    """Exact nearest-triangle queries with a centroid KDTree prune."""

    def __init__(self, vertices: np.ndarray, triangles: np.ndarray):
        self.vertices = np.asarray(vertices, dtype=np.float64)
        self.triangles = np.asarray(triangles, dtype=np.int64)
        self.tri_verts = self.vertices[self.triangles]  # (T, 3, 3)
        self.centroids = self.tri_verts.mean(axis=1)
        # circumscribing radius bound per triangle: max vertex-centroid distance
        self.tri_radius = np.linalg.norm(
            self.tri_verts - self.centroids[:, None, :], axis=2).max(axis=1)
        self.max_radius = float(self.tri_radius.max())
        self.tree = cKDTree(self.centroids)

    def query(self, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Returns (tri_index, foot_point, distance), exact, ties to lowest index."""
        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        n = len(pts)
        if n == 0:
            return np.empty(0, dtype=np.int64), np.empty((0, 3)), np.empty(0)
        # upper bound: exact distance to the triangle with the nearest centroid
        _, i0 = self.tree.query(pts)
        feet0 = closest_point_paired(self.tri_verts[i0], pts)
        d0 = np.linalg.norm(pts - feet0, axis=1)

        # any triangle closer than d0 has centroid within d0 + its radius
        radii = d0 + self.max_radius + 1e-12
        candidates = self.tree.query_ball_point(pts, radii)
        for j in range(n):  # rounding insurance: the bound triangle competes
            candidates[j].append(int(i0[j]))
        lens = np.fromiter((len(c) for c in candidates), dtype=np.int64,
                           count=n)
        total = int(lens.sum())
        flat_tri = np.fromiter(chain.from_iterable(candidates),
                               dtype=np.int64, count=total)
        owner = np.repeat(np.arange(n), lens)
        feet = np.empty((total, 3))
        d2 = np.empty(total)
        for s in range(0, total, 500_000):  # bounds transient memory
            sl = slice(s, min(s + 500_000, total))
            f = closest_point_paired(self.tri_verts[flat_tri[sl]],
                                     pts[owner[sl]])
            feet[sl] = f
            d2[sl] = ((pts[owner[sl]] - f) ** 2).sum(axis=1)
        # owner-major sort; within each owner ascending distance, ties to
        # the lowest triangle index
        order = np.lexsort((flat_tri, d2, owner))
        starts = np.concatenate(([0], np.cumsum(lens)[:-1]))
        win = order[starts]
        return flat_tri[win], feet[win], np.sqrt(d2[win])


def ray_hits(origins: np.ndarray, dirs: np.ndarray, tris: np.ndarray,
             t_min: float = 0.0, tri_chunk: int = 512) -> np.ndarray:
    """Whether each ray hits any triangle at t > t_min (Moller-Trumbore).

    origins/dirs: (R, 3); tris: (T, 3, 3). Early-exits retired rays per chunk.
    """
    r = len(origins)
    hit = np.zeros(r, dtype=bool)
    if len(tris) == 0:
        return hit
    v0 = tris[:, 0]
    e1 = tris[:, 1] - tris[:, 0]
    e2 = tris[:, 2] - tris[:, 0]
    alive = np.arange(r)
    for s in range(0, len(tris), tri_chunk):
        if len(alive) == 0:
            break
        sl = slice(s, min(s + tri_chunk, len(tris)))
        o = origins[alive][:, None, :]
        d = dirs[alive][:, None, :]
        h = np.cross(d, e2[None, sl])
        det = np.einsum("rtk,rtk->rt", np.broadcast_arrays(e1[None, sl], h)[0], h)
        inv = 1.0 / np.where(np.abs(det) < 1e-14, 1.0, det)
        s_vec = o - v0[None, sl]
        u = np.einsum("rtk,rtk->rt", s_vec, h) * inv
        q = np.cross(s_vec, e1[None, sl])
        v = np.einsum("rtk,rtk->rt", np.broadcast_arrays(d, q)[0], q) * inv
        t = np.einsum("rtk,rtk->rt", np.broadcast_arrays(e2[None, sl], q)[0], q) * inv
        ok = (np.abs(det) >= 1e-14) & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > t_min)
        newly = ok.any(axis=1)
        hit[alive[newly]] = True
        alive = alive[~newly]
    return hit


def ray_crossing_parity(pts: np.ndarray, tris: np.ndarray, seed: int = 0) -> np.ndarray:
    """Inside test for a watertight mesh by ray-crossing parity.

    Retries with fresh directions for points whose ray grazes an edge or
    runs parallel to a face.
    """
    rng = np.random.default_rng(seed)
    n = len(pts)
    inside = np.zeros(n, dtype=bool)
    pending = np.arange(n)
    v0 = tris[:, 0]
    e1 = tris[:, 1] - tris[:, 0]
    e2 = tris[:, 2] - tris[:, 0]
    for _ in range(16):
        if len(pending) == 0:
            break
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        o = pts[pending][:, None, :]
        dd = np.broadcast_to(d, o.shape)
        h = np.cross(dd, e2[None])
        det = np.einsum("rtk,rtk->rt", np.broadcast_arrays(e1[None], h)[0], h)
        inv = 1.0 / np.where(np.abs(det) < 1e-12, 1.0, det)
        s_vec = o - v0[None]
        u = np.einsum("rtk,rtk->rt", s_vec, h) * inv
        q = np.cross(s_vec, e1[None])
        v = np.einsum("rtk,rtk->rt", np.broadcast_arrays(dd, q)[0], q) * inv
        t = np.einsum("rtk,rtk->rt", np.broadcast_arrays(e2[None], q)[0], q) * inv
        valid_det = np.abs(det) >= 1e-12
        strict = valid_det & (u > 1e-9) & (v > 1e-9) & (u + v < 1 - 1e-9) & (t > 1e-12)
        grazing = valid_det & ~strict & (u > -1e-9) & (v > -1e-9) & (u + v < 1 + 1e-9) & (t > -1e-12)
        ambiguous = grazing.any(axis=1)
        counts = strict.sum(axis=1)
        settled = ~ambiguous
        inside[pending[settled]] = (counts[settled] % 2) == 1
        pending = pending[~settled]
    if len(pending):
        raise RuntimeError("parity test failed to settle after 16 ray retries")
    return inside
