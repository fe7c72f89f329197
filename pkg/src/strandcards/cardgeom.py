"""Card strip construction: twist-free frames along the mean strand, width
envelope, endpoint-preserving downsampling, discrete orientation search, and
crossed-card generation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cluster import StrandCluster
from .hairio import HairModel, Strand
from .meshquery import closest_point_pairwise


@dataclass(frozen=True)
class FrameField:
    """Per-sample orthonormal triads (tangent, normal, binormal)."""

    tangents: np.ndarray  # (n, 3)
    normals: np.ndarray  # (n, 3)
    binormals: np.ndarray  # (n, 3)

    def max_orthonormality_error(self) -> float:
        t, n, b = self.tangents, self.normals, self.binormals
        errs = [
            np.abs(np.einsum("ij,ij->i", t, t) - 1.0),
            np.abs(np.einsum("ij,ij->i", n, n) - 1.0),
            np.abs(np.einsum("ij,ij->i", b, b) - 1.0),
            np.abs(np.einsum("ij,ij->i", t, n)),
            np.abs(np.einsum("ij,ij->i", t, b)),
            np.abs(np.einsum("ij,ij->i", n, b)),
            np.abs(b - np.cross(t, n)).max(axis=1),
        ]
        return float(np.max(errs))


@dataclass
class CardGeometry:
    """A quad strip: rails[j] = (p_minus, p_plus) per cross-section.

    Vertex layout interleaves rails root to tip: vertex 2j is the minus rail
    (u=0), vertex 2j+1 the plus rail (u=1). Triangles split each quad along
    the fixed zig-zag diagonal (minus_j, plus_j, minus_j+1), (plus_j,
    plus_j+1, minus_j+1), so face normals follow the frame normal.
    """

    rails: np.ndarray  # (n_cross, 2, 3); [:, 0] minus rail, [:, 1] plus rail
    centerline: np.ndarray  # (n_cross, 3), the downsampled mean strand, exact
    sample_indices: np.ndarray  # (n_cross,) indices into the full-res strand
    triangles: np.ndarray = field(init=False)  # (2*(n_cross-1), 3)
    uv_layout: np.ndarray = field(init=False)  # (2*n_cross, 2)

    def __post_init__(self):
        n = len(self.rails)
        if n < 2:
            raise ValueError("card needs at least 2 cross-sections")
        quads = n - 1
        tris = np.empty((2 * quads, 3), dtype=np.int64)
        for j in range(quads):
            a, b, c, d = 2 * j, 2 * j + 1, 2 * j + 2, 2 * j + 3
            tris[2 * j] = (a, b, c)
            tris[2 * j + 1] = (b, d, c)
        self.triangles = tris
        denom = max(int(self.sample_indices[-1]), 1)
        v = self.sample_indices.astype(np.float64) / denom
        uv = np.empty((2 * n, 2))
        uv[0::2, 0] = 0.0
        uv[1::2, 0] = 1.0
        uv[0::2, 1] = v
        uv[1::2, 1] = v
        self.uv_layout = uv

    @property
    def n_cross(self) -> int:
        return len(self.rails)

    @property
    def n_quads(self) -> int:
        return len(self.rails) - 1

    def vertices(self) -> np.ndarray:
        """Interleaved strip vertices, shape (2*n_cross, 3)."""
        return self.rails.reshape(-1, 3)

    def triangle_vertices(self) -> np.ndarray:
        return self.vertices()[self.triangles]

    def face_normals(self) -> np.ndarray:
        tv = self.triangle_vertices()
        n = np.cross(tv[:, 1] - tv[:, 0], tv[:, 2] - tv[:, 0])
        lens = np.linalg.norm(n, axis=1, keepdims=True)
        lens[lens == 0] = 1.0
        return n / lens

    def quad_areas(self) -> np.ndarray:
        tv = self.triangle_vertices()
        a = 0.5 * np.linalg.norm(np.cross(tv[:, 1] - tv[:, 0], tv[:, 2] - tv[:, 0]), axis=1)
        return a[0::2] + a[1::2]


def _segment_tangents(samples: np.ndarray) -> np.ndarray:
    d = np.diff(samples, axis=0)
    lens = np.linalg.norm(d, axis=1)
    if np.any(lens <= 0.0):
        raise ValueError("zero-length segment in mean strand")
    t = d / lens[:, None]
    return np.concatenate([t, t[-1:]])  # last sample copies previous direction


def _transport_rotations(tangents: np.ndarray) -> np.ndarray:
    """Per-segment minimal rotations R_j with t_{j+1} = R_j t_j (Rodrigues)."""
    n = len(tangents)
    rots = np.empty((n - 1, 3, 3))
    eye = np.eye(3)
    for j in range(n - 1):
        t0, t1 = tangents[j], tangents[j + 1]
        axis = np.cross(t0, t1)
        s = np.linalg.norm(axis)
        c = float(t0 @ t1)
        if s < 1e-14:
            if c < 0.0:
                raise ValueError("strand reverses direction; transport undefined")
            rots[j] = eye
            continue
        k = axis / s
        kx = np.array([[0.0, -k[2], k[1]],
                       [k[2], 0.0, -k[0]],
                       [-k[1], k[0], 0.0]])
        rots[j] = eye + s * kx + (1.0 - c) * (kx @ kx)
    return rots


def bishop_frames(mean: Strand, root_normal: np.ndarray) -> FrameField:
    """Twist-free frames: parallel transport of the root normal along tangents."""
    t = _segment_tangents(mean.samples)
    rots = _transport_rotations(t)
    n0 = np.asarray(root_normal, dtype=np.float64)
    n0 = n0 - (n0 @ t[0]) * t[0]
    nrm = np.linalg.norm(n0)
    if nrm < 1e-12:
        raise ValueError("root normal parallel to first tangent")
    normals = np.empty_like(t)
    normals[0] = n0 / nrm
    for j in range(len(t) - 1):
        nj = rots[j] @ normals[j]
        nj = nj - (nj @ t[j + 1]) * t[j + 1]  # drift control
        normals[j + 1] = nj / np.linalg.norm(nj)
    binormals = np.cross(t, normals)
    return FrameField(tangents=t, normals=normals, binormals=binormals)


def card_widths(model: HairModel, cluster: StrandCluster,
                frames: FrameField) -> np.ndarray:
    """Per-cross-section half-width: max member offset along the binormal,
    measured at the corresponding sample index."""
    offsets = model.samples[cluster.member_indices] - cluster.mean_strand.samples
    proj = np.einsum("msk,sk->ms", offsets, frames.binormals)
    return np.abs(proj).max(axis=0)


def downsample_indices(n_samples: int, n_quads: int) -> np.ndarray:
    """Cross-section sample indices: round(j*(n_samples-1)/n_quads), j=0..n_quads."""
    if n_quads < 1:
        raise ValueError("n_quads must be >= 1")
    if n_quads + 1 > n_samples:
        raise ValueError(f"n_quads+1 = {n_quads + 1} exceeds sample count {n_samples}")
    return np.round(np.arange(n_quads + 1) * (n_samples - 1) / n_quads).astype(np.int64)


def build_card(mean: Strand, frames: FrameField, widths: np.ndarray,
               n_quads: int, min_width: float) -> CardGeometry:
    """Assemble the strip: rails at downsampled cross-sections along the binormal."""
    idx = downsample_indices(mean.n_samples, n_quads)
    half = np.maximum(np.asarray(widths, dtype=np.float64)[idx], min_width)
    center = mean.samples[idx]
    b = frames.binormals[idx]
    rails = np.empty((len(idx), 2, 3))
    rails[:, 0] = center - half[:, None] * b
    rails[:, 1] = center + half[:, None] * b
    return CardGeometry(rails=rails, centerline=center.copy(), sample_indices=idx)


def root_normal_candidates(first_tangent: np.ndarray, n: int) -> np.ndarray:
    """n equally spaced unit vectors on the circle orthogonal to the tangent.

    Basis is deterministic: e1 from the coordinate axis least aligned with t.
    """
    t = np.asarray(first_tangent, dtype=np.float64)
    t = t / np.linalg.norm(t)
    ref = np.zeros(3)
    ref[int(np.argmin(np.abs(t)))] = 1.0
    e1 = np.cross(ref, t)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(t, e1)
    theta = 2.0 * np.pi * np.arange(n) / n
    return np.cos(theta)[:, None] * e1 + np.sin(theta)[:, None] * e2


def projection_error(model: HairModel, cluster: StrandCluster,
                     card: CardGeometry) -> float:
    """Sum over member samples of the (unsquared) distance to the strip."""
    pts = model.samples[cluster.member_indices].reshape(-1, 3)
    tris = card.triangle_vertices()
    feet = closest_point_pairwise(tris, pts)
    d2 = ((pts[:, None, :] - feet) ** 2).sum(axis=2)
    return float(np.sqrt(d2.min(axis=1)).sum())


def orientation_search(model: HairModel, cluster: StrandCluster,
                       n_circle_samples: int = 36, min_width: float = 0.0,
                       debug_values: list | None = None
                       ) -> tuple[np.ndarray, float]:
    """Pick the root normal minimizing the projection error.

    Evaluates every candidate against the full-resolution strip (one quad per
    sample segment); ties break to the lowest candidate index.
    """
    if n_circle_samples < 2:
        raise ValueError("need at least 2 circle samples")
    mean = cluster.mean_strand
    tangents = _segment_tangents(mean.samples)
    rots = _transport_rotations(tangents)
    candidates = root_normal_candidates(tangents[0], n_circle_samples)

    # transport all candidate normals at once; rotations are shared
    n_cand = len(candidates)
    normals = np.empty((n_cand, mean.n_samples, 3))
    normals[:, 0] = candidates
    for j in range(mean.n_samples - 1):
        nj = normals[:, j] @ rots[j].T
        nj -= (nj @ tangents[j + 1])[:, None] * tangents[j + 1]
        normals[:, j + 1] = nj / np.linalg.norm(nj, axis=1, keepdims=True)
    binormals = np.cross(tangents[None, :, :], normals)

    offsets = model.samples[cluster.member_indices] - mean.samples
    proj = np.einsum("msk,csk->cms", offsets, binormals)
    widths = np.abs(proj).max(axis=1)  # (n_cand, n_s)

    best_i, best_l = 0, np.inf
    pts = model.samples[cluster.member_indices].reshape(-1, 3)
    for c in range(n_cand):
        half = np.maximum(widths[c], min_width)
        rails = np.empty((mean.n_samples, 2, 3))
        rails[:, 0] = mean.samples - half[:, None] * binormals[c]
        rails[:, 1] = mean.samples + half[:, None] * binormals[c]
        card = CardGeometry(rails=rails, centerline=mean.samples.copy(),
                            sample_indices=np.arange(mean.n_samples))
        feet = closest_point_pairwise(card.triangle_vertices(), pts)
        d2 = ((pts[:, None, :] - feet) ** 2).sum(axis=2)
        l_proj = float(np.sqrt(d2.min(axis=1)).sum())
        if debug_values is not None:
            debug_values.append(l_proj)
        if l_proj < best_l:  # strict improvement only, so ties keep lowest index
            best_i, best_l = c, l_proj
    return candidates[best_i], best_l


def cross_card(card: CardGeometry, mean: Strand, frames: FrameField,
               widths: np.ndarray, min_width: float = 0.0) -> CardGeometry:
    """The +90-degree partner card: rails along the rotated binormal.

    Rotating the binormal by +90 degrees about the tangent gives t x b = -n,
    so the crossed rails run along the frame normal direction.
    """
    idx = card.sample_indices
    rotated_b = np.cross(frames.tangents, frames.binormals)[idx]
    half = np.maximum(np.asarray(widths, dtype=np.float64)[idx], min_width)
    center = mean.samples[idx]
    rails = np.empty_like(card.rails)
    rails[:, 0] = center - half[:, None] * rotated_b
    rails[:, 1] = center + half[:, None] * rotated_b
    return CardGeometry(rails=rails, centerline=center.copy(),
                        sample_indices=idx.copy())


def export_cards_debug_obj(path, cards: list[CardGeometry]) -> None:
    """Untextured OBJ of the strips, one object per card."""
    with open(path, "w") as f:
        offset = 1
        for i, card in enumerate(cards):
            f.write(f"o card_{i}\n")
            for p in card.vertices():
                f.write(f"v {p[0]:.9g} {p[1]:.9g} {p[2]:.9g}\n")
            for tri in card.triangles:
                a, b, c = (int(x) + offset for x in tri)
                f.write(f"f {a} {b} {c}\n")
            offset += 2 * card.n_cross
