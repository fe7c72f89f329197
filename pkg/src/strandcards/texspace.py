"""Explicit card textures: projection of strands onto card strips into chart
uv-space, and the differentiable reconstruction back to 3D.

A card has one rectangular chart: u in [0,1] across the width (u=0 on the
minus rail), v in [0,1] root to tip. Reconstruction blends the containing
triangle's world vertices by barycentric weights derived from the chart and
adds the stored z offset along that triangle's unit face normal. z is never
optimized; uv and rail positions are.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
import torch

from .cardgeom import CardGeometry
from .cluster import StrandCluster
from .hairio import HairModel
from .meshquery import barycentric, closest_point_pairwise

_TEX_MAGIC = b"CTEX"
_TEX_VERSION = 1


@dataclass(frozen=True)
class SurfacePoint:
    triangle_index: int
    u: float  # weight of triangle vertex 0
    v: float  # weight of triangle vertex 1; implicit w = 1 - u - v
    z: float  # signed offset along the triangle's unit face normal

    def __post_init__(self):
        if self.u < -1e-9 or self.v < -1e-9 or self.u + self.v > 1.0 + 1e-9:
            raise ValueError(f"barycentrics out of range: {self.u}, {self.v}")


@dataclass
class CardTexture:
    """UV-space strands of one card: arrays over (strand, sample)."""

    uv: np.ndarray  # (S, n, 2) in [0,1]^2
    z: np.ndarray  # (S, n)
    tangent3d: np.ndarray  # (S, n, 3) unit
    widths: np.ndarray  # (S,) world units, > 0

    @property
    def n_strands(self) -> int:
        return self.uv.shape[0]

    @property
    def n_samples(self) -> int:
        return self.uv.shape[1]

    def validate(self) -> None:
        assert self.uv.min() >= -1e-12 and self.uv.max() <= 1.0 + 1e-12
        lens = np.linalg.norm(self.tangent3d, axis=2)
        assert np.abs(lens - 1.0).max() < 1e-5
        assert self.widths.min() > 0.0


def default_strand_width(bounding_radius: float, resolution: int) -> float:
    """One-pixel-scale initial width: 2r / render resolution."""
    return 2.0 * bounding_radius / resolution


def closest_points_on_card(pts: np.ndarray, card: CardGeometry
                           ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batch closest-point query onto the strip.

    Returns (triangle_index, bary (N,3), z). Ties go to the lowest triangle
    index (argmin keeps the first minimum).
    """
    pts = np.atleast_2d(pts)
    tris = card.triangle_vertices()
    feet = closest_point_pairwise(tris, pts)  # (N, T, 3)
    d2 = ((pts[:, None, :] - feet) ** 2).sum(axis=2)
    ti = d2.argmin(axis=1)
    rows = np.arange(len(pts))
    foot = feet[rows, ti]
    bary = barycentric(tris[ti], foot)
    normals = card.face_normals()[ti]
    z = np.einsum("ij,ij->i", pts - foot, normals)
    return ti, bary, z


def closest_point_on_card(p: np.ndarray, card: CardGeometry) -> SurfacePoint:
    ti, bary, z = closest_points_on_card(np.asarray(p, dtype=np.float64)[None], card)
    b = np.clip(bary[0], 0.0, 1.0)
    return SurfacePoint(triangle_index=int(ti[0]), u=float(b[0]), v=float(b[1]),
                        z=float(z[0]))


def project_cluster(model: HairModel, cluster: StrandCluster,
                    card: CardGeometry, default_width: float) -> CardTexture:
    """Project every member strand into the card's chart."""
    if len(cluster.member_indices) == 0:
        raise ValueError("empty cluster")
    samples = model.samples[cluster.member_indices]  # (S, n, 3)
    s, n, _ = samples.shape
    ti, bary, z = closest_points_on_card(samples.reshape(-1, 3), card)
    corner_uv = card.uv_layout[card.triangles[ti]]  # (N, 3, 2)
    uv = np.einsum("nk,nkj->nj", bary, corner_uv)
    uv = np.clip(uv, 0.0, 1.0)

    diffs = np.diff(samples, axis=1)
    lens = np.linalg.norm(diffs, axis=2, keepdims=True)
    lens[lens == 0.0] = 1.0
    tangents = np.concatenate([diffs / lens, (diffs / lens)[:, -1:]], axis=1)

    return CardTexture(uv=uv.reshape(s, n, 2), z=z.reshape(s, n),
                       tangent3d=tangents,
                       widths=np.full(s, float(default_width)))


def chart_lookup(v_values: np.ndarray, uv: np.ndarray
                 ) -> tuple[np.ndarray, np.ndarray]:
    """Map chart uv to (quad band, diagonal side).

    v_values are the per-cross-section v coordinates (monotone, 0..1).
    side 0 is the triangle touching the band's lower cross-section pair
    (even triangle index), side 1 the upper one.
    """
    uv = np.atleast_2d(uv)
    band = np.searchsorted(v_values, uv[:, 1], side="right") - 1
    band = np.clip(band, 0, len(v_values) - 2)
    dv = v_values[band + 1] - v_values[band]
    s = (uv[:, 1] - v_values[band]) / dv
    side = (uv[:, 0] + s > 1.0).astype(np.int64)
    return band, side


def _chart_weights_np(u, s, side):
    """Barycentric weights for the two chart triangles of a band.

    side 0 triangle (2j): vertices (minus_j, plus_j, minus_{j+1}) at chart
    corners (0,0), (1,0), (0,1) in (u, s); side 1 triangle (2j+1): vertices
    (plus_j, plus_{j+1}, minus_{j+1}) at (1,0), (1,1), (0,1).
    """
    w0 = np.where(side == 0, 1.0 - u - s, 1.0 - s)
    w1 = np.where(side == 0, u, u - 1.0 + s)
    w2 = np.where(side == 0, s, 1.0 - u)
    return w0, w1, w2


def reconstruct_uv_points(card: CardGeometry, uv: np.ndarray, z: np.ndarray
                          ) -> np.ndarray:
    """World points for arbitrary chart (uv, z) pairs on one card."""
    uv = np.clip(np.atleast_2d(np.asarray(uv, dtype=np.float64)), 0.0, 1.0)
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    v_values = card.uv_layout[0::2, 1]
    band, side = chart_lookup(v_values, uv)
    pts = reconstruct_points_torch(
        torch.from_numpy(card.vertices()), torch.from_numpy(v_values),
        torch.from_numpy(uv), torch.from_numpy(z),
        torch.from_numpy(band), torch.from_numpy(side))
    return pts.numpy()


def reconstruct(texture: CardTexture, card: CardGeometry
                ) -> tuple[np.ndarray, np.ndarray]:
    """Rebuild 3D strands from the chart (numpy convenience wrapper).

    Returns (points (S, n, 3), out_of_chart flag mask (S, n)). Out-of-chart
    uv is clamped to the unit square before lookup.
    """
    uv = texture.uv.reshape(-1, 2)
    out_flag = ((uv < -1e-12) | (uv > 1.0 + 1e-12)).any(axis=1)
    uv = np.clip(uv, 0.0, 1.0)
    verts = torch.from_numpy(card.vertices())
    v_values = card.uv_layout[0::2, 1]
    band, side = chart_lookup(v_values, uv)
    pts = reconstruct_points_torch(
        verts, torch.from_numpy(v_values),
        torch.from_numpy(uv), torch.from_numpy(texture.z.reshape(-1)),
        torch.from_numpy(band), torch.from_numpy(side))
    s, n = texture.z.shape
    return pts.numpy().reshape(s, n, 3), out_flag.reshape(s, n)


def reconstruct_points_torch(vertices: torch.Tensor, v_values: torch.Tensor,
                             uv: torch.Tensor, z: torch.Tensor,
                             band: torch.Tensor, side: torch.Tensor
                             ) -> torch.Tensor:
    """Differentiable chart reconstruction.

    vertices: (2C, 3) interleaved strip vertices; v_values: (C,); uv: (N, 2)
    clamped to the unit square; z: (N,); band/side: precomputed integer
    selection (held constant through differentiation).

    Returns (N, 3) world points: barycentric blend of the containing
    triangle's vertices plus z along its unit face normal.
    """
    u = uv[:, 0]
    v = uv[:, 1]
    v_lo = v_values[band]
    v_hi = v_values[band + 1]
    s = (v - v_lo) / (v_hi - v_lo)

    side_f = side.to(uv.dtype)
    w0 = (1.0 - side_f) * (1.0 - u - s) + side_f * (1.0 - s)
    w1 = (1.0 - side_f) * u + side_f * (u - 1.0 + s)
    w2 = (1.0 - side_f) * s + side_f * (1.0 - u)

    # triangle vertex ids: side 0 -> (2j, 2j+1, 2j+2); side 1 -> (2j+1, 2j+3, 2j+2)
    base = 2 * band
    i0 = base + side
    i1 = torch.where(side == 0, base + 1, base + 3)
    i2 = base + 2

    p0 = vertices[i0]
    p1 = vertices[i1]
    p2 = vertices[i2]
    normal = torch.cross(p1 - p0, p2 - p0, dim=1)
    normal = normal / torch.linalg.norm(normal, dim=1, keepdim=True)
    return (w0.unsqueeze(1) * p0 + w1.unsqueeze(1) * p1 + w2.unsqueeze(1) * p2
            + z.unsqueeze(1) * normal)


def save_textures(path, textures: list[CardTexture]) -> None:
    """Versioned binary blob: counts, then flat float64 arrays per texture."""
    with open(path, "wb") as f:
        f.write(_TEX_MAGIC)
        f.write(struct.pack("<II", _TEX_VERSION, len(textures)))
        for t in textures:
            f.write(struct.pack("<II", t.n_strands, t.n_samples))
            f.write(np.ascontiguousarray(t.uv, dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(t.z, dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(t.tangent3d, dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(t.widths, dtype="<f8").tobytes())


def load_textures(path) -> list[CardTexture]:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _TEX_MAGIC:
            raise ValueError(f"bad texture blob magic {magic!r}")
        version, count = struct.unpack("<II", f.read(8))
        if version != _TEX_VERSION:
            raise ValueError(f"unsupported texture blob version {version}")
        out = []
        for _ in range(count):
            s, n = struct.unpack("<II", f.read(8))

            def arr(shape):
                numel = int(np.prod(shape))
                raw = f.read(8 * numel)
                if len(raw) < 8 * numel:
                    raise ValueError("truncated texture blob")
                return np.frombuffer(raw, dtype="<f8").reshape(shape).copy()

            out.append(CardTexture(uv=arr((s, n, 2)), z=arr((s, n)),
                                   tangent3d=arr((s, n, 3)), widths=arr((s,))))
        return out
