"""Objective terms for joint card optimization.

Visual terms (tangent/depth MSE and a soft Dice silhouette loss) compare
rendered channel images against reference renders and are averaged over the
supplied view set. Geometric terms regularize strand tangents against the
reconstructed geometry and penalize rail points that sink inside the head.
All terms are torch scalars; gradients flow through the renderer and the
chart reconstruction.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch

from .hairio import HeadMesh
from .meshquery import MeshQuery, barycentric, ray_crossing_parity

_FEATURE_TOL = 1e-9


@dataclass(frozen=True)
class LossWeights:
    tangent: float
    depth: float
    dice: float
    match: float
    collision: float

    def __post_init__(self):
        for name in ("tangent", "depth", "dice", "match", "collision"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"negative weight {name}")

    @staticmethod
    def straight_preset() -> "LossWeights":
        return LossWeights(tangent=10.0, depth=10.0, dice=5.0, match=3.0,
                           collision=1e5)

    @staticmethod
    def curly_preset() -> "LossWeights":
        return LossWeights(tangent=5.0, depth=15.0, dice=3.0, match=3.0,
                           collision=1e5)

    def scaled(self, factor: float) -> "LossWeights":
        return LossWeights(tangent=self.tangent * factor,
                           depth=self.depth * factor,
                           dice=self.dice * factor,
                           match=self.match * factor,
                           collision=self.collision * factor)


def _as_tensor(a) -> torch.Tensor:
    if isinstance(a, torch.Tensor):
        return a
    return torch.from_numpy(np.asarray(a, dtype=np.float64))


def channel_mse(rendered, reference, channel: str) -> torch.Tensor:
    """Mean squared per-pixel difference over one channel.

    Accepts ChannelImages or raw arrays/tensors; the mean runs over all
    pixels (and color components for the tangent channel).
    """
    a = getattr(rendered, channel, rendered)
    b = getattr(reference, channel, reference)
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"resolution mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return ((a - b) ** 2).mean()


def dice_loss(mask_a, mask_b) -> torch.Tensor:
    """Soft Dice dissimilarity: 1 - 2*sum(A*B) / (sum(A) + sum(B)).

    Identical binary masks give exactly 0, disjoint masks exactly 1. Two
    all-zero masks are defined as 0 (perfect agreement on emptiness).
    """
    a, b = _as_tensor(mask_a), _as_tensor(mask_b)
    if a.shape != b.shape:
        raise ValueError(f"resolution mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    den = a.sum() + b.sum()
    if den.detach().item() == 0.0:
        return den * 0.0  # keeps graph connectivity with zero gradient
    return 1.0 - 2.0 * (a * b).sum() / den


def match_loss(tangents, reconstructed) -> torch.Tensor:
    """Tangent-consistency penalty, summed over strands and samples.

    ||t - normalized forward difference of the reconstructed strand||^2;
    the last sample reuses the previous difference. Zero-length segments
    are skipped with a warning.
    """
    t = _as_tensor(tangents)
    r = _as_tensor(reconstructed)
    if t.shape != r.shape:
        raise ValueError("tangent/reconstruction shape mismatch")
    d = r[..., 1:, :] - r[..., :-1, :]
    d = torch.cat([d, d[..., -1:, :]], dim=-2)
    lens = torch.linalg.norm(d, dim=-1, keepdim=True)
    with torch.no_grad():
        dead = lens.squeeze(-1) <= 0.0
    if bool(dead.any()):
        warnings.warn("zero-length strand segment skipped in match loss")
    unit = d / lens.clamp_min(1e-300)
    sq = ((t - unit) ** 2).sum(dim=-1)
    sq = torch.where(dead, torch.zeros_like(sq), sq)
    return sq.sum()


class MeshSdf:
    """Signed distance to a triangle mesh.

    Magnitude is the exact unsigned distance (certified closest-point
    query); sign comes from the angle-weighted pseudonormal of the closest
    feature, negative inside. Open meshes get a warning and fall back to a
    ray-crossing-parity inside test.
    """

    def __init__(self, mesh: HeadMesh):
        self.mesh = mesh
        self.query_index = MeshQuery(mesh.vertices, mesh.triangles)
        self.closed = self._check_closed()
        if not self.closed:
            warnings.warn("head mesh is not closed; SDF sign falls back to "
                          "ray parity")
        self._build_pseudonormals()

    def _check_closed(self) -> bool:
        tris = self.mesh.triangles
        edges = {}
        for f, (a, b, c) in enumerate(tris):
            for i, j in ((a, b), (b, c), (c, a)):
                key = (min(i, j), max(i, j))
                edges.setdefault(key, []).append(i < j)
        for uses in edges.values():
            # closed and consistently wound: each edge traversed once in
            # each direction
            if len(uses) != 2 or uses[0] == uses[1]:
                return False
        return True

    def _build_pseudonormals(self) -> None:
        mesh = self.mesh
        fn = mesh.face_normals()
        self.face_normals = fn
        vn = np.zeros_like(mesh.vertices)
        edge_accum: dict[tuple[int, int], np.ndarray] = {}
        v = mesh.vertices
        for f, tri in enumerate(mesh.triangles):
            p = v[tri]
            for k in range(3):
                e1 = p[(k + 1) % 3] - p[k]
                e2 = p[(k + 2) % 3] - p[k]
                cosang = (e1 @ e2) / max(np.linalg.norm(e1) * np.linalg.norm(e2),
                                         1e-300)
                ang = np.arccos(np.clip(cosang, -1.0, 1.0))
                vn[tri[k]] += ang * fn[f]
            for i, j in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
                key = (min(i, j), max(i, j))
                edge_accum[key] = edge_accum.get(key, 0.0) + fn[f]
        self.vertex_pseudo = vn
        self.edge_pseudo = edge_accum

    def _feature_normal(self, tri_idx: np.ndarray, bary: np.ndarray
                        ) -> np.ndarray:
        tris = self.mesh.triangles[tri_idx]
        out = np.empty((len(tri_idx), 3))
        zero = bary < _FEATURE_TOL
        nzero = zero.sum(axis=1)
        face = nzero == 0
        out[face] = self.face_normals[tri_idx[face]]
        for i in np.nonzero(nzero == 1)[0]:
            k = int(np.argmax(zero[i]))
            a, b = tris[i][(k + 1) % 3], tris[i][(k + 2) % 3]
            out[i] = self.edge_pseudo[(min(a, b), max(a, b))]
        for i in np.nonzero(nzero >= 2)[0]:
            out[i] = self.vertex_pseudo[tris[i][int(np.argmax(bary[i]))]]
        return out

    def query(self, points: np.ndarray
              ) -> tuple[np.ndarray, np.ndarray]:
        """Signed distances and spatial gradients at `points` (N, 3)."""
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        tri_idx, foot, dist = self.query_index.query(points)
        bary = barycentric(self.query_index.tri_verts[tri_idx], foot)
        if self.closed:
            n = self._feature_normal(tri_idx, bary)
            sign = np.where(np.einsum("ij,ij->i", points - foot, n) >= 0.0,
                            1.0, -1.0)
        else:
            inside = ray_crossing_parity(points, self.query_index.tri_verts)
            sign = np.where(inside, -1.0, 1.0)
        values = sign * dist
        delta = points - foot
        safe = np.maximum(dist, 1e-300)
        grads = sign[:, None] * delta / safe[:, None]
        grads[dist < 1e-12] = 0.0
        return values, grads


class _SdfValues(torch.autograd.Function):
    """Signed distance with the closest-feature direction as gradient.

    Treats the closest feature as locally constant, which is exact away
    from the medial axis.
    """

    @staticmethod
    def forward(ctx, points: torch.Tensor, sdf: MeshSdf) -> torch.Tensor:
        vals, grads = sdf.query(points.detach().numpy())
        ctx.save_for_backward(torch.from_numpy(grads))
        return torch.from_numpy(vals)

    @staticmethod
    def backward(ctx, grad_out):
        (g,) = ctx.saved_tensors
        return grad_out.unsqueeze(1) * g, None


def sdf_values(points: torch.Tensor, sdf: MeshSdf) -> torch.Tensor:
    return _SdfValues.apply(points, sdf)


def collision_loss(rail_points, sdf: MeshSdf) -> torch.Tensor:
    """Sum of squared penetration depths over rail points; 0 outside."""
    p = _as_tensor(rail_points).reshape(-1, 3)
    vals = sdf_values(p, sdf)
    return (vals.clamp_max(0.0) ** 2).sum()


def total_loss(card_images: list, reference_images: list,
               tangents, reconstructed, rail_points,
               sdf: MeshSdf | None, weights: LossWeights
               ) -> tuple[torch.Tensor, dict]:
    """Weighted objective over a view subset plus geometric terms.

    card_images / reference_images: per-view (tangent, depth, mask)
    tensor triples of equal length; visual terms are averaged over views.
    Returns (total, per-term dict of floats).
    """
    if len(card_images) != len(reference_images):
        raise ValueError("view count mismatch")
    zero = torch.zeros((), dtype=torch.float64)
    terms = {"tangent": zero, "depth": zero.clone(), "dice": zero.clone()}
    if card_images:
        acc_t, acc_d, acc_s = [], [], []
        for (ct, cd, cm), (rt, rd, rm) in zip(card_images, reference_images):
            acc_t.append(channel_mse(ct, rt, "tangent"))
            acc_d.append(channel_mse(cd, rd, "depth"))
            acc_s.append(dice_loss(cm, rm))
        terms["tangent"] = torch.stack(acc_t).mean()
        terms["depth"] = torch.stack(acc_d).mean()
        terms["dice"] = torch.stack(acc_s).mean()
    terms["match"] = (match_loss(tangents, reconstructed)
                      if tangents is not None else zero.clone())
    terms["collision"] = (collision_loss(rail_points, sdf)
                          if sdf is not None and rail_points is not None
                          else zero.clone())
    total = (weights.tangent * terms["tangent"]
             + weights.depth * terms["depth"]
             + weights.dice * terms["dice"]
             + weights.match * terms["match"]
             + weights.collision * terms["collision"])
    return total, {k: float(v.detach()) for k, v in terms.items()}
