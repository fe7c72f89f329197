"""Differentiable strand-ribbon rasterizer: tangent, depth, and mask channels.

Strands are expanded into camera-facing ribbons and rasterized with hard
nearest-fragment visibility plus a one-pixel soft silhouette band: fragment
coverage ramps linearly across the screen-space boundary as
clamp(0.5 + signed_distance, 0, 1), so interior pixels are exactly opaque
and the two half-ramps of a shared internal edge tile to exactly 1. Pixel
alpha is the clamped sum of fragment coverages (union semantics).

Winner selection, coverage clamp states, and the tangent sign flip are
computed outside autograd and held constant through differentiation;
everything else is plain torch autograd in float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

_DEGENERATE_SIDE = 1e-12
_DEGENERATE_AREA = 1e-12
_BAND_MARGIN = 0.55  # half-pixel coverage support plus rounding slack


@dataclass(frozen=True)
class ViewCamera:
    """Orthographic camera looking along `direction` at `film_center`."""

    direction: np.ndarray  # unit view direction
    up: np.ndarray  # unit, orthogonal to direction
    film_center: np.ndarray
    film_extent: float  # full film width, world units
    resolution: int
    depth_radius: float  # depth normalized over [center - R, center + R]

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64)
        d = d / np.linalg.norm(d)
        u = np.asarray(self.up, dtype=np.float64)
        u = u - (u @ d) * d
        u = u / np.linalg.norm(u)
        object.__setattr__(self, "direction", d)
        object.__setattr__(self, "up", u)
        object.__setattr__(self, "film_center",
                           np.asarray(self.film_center, dtype=np.float64))
        if self.resolution < 1:
            raise ValueError("resolution must be positive")
        if self.film_extent < 2.0 * self.depth_radius * (1.0 - 1e-12):
            raise ValueError("film_extent must cover the model diameter")

    @property
    def right(self) -> np.ndarray:
        return np.cross(self.direction, self.up)


def sample_views(n: int, bounds, resolution: int = 256,
                 extent_factor: float = 2.2) -> list[ViewCamera]:
    """Deterministic quasi-uniform view directions on the sphere.

    Uses the golden-angle spiral; cameras look at the bounding center and
    the film covers `extent_factor` times the bounding radius on each side
    of center (factor >= 2 keeps the whole model on film).
    """
    if n < 1:
        raise ValueError("need at least one view")
    golden = np.pi * (3.0 - np.sqrt(5.0))
    views = []
    for i in range(n):
        z = 1.0 - (2.0 * i + 1.0) / n
        rho = np.sqrt(max(0.0, 1.0 - z * z))
        phi = golden * i
        d = np.array([rho * np.cos(phi), rho * np.sin(phi), z])
        ref = np.array([0.0, 0.0, 1.0])
        if abs(d @ ref) > 0.999:
            ref = np.array([1.0, 0.0, 0.0])
        views.append(ViewCamera(direction=d, up=ref,
                                film_center=bounds.center,
                                film_extent=extent_factor * bounds.radius,
                                resolution=resolution,
                                depth_radius=bounds.radius))
    return views


@dataclass
class ChannelImages:
    tangent: np.ndarray  # (res, res, 3) in [0,1], (t_cam + 1)/2
    depth: np.ndarray  # (res, res) in [0,1], 1 = far
    mask: np.ndarray  # (res, res) in [0,1]

    def validate(self) -> None:
        for a in (self.tangent, self.depth, self.mask):
            assert a.min() >= 0.0 and a.max() <= 1.0
        empty = self.mask == 0.0
        assert np.all(self.depth[empty] == 1.0)


@dataclass
class Ribbon:
    """Camera-facing triangle strip for one strand.

    vertices[j, 0] is the minus-side offset at sample j, [j, 1] the plus
    side; attrs holds the per-sample world-space tangent attribute.
    """

    vertices: np.ndarray  # (n, 2, 3)
    attrs: np.ndarray  # (n, 3)

    @property
    def n_samples(self) -> int:
        return self.vertices.shape[0]


def strand_tangent_attrs(samples: np.ndarray) -> np.ndarray:
    """Unit forward-difference tangents; the last sample copies its neighbor."""
    d = np.diff(samples, axis=-2)
    lens = np.linalg.norm(d, axis=-1, keepdims=True)
    lens[lens == 0.0] = 1.0
    t = d / lens
    return np.concatenate([t, t[..., -1:, :]], axis=-2)


def _expand_torch(points: torch.Tensor, widths: torch.Tensor,
                  camera: ViewCamera) -> torch.Tensor:
    """Camera-facing offsets: +-(width/2) along normalize(tangent x direction).

    points (S, n, 3), widths (S,) -> vertices (S, n, 2, 3). Degenerate
    samples (tangent parallel to the view axis, or zero-length segment)
    reuse the nearest valid side direction along the strand; fully
    degenerate strands fall back to the camera right axis.
    """
    S, n, _ = points.shape
    omega = torch.as_tensor(camera.direction, dtype=points.dtype)
    seg = points[:, 1:] - points[:, :-1]
    t = torch.cat([seg, seg[:, -1:]], dim=1)  # forward diff, last copies prev
    side = torch.cross(t, omega.expand_as(t), dim=2)
    lens = torch.linalg.norm(side, dim=2)
    side_hat = side / lens.clamp_min(1e-300).unsqueeze(2)

    with torch.no_grad():
        valid = (lens > _DEGENERATE_SIDE).numpy()
    idx = np.where(valid, np.arange(n)[None, :], -1)
    ff = np.maximum.accumulate(idx, axis=1)
    any_valid = valid.any(axis=1)
    first = np.argmax(valid, axis=1)
    use = np.where(ff >= 0, ff, first[:, None])
    use[~any_valid] = 0

    gather = torch.from_numpy(use).unsqueeze(2).expand(S, n, 3)
    side_used = torch.gather(side_hat, 1, gather)
    if not any_valid.all():
        fallback = torch.as_tensor(camera.right, dtype=points.dtype)
        dead = torch.from_numpy(~any_valid).view(S, 1, 1)
        side_used = torch.where(dead, fallback.expand_as(side_used), side_used)

    half = (0.5 * widths).view(S, 1, 1)
    minus = points - half * side_used
    plus = points + half * side_used
    return torch.stack([minus, plus], dim=2)


def expand_ribbon(strand, width: float, camera: ViewCamera) -> Ribbon:
    """Public single-strand expansion; `strand` is a Strand or (n, 3) array."""
    samples = getattr(strand, "samples", strand)
    samples = np.asarray(samples, dtype=np.float64)
    if width <= 0.0:
        raise ValueError("ribbon width must be positive")
    verts = _expand_torch(torch.from_numpy(samples[None]),
                          torch.tensor([float(width)], dtype=torch.float64),
                          camera)
    return Ribbon(vertices=verts[0].numpy(),
                  attrs=strand_tangent_attrs(samples))


def _strip_triangles(n_samples_per: np.ndarray) -> np.ndarray:
    """Zig-zag triangles for concatenated interleaved strips."""
    chunks = []
    base = 0
    for n in n_samples_per:
        j = np.arange(n - 1, dtype=np.int64)
        a, b, c, d = base + 2 * j, base + 2 * j + 1, base + 2 * j + 2, base + 2 * j + 3
        t0 = np.stack([a, b, c], axis=1)
        t1 = np.stack([b, d, c], axis=1)
        chunks.append(np.stack([t0, t1], axis=1).reshape(-1, 3))
        base += 2 * n
    return (np.concatenate(chunks) if chunks
            else np.empty((0, 3), dtype=np.int64))


def _project_torch(verts: torch.Tensor, camera: ViewCamera
                   ) -> tuple[torch.Tensor, torch.Tensor]:
    """World -> (pixel xy, normalized depth). Pixel centers sit at integers;
    image row 0 is the top of the film (along +up)."""
    c = torch.as_tensor(camera.film_center, dtype=verts.dtype)
    right = torch.as_tensor(camera.right, dtype=verts.dtype)
    up = torch.as_tensor(camera.up, dtype=verts.dtype)
    omega = torch.as_tensor(camera.direction, dtype=verts.dtype)
    rel = verts - c
    half = 0.5 * camera.film_extent
    res = camera.resolution
    x = ((rel @ right) / half + 1.0) * 0.5 * res - 0.5
    y = ((-(rel @ up)) / half + 1.0) * 0.5 * res - 0.5
    R = camera.depth_radius
    depth = ((rel @ omega) + R) / (2.0 * R)
    return torch.stack([x, y], dim=1), depth.clamp(0.0, 1.0)


def _coverage_bary(tv: torch.Tensor, p: torch.Tensor
                   ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Per-fragment coverage, barycentrics, and inside flag.

    tv (F, 3, 2) screen triangles, p (F, 2) pixel centers. Inside distance
    is the min distance to the three edge lines; outside distance the min
    point-to-segment distance. coverage = clamp(0.5 + signed, 0, 1).
    Outside fragments get clamp-renormalized barycentrics.
    """
    a, b, c = tv[:, 0], tv[:, 1], tv[:, 2]

    def cross2(u, v):
        return u[:, 0] * v[:, 1] - u[:, 1] * v[:, 0]

    det = cross2(b - a, c - a)
    orient = torch.sign(det)

    def edge_terms(p0, p1):
        e = p1 - p0
        elen = torch.linalg.norm(e, dim=1).clamp_min(1e-300)
        line = cross2(e, p - p0) / elen * orient
        tpar = (((p - p0) * e).sum(dim=1) / (elen * elen)).clamp(0.0, 1.0)
        foot = p0 + tpar.unsqueeze(1) * e
        seg = torch.linalg.norm(p - foot, dim=1)
        return line, seg

    l0, s0 = edge_terms(a, b)
    l1, s1 = edge_terms(b, c)
    l2, s2 = edge_terms(c, a)
    d_in = torch.minimum(torch.minimum(l0, l1), l2)
    d_out = torch.minimum(torch.minimum(s0, s1), s2)
    inside = d_in >= 0.0
    signed = torch.where(inside, d_in, -d_out)
    coverage = (0.5 + signed).clamp(0.0, 1.0)

    # affine barycentrics at the pixel center
    safe_det = torch.where(det.abs() < 1e-300, torch.ones_like(det), det)
    w1 = cross2(p - a, c - a) / safe_det
    w2 = cross2(b - a, p - a) / safe_det
    w0 = 1.0 - w1 - w2
    bary = torch.stack([w0, w1, w2], dim=1)
    clamped = bary.clamp_min(0.0)
    clamped = clamped / clamped.sum(dim=1, keepdim=True).clamp_min(1e-300)
    bary = torch.where(inside.unsqueeze(1), bary, clamped)
    return coverage, bary, inside


def _candidate_pixels(tpx: np.ndarray, res: int
                      ) -> tuple[np.ndarray, np.ndarray]:
    """All (pixel, triangle) pairs whose pixel center can have coverage > 0:
    integer boxes of each triangle's AABB inflated by the band margin."""
    x0 = np.ceil(tpx[:, :, 0].min(axis=1) - _BAND_MARGIN)
    x1 = np.floor(tpx[:, :, 0].max(axis=1) + _BAND_MARGIN)
    y0 = np.ceil(tpx[:, :, 1].min(axis=1) - _BAND_MARGIN)
    y1 = np.floor(tpx[:, :, 1].max(axis=1) + _BAND_MARGIN)
    x0 = np.clip(x0, 0, res - 1).astype(np.int64)
    x1 = np.clip(x1, 0, res - 1).astype(np.int64)
    y0 = np.clip(y0, 0, res - 1).astype(np.int64)
    y1 = np.clip(y1, 0, res - 1).astype(np.int64)
    ok = ((tpx[:, :, 0].max(axis=1) >= -_BAND_MARGIN)
          & (tpx[:, :, 0].min(axis=1) <= res - 1 + _BAND_MARGIN)
          & (tpx[:, :, 1].max(axis=1) >= -_BAND_MARGIN)
          & (tpx[:, :, 1].min(axis=1) <= res - 1 + _BAND_MARGIN)
          & (x1 >= x0) & (y1 >= y0))
    tri_ids = np.nonzero(ok)[0]
    if len(tri_ids) == 0:
        return (np.empty(0, dtype=np.int64),) * 2
    bw = x1[tri_ids] - x0[tri_ids] + 1
    bh = y1[tri_ids] - y0[tri_ids] + 1
    area = bw * bh
    rep = np.repeat(np.arange(len(tri_ids)), area)
    offs = np.arange(area.sum()) - np.repeat(np.cumsum(area) - area, area)
    px = x0[tri_ids][rep] + offs % bw[rep]
    py = y0[tri_ids][rep] + offs // bw[rep]
    return py * res + px, tri_ids[rep]


@dataclass
class Selection:
    """Frozen discrete rasterization state (indices and branch flags).

    Also serves as the discontinuity signature for finite-difference
    harnesses: two renders are comparable only if selections are equal.
    """

    cand_pix: np.ndarray  # (F,) linear pixel ids with coverage > 0
    cand_tri: np.ndarray  # (F,)
    cand_state: np.ndarray  # (F,) ramp state: 0 partial, 1 saturated
    win_pix: np.ndarray  # (P,) linear pixel ids owning a winner
    win_frag: np.ndarray  # (P,) index into cand_* of the winning fragment
    win_inside: np.ndarray  # (P,) bool
    alpha_sat: np.ndarray  # (P,) bool, pixel coverage sum exceeded 1
    flip: np.ndarray  # (P,) tangent sign flip, +-1
    tiny: np.ndarray  # (P,) bool, interpolated tangent below norm floor

    def equal(self, other: "Selection") -> bool:
        for f in ("cand_pix", "cand_tri", "cand_state", "win_pix",
                  "win_frag", "win_inside", "alpha_sat", "flip", "tiny"):
            if not np.array_equal(getattr(self, f), getattr(other, f)):
                return False
        return True


def _select(px: torch.Tensor, depth: torch.Tensor, attrs_cam: torch.Tensor,
            tris: np.ndarray, res: int) -> Selection:
    """No-grad pass: candidate fragments, winners, and branch flags."""
    with torch.no_grad():
        tpx = px[torch.from_numpy(tris)]
        cand_pix, cand_tri = _candidate_pixels(tpx.numpy(), res)
        if len(cand_pix) == 0:
            e = np.empty(0, dtype=np.int64)
            eb = np.empty(0, dtype=bool)
            return Selection(e, e, e, e, e, eb, eb,
                             np.empty(0, dtype=np.float64), eb)
        tv = tpx[torch.from_numpy(cand_tri)]
        p = torch.stack([torch.from_numpy((cand_pix % res).astype(np.float64)),
                         torch.from_numpy((cand_pix // res).astype(np.float64))],
                        dim=1)
        cov, bary, inside = _coverage_bary(tv, p)
        cov = cov.numpy()
        keep = cov > 0.0
        cand_pix, cand_tri = cand_pix[keep], cand_tri[keep]
        cov, inside = cov[keep], inside.numpy()[keep]
        bary = bary.numpy()[keep]
        if len(cand_pix) == 0:
            e = np.empty(0, dtype=np.int64)
            eb = np.empty(0, dtype=bool)
            return Selection(e, e, e, e, e, eb, eb,
                             np.empty(0, dtype=np.float64), eb)

        frag_depth = (bary * depth.numpy()[tris[cand_tri]]).sum(axis=1)
        # winner rank: any inside fragment beats all outside ones; inside
        # compete on depth, outside on coverage; triangle id breaks ties
        rank = np.where(inside, frag_depth, 3.0 - cov)
        order = np.lexsort((cand_tri, rank, cand_pix))
        sp = cand_pix[order]
        heads = np.ones(len(sp), dtype=bool)
        heads[1:] = sp[1:] != sp[:-1]
        win = order[heads]

        alpha_raw = np.zeros(res * res)
        np.add.at(alpha_raw, cand_pix, cov)
        win_pix = cand_pix[win]

        tw = (bary[win][:, :, None] * attrs_cam.numpy()[tris[cand_tri[win]]]
              ).sum(axis=1)
        z, y, x = tw[:, 2], tw[:, 1], tw[:, 0]
        flip = np.where(np.abs(z) > 1e-9, np.sign(z),
                        np.where(np.abs(y) > 1e-9, np.sign(y),
                                 np.where(np.abs(x) > 1e-9, np.sign(x), 1.0)))
        norm = np.linalg.norm(tw, axis=1)
        return Selection(cand_pix=cand_pix, cand_tri=cand_tri,
                         cand_state=(cov >= 1.0).astype(np.int64),
                         win_pix=win_pix, win_frag=win,
                         win_inside=inside[win],
                         alpha_sat=alpha_raw[win_pix] > 1.0,
                         flip=flip, tiny=norm < 1e-9)


def _evaluate(sel: Selection, px: torch.Tensor, depth: torch.Tensor,
              attrs_cam: torch.Tensor, tris: np.ndarray, res: int
              ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Differentiable pass under the frozen selection."""
    dtype = px.dtype
    mask = torch.zeros(res * res, dtype=dtype)
    tangent = torch.full((res * res, 3), 0.5, dtype=dtype)
    depth_img = torch.ones(res * res, dtype=dtype)
    if len(sel.cand_pix) == 0:
        return (tangent.view(res, res, 3), depth_img.view(res, res),
                mask.view(res, res))

    tris_t = torch.from_numpy(tris)
    tv = px[tris_t[torch.from_numpy(sel.cand_tri)]]
    p = torch.stack(
        [torch.from_numpy((sel.cand_pix % res).astype(np.float64)),
         torch.from_numpy((sel.cand_pix // res).astype(np.float64))],
        dim=1).to(dtype)
    cov, bary, _ = _coverage_bary(tv, p)
    alpha = torch.zeros(res * res, dtype=dtype)
    alpha = alpha.index_add(0, torch.from_numpy(sel.cand_pix), cov)
    alpha = alpha.clamp(0.0, 1.0)
    # two half-ramps across a shared internal edge tile to 1 only up to
    # rounding; snap so interior pixels are exactly opaque
    alpha = torch.where(alpha.detach() > 1.0 - 1e-12,
                        torch.ones_like(alpha), alpha)

    wf = torch.from_numpy(sel.win_frag)
    wb = bary[wf]  # (P, 3)
    wtris = tris_t[torch.from_numpy(sel.cand_tri[sel.win_frag])]
    wdepth = (wb * depth[wtris]).sum(dim=1)
    wt = (wb.unsqueeze(2) * attrs_cam[wtris]).sum(dim=1)
    wt = wt * torch.from_numpy(sel.flip).unsqueeze(1).to(dtype)
    norm = torch.linalg.norm(wt, dim=1, keepdim=True).clamp_min(1e-300)
    unit = wt / norm
    fallback = torch.zeros_like(unit)
    fallback[:, 2] = 1.0
    tiny = torch.from_numpy(sel.tiny).unsqueeze(1)
    unit = torch.where(tiny, fallback, unit)
    enc = 0.5 * (unit + 1.0)

    wp = torch.from_numpy(sel.win_pix)
    a = alpha[wp]
    tangent[wp] = a.unsqueeze(1) * enc + (1.0 - a.unsqueeze(1)) * 0.5
    depth_img[wp] = a * wdepth + (1.0 - a) * 1.0
    mask = alpha
    return (tangent.view(res, res, 3), depth_img.view(res, res),
            mask.view(res, res))


def _attrs_to_camera(attrs_world: torch.Tensor, camera: ViewCamera
                     ) -> torch.Tensor:
    basis = np.stack([camera.right, camera.up, -camera.direction], axis=1)
    return attrs_world @ torch.as_tensor(basis, dtype=attrs_world.dtype)


def render_strands_torch(points: torch.Tensor, attrs: torch.Tensor,
                         widths: torch.Tensor, camera: ViewCamera
                         ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor,
                                    Selection]:
    """Differentiable render of (S, n, 3) strands with (S, n, 3) tangent
    attributes and (S,) ribbon widths. Returns torch channel images
    (tangent, depth, mask) and the frozen Selection."""
    S, n, _ = points.shape
    verts = _expand_torch(points, widths, camera).reshape(-1, 3)
    attrs_v = attrs.repeat_interleave(2, dim=1).reshape(-1, 3)
    attrs_cam = _attrs_to_camera(attrs_v, camera)
    px, depth = _project_torch(verts, camera)
    tris = _strip_triangles(np.full(S, n))
    tris = _drop_degenerate(tris, px)
    sel = _select(px.detach(), depth.detach(), attrs_cam.detach(),
                  tris, camera.resolution)
    tan, dep, mask = _evaluate(sel, px, depth, attrs_cam, tris,
                               camera.resolution)
    return tan, dep, mask, sel


def _drop_degenerate(tris: np.ndarray, px: torch.Tensor) -> np.ndarray:
    with torch.no_grad():
        tv = px[torch.from_numpy(tris)].numpy()
    det = ((tv[:, 1, 0] - tv[:, 0, 0]) * (tv[:, 2, 1] - tv[:, 0, 1])
           - (tv[:, 1, 1] - tv[:, 0, 1]) * (tv[:, 2, 0] - tv[:, 0, 0]))
    return tris[np.abs(det) > _DEGENERATE_AREA]


class RenderRecord:
    """Forward-pass tape for the array-level backward entry point."""

    def __init__(self, points, attrs, widths, images):
        self.points = points
        self.attrs = attrs
        self.widths = widths
        self.images = images
        self.consumed = False


def rasterize(ribbons: list[Ribbon], camera: ViewCamera, record: bool = False):
    """Rasterize pre-expanded ribbons (numpy in, numpy out).

    Ribbons may have different sample counts. With record=True also returns
    a RenderRecord for rasterize_backward. Gradients from the record flow
    to ribbon vertices via their generating strand points: the record is
    keyed on the ribbon midlines (vertex pair means), tangent attributes,
    and per-ribbon widths.
    """
    res = camera.resolution
    if not ribbons:
        images = ChannelImages(
            tangent=np.full((res, res, 3), 0.5), depth=np.ones((res, res)),
            mask=np.zeros((res, res)))
        if record:
            return images, RenderRecord(None, None, None, None)
        return images

    counts = np.array([r.n_samples for r in ribbons])
    if not (counts == counts[0]).all():
        # ragged scenes take the concatenated-vertex path, no gradients
        return _rasterize_ragged(ribbons, camera)

    verts = np.stack([r.vertices for r in ribbons])  # (S, n, 2, 3)
    mid = verts.mean(axis=2)
    widths_w = np.linalg.norm(verts[:, :, 1] - verts[:, :, 0], axis=2)
    points = torch.from_numpy(mid).requires_grad_(record)
    attrs = torch.from_numpy(np.stack([r.attrs for r in ribbons])
                             ).requires_grad_(record)
    widths = torch.from_numpy(widths_w.max(axis=1)).requires_grad_(record)
    tan, dep, mask, _ = render_strands_torch(points, attrs, widths, camera)
    images = ChannelImages(tangent=tan.detach().numpy(),
                           depth=dep.detach().numpy(),
                           mask=mask.detach().numpy())
    images.validate()
    if record:
        return images, RenderRecord(points, attrs, widths, (tan, dep, mask))
    return images


def _rasterize_ragged(ribbons: list[Ribbon], camera: ViewCamera
                      ) -> ChannelImages:
    verts = np.concatenate([r.vertices.reshape(-1, 3) for r in ribbons])
    attrs = np.concatenate([np.repeat(r.attrs, 2, axis=0) for r in ribbons])
    tris = _strip_triangles(np.array([r.n_samples for r in ribbons]))
    vt = torch.from_numpy(verts)
    at = _attrs_to_camera(torch.from_numpy(attrs), camera)
    px, depth = _project_torch(vt, camera)
    tris = _drop_degenerate(tris, px)
    sel = _select(px, depth, at, tris, camera.resolution)
    tan, dep, mask = _evaluate(sel, px, depth, at, tris, camera.resolution)
    images = ChannelImages(tangent=tan.numpy(), depth=dep.numpy(),
                           mask=mask.numpy())
    images.validate()
    return images


def rasterize_backward(rec: RenderRecord, d_tangent: np.ndarray,
                       d_depth: np.ndarray, d_mask: np.ndarray):
    """Reverse-mode gradients for a recorded forward pass.

    Returns (d_points (S, n, 3), d_attrs (S, n, 3), d_widths (S,)).
    Occlusion winners and clamp branches are locally constant, so their
    gradient contribution is zero by construction.
    """
    if rec is None or rec.images is None or rec.points is None:
        raise RuntimeError("backward requires a recorded forward pass")
    if rec.consumed:
        raise RuntimeError("render record already consumed")
    rec.consumed = True
    tan, dep, mask = rec.images
    total = ((tan * torch.from_numpy(d_tangent)).sum()
             + (dep * torch.from_numpy(d_depth)).sum()
             + (mask * torch.from_numpy(d_mask)).sum())
    gp, ga, gw = torch.autograd.grad(total,
                                     [rec.points, rec.attrs, rec.widths],
                                     allow_unused=True)
    zeros = lambda t: np.zeros(t.shape)
    return (gp.numpy() if gp is not None else zeros(rec.points),
            ga.numpy() if ga is not None else zeros(rec.attrs),
            gw.numpy() if gw is not None else zeros(rec.widths))


def save_channel_png(array: np.ndarray, path) -> None:
    """Dump a [0,1] channel image (grayscale or RGB) as 8-bit PNG."""
    from PIL import Image
    a = np.clip(array, 0.0, 1.0)
    data = np.round(a * 255.0).astype(np.uint8)
    mode = "RGB" if data.ndim == 3 else "L"
    Image.fromarray(data, mode=mode).save(path)


def save_signed_png(array: np.ndarray, path) -> None:
    """Dump a signed image as magnitude-scaled, 0.5-centered PNG."""
    m = np.abs(array).max()
    scaled = array / m if m > 0 else array
    save_channel_png(0.5 * (scaled + 1.0), path)
