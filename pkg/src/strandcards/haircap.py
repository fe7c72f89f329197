"""Scalp cap: a thin shell of head faces under the hair roots.

The cap mesh is the set of head faces hit by at least one root projection,
expanded by their one-ring (vertex-adjacent) neighbours and extruded a
small distance along vertex normals. Its texture carries the near-scalp
fuzz: short root sub-segments drawn as strokes into the cap uv chart.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .hairio import HairModel, HeadMesh
from .meshquery import MeshQuery
from .softrender import save_channel_png
from .strokes import (Stroke, accumulate_coverage, chart_to_texels,
                      composite_strokes)


@dataclass(frozen=True)
class CapMesh:
    """Extruded scalp shell with a per-face-corner uv chart.

    vertices are already offset; source_vertices index into the head mesh
    so the extrusion distance stays checkable. chart_scale is uv units per
    world unit for each face (mean isotropic scale).
    """

    vertices: np.ndarray  # (V, 3) extruded positions
    triangles: np.ndarray  # (F, 3) int into vertices
    uv_corners: np.ndarray  # (F, 3, 2) in [0, 1]
    face_ids: np.ndarray  # (F,) original head face indices
    source_vertices: np.ndarray  # (V,) original head vertex indices
    chart_scale: np.ndarray  # (F,)

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    def validate(self, head: HeadMesh, eps_cap: float) -> None:
        src = head.vertices[self.source_vertices]
        d = np.linalg.norm(self.vertices - src, axis=1)
        if len(d) and np.abs(d - eps_cap).max() > 1e-9:
            raise ValueError("cap extrusion distance drifted")


@dataclass
class CapTexture:
    tangent: np.ndarray  # (H, W, 3)
    alpha: np.ndarray  # (H, W)
    ao: np.ndarray  # (H, W)


def _empty_cap() -> CapMesh:
    return CapMesh(vertices=np.zeros((0, 3)),
                   triangles=np.zeros((0, 3), dtype=np.int64),
                   uv_corners=np.zeros((0, 3, 2)),
                   face_ids=np.zeros(0, dtype=np.int64),
                   source_vertices=np.zeros(0, dtype=np.int64),
                   chart_scale=np.zeros(0))


def one_ring_faces(head: HeadMesh, faces: np.ndarray) -> np.ndarray:
    """Faces sharing at least one vertex with any face in the set."""
    faces = np.asarray(faces, dtype=np.int64)
    if len(faces) == 0:
        return faces
    verts = np.unique(head.triangles[faces])
    touch = np.isin(head.triangles, verts).any(axis=1)
    return np.nonzero(touch)[0]


def _auto_charts(head: HeadMesh, faces: np.ndarray
                 ) -> tuple[np.ndarray, np.ndarray]:
    """Per-face isometric charts packed on a square grid.

    Returns (uv_corners (F, 3, 2), scale (F,)). Every face gets the same
    uv-per-world scale so stroke widths stay uniform across the cap.
    """
    f = len(faces)
    cells = int(np.ceil(np.sqrt(f)))
    margin = 0.08
    tri = head.vertices[head.triangles[faces]]  # (F, 3, 3)
    e1 = tri[:, 1] - tri[:, 0]
    e2 = tri[:, 2] - tri[:, 0]
    l1 = np.linalg.norm(e1, axis=1)
    l1s = np.where(l1 < 1e-15, 1.0, l1)
    x_axis = e1 / l1s[:, None]
    n = np.cross(e1, e2)
    nl = np.linalg.norm(n, axis=1)
    nl = np.where(nl < 1e-15, 1.0, nl)
    y_axis = np.cross(n / nl[:, None], x_axis)
    # isometric 2D embedding: corner 0 at origin
    p1 = np.stack([l1, np.zeros(f)], axis=1)
    p2 = np.stack([np.einsum("ij,ij->i", e2, x_axis),
                   np.einsum("ij,ij->i", e2, y_axis)], axis=1)
    pts = np.stack([np.zeros((f, 2)), p1, p2], axis=1)  # (F, 3, 2)
    lo = pts.min(axis=1)
    hi = pts.max(axis=1)
    extent = float(np.max(hi - lo)) if f else 1.0
    if extent <= 0.0:
        extent = 1.0
    cell = 1.0 / cells
    scale = cell * (1.0 - 2.0 * margin) / extent
    uv = (pts - lo[:, None, :]) * scale
    rows, cols = np.divmod(np.arange(f), cells)
    origin = np.stack([cols * cell + margin * cell,
                       rows * cell + margin * cell], axis=1)
    uv = uv + origin[:, None, :]
    return uv, np.full(f, scale)


def _head_uv_charts(head: HeadMesh, faces: np.ndarray
                    ) -> tuple[np.ndarray, np.ndarray]:
    uv = head.uv[head.triangles[faces]]  # (F, 3, 2)
    tri = head.vertices[head.triangles[faces]]
    world_area = 0.5 * np.linalg.norm(
        np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    d1 = uv[:, 1] - uv[:, 0]
    d2 = uv[:, 2] - uv[:, 0]
    uv_area = 0.5 * np.abs(d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])
    safe = np.where(world_area < 1e-18, 1.0, world_area)
    scale = np.sqrt(uv_area / safe)
    return uv, scale


def build_cap_mesh(head: HeadMesh, model: HairModel | None, eps_cap: float,
                   max_root_distance: float | None = None) -> CapMesh:
    """Select root-bearing faces plus one-ring, extrude by eps_cap.

    model=None stands for a hairless model (HairModel itself refuses to
    hold zero strands) and yields an empty cap. Roots farther than
    max_root_distance from the head surface are ignored (default: 10% of
    the head bounding radius). All ignored means no scalp contact: warn
    and return an empty cap.
    """
    if eps_cap <= 0.0:
        raise ValueError("eps_cap must be positive")
    if model is None or len(model.strands) == 0:
        return _empty_cap()
    roots = model.samples[:, 0]
    if max_root_distance is None:
        center = 0.5 * (head.vertices.min(axis=0) + head.vertices.max(axis=0))
        radius = float(np.linalg.norm(head.vertices - center, axis=1).max())
        max_root_distance = 0.1 * radius
    hit_face, _, dist = MeshQuery(head.vertices, head.triangles).query(roots)
    near = dist <= max_root_distance
    if not near.any():
        warnings.warn("no hair roots near the head surface; cap is empty")
        return _empty_cap()
    hit = np.unique(hit_face[near])
    faces = one_ring_faces(head, hit)

    used = np.unique(head.triangles[faces])
    remap = np.full(len(head.vertices), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    verts = head.vertices[used] + eps_cap * head.vertex_normals[used]
    tris = remap[head.triangles[faces]]
    if head.uv is not None:
        uv, scale = _head_uv_charts(head, faces)
    else:
        uv, scale = _auto_charts(head, faces)
    return CapMesh(vertices=verts, triangles=tris, uv_corners=uv,
                   face_ids=faces, source_vertices=used, chart_scale=scale)


def root_subsegment(points: np.ndarray, eps_root: float) -> np.ndarray:
    """First eps_root of arc length along a strand polyline."""
    pts = np.asarray(points, dtype=np.float64)
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    out = [pts[0]]
    left = eps_root
    for j in range(len(seg)):
        if seg[j] <= 0.0:
            continue
        if seg[j] >= left:
            out.append(pts[j] + (left / seg[j]) * (pts[j + 1] - pts[j]))
            return np.array(out)
        out.append(pts[j + 1])
        left -= seg[j]
    return np.array(out)  # strand shorter than eps_root: keep it all


def _face_rows(cap: CapMesh) -> dict[int, int]:
    return {int(f): i for i, f in enumerate(cap.face_ids)}


def _project_to_chart(cap: CapMesh, head: HeadMesh, row: int,
                      pts: np.ndarray) -> np.ndarray:
    """Barycentric uv of points against one cap face, clamped inside."""
    tri = head.vertices[head.triangles[cap.face_ids[row]]]
    a, b, c = tri
    e1, e2 = b - a, c - a
    m = np.array([[e1 @ e1, e1 @ e2], [e1 @ e2, e2 @ e2]])
    rhs = np.stack([(pts - a) @ e1, (pts - a) @ e2], axis=1)
    try:
        sol = np.linalg.solve(m, rhs.T).T
    except np.linalg.LinAlgError:
        sol = np.zeros((len(pts), 2))
    bary = np.stack([1.0 - sol[:, 0] - sol[:, 1], sol[:, 0], sol[:, 1]],
                    axis=1)
    bary = np.clip(bary, 0.0, None)  # keep strokes on the owning face
    s = bary.sum(axis=1, keepdims=True)
    s[s < 1e-15] = 1.0
    bary = bary / s
    return np.einsum("pk,kj->pj", bary, cap.uv_corners[row])


def _face_frame(head: HeadMesh, cap: CapMesh, row: int) -> np.ndarray:
    """Rows (e_u, e_v, e_n): chart-aligned orthonormal frame of a face."""
    tri = head.vertices[head.triangles[cap.face_ids[row]]]
    uv = cap.uv_corners[row]
    e1, e2 = tri[1] - tri[0], tri[2] - tri[0]
    n = np.cross(e1, e2)
    nl = np.linalg.norm(n)
    if nl < 1e-15:
        return np.eye(3)
    n = n / nl
    # world direction whose chart image is +u: pull back (1, 0) through
    # the affine map world->uv
    d1, d2 = uv[1] - uv[0], uv[2] - uv[0]
    det = d1[0] * d2[1] - d1[1] * d2[0]
    if abs(det) < 1e-18:
        e_u = e1 / max(np.linalg.norm(e1), 1e-15)
    else:
        alpha = np.array([d2[1], -d1[1]]) / det
        e_u = alpha[0] * e1 + alpha[1] * e2
        e_u = e_u - (e_u @ n) * n
        e_u = e_u / max(np.linalg.norm(e_u), 1e-15)
    e_v = np.cross(n, e_u)
    return np.stack([e_u, e_v, n])


def chart_mask(cap: CapMesh, shape: tuple[int, int]) -> np.ndarray:
    """Boolean texel mask: centers whose uv lies inside some cap face."""
    h, w = shape
    mask = np.zeros(shape, dtype=bool)
    for f in range(len(cap.triangles)):
        tex = chart_to_texels(cap.uv_corners[f], shape)
        x_lo = max(int(np.floor(tex[:, 0].min())), 0)
        x_hi = min(int(np.ceil(tex[:, 0].max())) + 1, w)
        y_lo = max(int(np.floor(tex[:, 1].min())), 0)
        y_hi = min(int(np.ceil(tex[:, 1].max())) + 1, h)
        if x_lo >= x_hi or y_lo >= y_hi:
            continue
        gx, gy = np.meshgrid(np.arange(x_lo, x_hi) + 0.5,
                             np.arange(y_lo, y_hi) + 0.5)
        a, b, c = tex
        d = np.stack([gx - a[0], gy - a[1]], axis=-1)
        e1, e2 = b - a, c - a
        det = e1[0] * e2[1] - e1[1] * e2[0]
        if abs(det) < 1e-18:
            continue
        s = (d[..., 0] * e2[1] - d[..., 1] * e2[0]) / det
        t = (e1[0] * d[..., 1] - e1[1] * d[..., 0]) / det
        inside = (s >= -1e-9) & (t >= -1e-9) & (s + t <= 1.0 + 1e-9)
        mask[y_lo:y_hi, x_lo:x_hi] |= inside
    return mask


def bake_cap_texture(head: HeadMesh, model: HairModel | None, cap: CapMesh,
                     eps_root: float, resolution: int = 512,
                     strand_width: float | None = None,
                     ao_saturation: float = 4.0,
                     ao_darkness: float = 0.85,
                     max_root_distance: float | None = None) -> CapTexture:
    """Draw root sub-segments into the cap chart.

    Tangent is face-local (chart u, chart v, normal components mapped to
    [0, 1]). AO is 1 minus a clamped stroke-density estimate, an
    approximation standing in for ray-cast occlusion at the scalp.
    Alpha and AO are confined to texels inside cap faces.
    """
    if eps_root <= 0.0:
        raise ValueError("eps_root must be positive")
    if cap.is_empty:
        raise ValueError("cap mesh is empty")
    shape = (resolution, resolution)
    if model is None or len(model.strands) == 0:
        return CapTexture(tangent=np.full(shape + (3,), 0.5),
                          alpha=np.zeros(shape), ao=np.ones(shape))
    if strand_width is None:
        strand_width = 2.0 * model.bounds.radius / resolution

    roots = model.samples[:, 0]
    hit_face, _, dist = MeshQuery(head.vertices, head.triangles).query(roots)
    if max_root_distance is None:
        center = 0.5 * (head.vertices.min(axis=0) + head.vertices.max(axis=0))
        radius = float(np.linalg.norm(head.vertices - center, axis=1).max())
        max_root_distance = 0.1 * radius
    rows = _face_rows(cap)

    strokes = []
    frames = {}
    for i in range(len(roots)):
        row = rows.get(int(hit_face[i]))
        if row is None or dist[i] > max_root_distance:
            continue  # root off the cap: contributes nothing
        sub = root_subsegment(model.samples[i], eps_root)
        if len(sub) < 2:
            continue
        uv = _project_to_chart(cap, head, row, sub)
        if row not in frames:
            frames[row] = _face_frame(head, cap, row)
        fr = frames[row]
        tan = np.diff(sub, axis=0)
        tan = np.concatenate([tan, tan[-1:]], axis=0)
        norms = np.linalg.norm(tan, axis=1, keepdims=True)
        norms[norms < 1e-15] = 1.0
        local = (tan / norms) @ fr.T
        pts = chart_to_texels(uv, shape)
        half_uv = 0.5 * strand_width * cap.chart_scale[row]
        half = np.full(len(sub), half_uv * resolution)
        strokes.append(Stroke(points=pts, half_width=half,
                              color=0.5 * (local + 1.0),
                              depth=np.zeros(len(sub)),
                              order=np.zeros(len(sub))))

    img = composite_strokes(shape, strokes)
    mask = chart_mask(cap, shape)
    rgb, _, alpha = img.over_background(bg_color=0.5)
    alpha = np.where(mask, alpha, 0.0)
    density = accumulate_coverage(shape, strokes) * mask
    ao = 1.0 - ao_darkness * np.clip(density / ao_saturation, 0.0, 1.0)
    return CapTexture(tangent=rgb, alpha=alpha, ao=ao)


def save_cap(cap: CapMesh, texture: CapTexture, out_dir) -> dict[str, Path]:
    """Write cap_mesh.obj plus the three texture maps."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = ["# scalp cap mesh"]
    for v in cap.vertices:
        lines.append("v %.9g %.9g %.9g" % tuple(v))
    for f in range(len(cap.triangles)):
        for k in range(3):
            lines.append("vt %.9g %.9g" % tuple(cap.uv_corners[f, k]))
    for f in range(len(cap.triangles)):
        a, b, c = (int(x) + 1 for x in cap.triangles[f])
        t0 = 3 * f + 1
        lines.append(f"f {a}/{t0} {b}/{t0 + 1} {c}/{t0 + 2}")
    obj = out_dir / "cap_mesh.obj"
    obj.write_text("\n".join(lines) + "\n")
    paths = {"obj": obj}
    for name, img in (("cap_tangent.png", texture.tangent),
                      ("cap_alpha.png", texture.alpha),
                      ("cap_ao.png", texture.ao)):
        p = out_dir / name
        save_channel_png(img, p)
        paths[name.split("_")[1].split(".")[0]] = p
    return paths
