"""Final texture atlas baking and card-mesh export.

Each retained texture is rasterized into one atlas slot: anti-aliased
stroke coverage becomes alpha, tangents are encoded in the representative
card's local frame, depth stores the z offset over a symmetric per-slot
range, and ambient occlusion comes from hemisphere rays cast against the
reconstructed strand ribbons. Cards export as one OBJ whose uv map into
their assigned slots.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cardgeom import CardGeometry
from .meshquery import ray_hits
from .softrender import save_channel_png
from .strokes import Stroke, chart_to_texels, composite_strokes
from .texreduce import TextureAssignment, uv_width_scale
from .texspace import CardTexture, chart_lookup, reconstruct, \
    reconstruct_uv_points

_RAY_BLOCK = 8192  # bounds transient memory in the AO caster


@dataclass
class BakeConfig:
    slot_height: int = 256
    slot_width: int = 512
    slot_rows: int = 8
    slot_cols: int = 4
    ao_rays: int = 64
    ao_stride: int = 1
    ao_seed: int = 0
    whole_model_ao: bool = False
    depth_16bit: bool = False

    @property
    def atlas_shape(self) -> tuple[int, int]:
        return (self.slot_rows * self.slot_height,
                self.slot_cols * self.slot_width)

    @property
    def n_slots(self) -> int:
        return self.slot_rows * self.slot_cols

    def slot_cell(self, index: int) -> tuple[int, int]:
        return index // self.slot_cols, index % self.slot_cols

    def slot_window(self, index: int) -> tuple[slice, slice]:
        row, col = self.slot_cell(index)
        return (slice(row * self.slot_height, (row + 1) * self.slot_height),
                slice(col * self.slot_width, (col + 1) * self.slot_width))


@dataclass
class TextureAtlas:
    tangent: np.ndarray  # (H, W, 3) in [0, 1]
    depth: np.ndarray  # (H, W) in [0, 1], 0.5 = on-card
    alpha: np.ndarray  # (H, W) in [0, 1]
    ao: np.ndarray  # (H, W) in [0, 1], 1 = unoccluded
    config: BakeConfig
    z_max: np.ndarray = field(default_factory=lambda: np.zeros(0))


def _band_frames(card: CardGeometry) -> np.ndarray:
    """Orthonormal (e_u, e_v, e_n) per quad band of the strip, (B, 3, 3)."""
    rails = card.rails
    mids = rails.mean(axis=1)
    u_raw = 0.5 * ((rails[:-1, 1] - rails[:-1, 0])
                   + (rails[1:, 1] - rails[1:, 0]))
    v_raw = mids[1:] - mids[:-1]
    frames = np.empty((len(u_raw), 3, 3))
    for j in range(len(u_raw)):
        n = np.cross(u_raw[j], v_raw[j])
        ln = np.linalg.norm(n)
        if ln < 1e-15:
            frames[j] = np.eye(3)
            continue
        e_n = n / ln
        e_u = u_raw[j] / np.linalg.norm(u_raw[j])
        e_v = np.cross(e_n, e_u)
        frames[j] = np.stack([e_u, e_v, e_n])
    return frames


def _sample_bands(card: CardGeometry, uv_flat: np.ndarray) -> np.ndarray:
    v_values = card.uv_layout[0::2, 1]
    band, _ = chart_lookup(v_values, np.clip(uv_flat, 0.0, 1.0))
    return band


def card_local_tangents(texture: CardTexture, card: CardGeometry
                        ) -> np.ndarray:
    """World tangents expressed in the band frame of each sample."""
    frames = _band_frames(card)
    s, n, _ = texture.tangent3d.shape
    band = _sample_bands(card, texture.uv.reshape(-1, 2))
    f = frames[band]  # (S*n, 3, 3)
    t = texture.tangent3d.reshape(-1, 3)
    local = np.einsum("pij,pj->pi", f, t)
    return local.reshape(s, n, 3)


def slot_strokes(texture: CardTexture, card: CardGeometry,
                 shape: tuple[int, int]) -> list[Stroke]:
    """Texel-space strokes carrying local-encoded tangents and raw z."""
    h, w = shape
    scale = uv_width_scale(card)
    local = card_local_tangents(texture, card)
    strokes = []
    for i in range(len(texture.uv)):
        pts = chart_to_texels(texture.uv[i], shape)
        half = np.full(len(pts),
                       0.5 * float(texture.widths[i]) * scale * w)
        strokes.append(Stroke(points=pts, half_width=half,
                              color=0.5 * (local[i] + 1.0),
                              depth=texture.z[i].astype(np.float64),
                              order=texture.z[i].astype(np.float64)))
    return strokes


def _cosine_hemisphere(n_rays: int, rng: np.random.Generator) -> np.ndarray:
    u1 = rng.random(n_rays)
    u2 = rng.random(n_rays)
    r = np.sqrt(u1)
    theta = 2.0 * np.pi * u2
    return np.stack([r * np.cos(theta), r * np.sin(theta),
                     np.sqrt(1.0 - u1)], axis=1)


def ribbon_occluders(texture: CardTexture, card: CardGeometry) -> np.ndarray:
    """Flat ribbon triangles of the reconstructed strands, (T, 3, 3).

    Ribbons face the card normal so stacked strands shadow each other.
    """
    pts, _ = reconstruct(texture, card)  # (S, n, 3)
    if pts.size == 0:
        return np.zeros((0, 3, 3))
    frames = _band_frames(card)
    band = _sample_bands(card, texture.uv.reshape(-1, 2))
    normals = frames[band][:, 2].reshape(pts.shape)
    d = np.diff(pts, axis=1)
    d = np.concatenate([d, d[:, -1:]], axis=1)
    side = np.cross(d, normals)
    lens = np.linalg.norm(side, axis=2, keepdims=True)
    lens[lens < 1e-15] = 1.0
    side = side / lens
    half = 0.5 * texture.widths[:, None, None]
    left = pts - half * side
    right = pts + half * side
    tris = []
    n = pts.shape[1]
    for i in range(len(pts)):
        for j in range(n - 1):
            a, b = left[i, j], right[i, j]
            c, e = left[i, j + 1], right[i, j + 1]
            tris.append((a, b, c))
            tris.append((b, e, c))
    return np.array(tris)


def bake_ao(texture: CardTexture, card: CardGeometry, n_rays: int = 64,
            seed: int = 0, shape: tuple[int, int] = (256, 512),
            stride: int = 1, occluders: np.ndarray | None = None,
            coverage: tuple[np.ndarray, np.ndarray] | None = None
            ) -> np.ndarray:
    """Ambient occlusion for one slot: unoccluded hemisphere fraction.

    Covered texels are reconstructed to 3D and shoot cosine-weighted rays
    about the local card normal against the strand ribbons. stride > 1
    computes a sparse grid and fills the rest from the nearest computed
    texel. Uncovered texels stay 1.
    """
    h, w = shape
    ao = np.ones((h, w))
    if len(texture.uv) == 0:
        return ao
    if coverage is None:
        img = composite_strokes(shape, slot_strokes(texture, card, shape))
        alpha, zsum = img.alpha, img.depth
    else:
        alpha, zsum = coverage
    covered = alpha > 0.5
    if not covered.any():
        return ao
    if occluders is None:
        occluders = ribbon_occluders(texture, card)

    ys, xs = np.nonzero(covered)
    on_grid = (ys % stride == 0) & (xs % stride == 0)
    gys, gxs = ys[on_grid], xs[on_grid]
    if len(gys) == 0:
        gys, gxs = ys[:1], xs[:1]
    u = (gxs + 0.5) / w
    v = 1.0 - (gys + 0.5) / h
    z = zsum[gys, gxs] / alpha[gys, gxs]
    pts = reconstruct_uv_points(card, np.stack([u, v], axis=1), z)

    frames = _band_frames(card)
    band = _sample_bands(card, np.stack([u, v], axis=1))
    bases = frames[band]  # rows (e_u, e_v, e_n)

    rng = np.random.default_rng(seed)
    local_dirs = _cosine_hemisphere(n_rays, rng)
    dirs = np.einsum("rk,pkj->prj", local_dirs, bases)  # (P, R, 3)
    origins = np.repeat(pts, n_rays, axis=0)
    dirs = dirs.reshape(-1, 3)

    extent = np.linalg.norm(card.rails.max(axis=(0, 1))
                            - card.rails.min(axis=(0, 1)))
    t_min = max(1e-12, 1e-5 * extent)
    hit = np.empty(len(origins), dtype=bool)
    for s0 in range(0, len(origins), _RAY_BLOCK):
        sl = slice(s0, min(s0 + _RAY_BLOCK, len(origins)))
        hit[sl] = ray_hits(origins[sl], dirs[sl], occluders, t_min=t_min)
    visible = 1.0 - hit.reshape(-1, n_rays).mean(axis=1)

    if stride == 1 and len(gys) == len(ys):
        ao[gys, gxs] = visible
    else:
        from scipy.spatial import cKDTree
        tree = cKDTree(np.stack([gys, gxs], axis=1))
        _, nearest = tree.query(np.stack([ys, xs], axis=1))
        ao[ys, xs] = visible[nearest]
    return ao


def bake_atlas(textures: list[CardTexture], cards: list[CardGeometry],
               config: BakeConfig,
               extra_occluders: np.ndarray | None = None) -> TextureAtlas:
    """Bake every retained texture into its slot of the four atlas maps.

    cards[i] is the representative card of textures[i] (world-to-texel
    scale, tangent frame, AO geometry). extra_occluders, when given, are
    appended to every slot's occluder set (whole-model AO).
    """
    if len(textures) != len(cards):
        raise ValueError("need one representative card per retained texture")
    if len(textures) > config.n_slots:
        raise ValueError(f"{len(textures)} textures exceed "
                         f"{config.n_slots} slots")
    h, w = config.atlas_shape
    tangent = np.full((h, w, 3), 0.5)
    depth = np.full((h, w), 0.5)
    alpha = np.zeros((h, w))
    ao = np.ones((h, w))
    shape = (config.slot_height, config.slot_width)
    z_max = np.zeros(len(textures))
    for i, (tex, card) in enumerate(zip(textures, cards)):
        window = config.slot_window(i)
        if len(tex.uv) == 0:
            continue
        zm = float(np.abs(tex.z).max())
        z_max[i] = zm
        img = composite_strokes(shape, slot_strokes(tex, card, shape))
        a = img.alpha
        rgb = img.color + (1.0 - a)[..., None] * 0.5
        zbar = np.where(a > 0.0, img.depth / np.maximum(a, 1e-300), 0.0)
        if zm > 0.0:
            encoded = 0.5 + zbar / (2.0 * zm)
        else:
            encoded = np.full_like(zbar, 0.5)
        dep = a * encoded + (1.0 - a) * 0.5
        occ = ribbon_occluders(tex, card)
        if extra_occluders is not None and len(extra_occluders):
            occ = np.concatenate([occ, extra_occluders]) if len(occ) \
                else extra_occluders
        slot_ao = bake_ao(tex, card, n_rays=config.ao_rays,
                          seed=config.ao_seed + i, shape=shape,
                          stride=config.ao_stride, occluders=occ,
                          coverage=(a, img.depth))
        tangent[window] = rgb
        depth[window] = dep
        alpha[window] = a
        ao[window] = slot_ao
    return TextureAtlas(tangent=tangent, depth=depth, alpha=alpha, ao=ao,
                        config=config, z_max=z_max)


def save_atlas(atlas: TextureAtlas, out_dir: str | Path) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, img in (("atlas_tangent.png", atlas.tangent),
                      ("atlas_depth.png", atlas.depth),
                      ("atlas_alpha.png", atlas.alpha),
                      ("atlas_ao.png", atlas.ao)):
        p = out_dir / name
        if name == "atlas_depth.png" and atlas.config.depth_16bit:
            from PIL import Image
            data = np.round(np.clip(img, 0.0, 1.0) * 65535.0)
            Image.fromarray(data.astype(np.uint16)).save(p)
        else:
            save_channel_png(img, p)
        paths.append(p)
    return paths


def slot_uv(config: BakeConfig, slot_index: int, chart_uv: np.ndarray
            ) -> np.ndarray:
    """Map chart uv into the atlas uv rectangle of a slot (OBJ convention,
    v up)."""
    row, col = config.slot_cell(slot_index)
    h, w = config.atlas_shape
    x = (col + chart_uv[..., 0]) * config.slot_width / w
    y_img = (row + (1.0 - chart_uv[..., 1])) * config.slot_height / h
    return np.stack([x, 1.0 - y_img], axis=-1)


def export_cards(cards: list[CardGeometry], assignment: TextureAssignment,
                 atlas: TextureAtlas, out_dir: str | Path,
                 crossed: list[int] | None = None) -> dict[str, Path]:
    """Write the card OBJ, the four atlas PNGs, and the slot manifest.

    Manifest rows: `card_id slot_row slot_col z_max crossed:{0,1}`.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if crossed is None:
        crossed = [0] * len(cards)
    if len(crossed) != len(cards):
        raise ValueError("crossed flag count must match card count")
    config = atlas.config

    obj_path = out_dir / "cards.obj"
    with open(obj_path, "w") as f:
        f.write("# hair card model\n")
        v_off = 0
        for i, card in enumerate(cards):
            group = int(assignment.group_index[i])
            verts = card.vertices()
            uv = slot_uv(config, group, card.uv_layout)
            f.write(f"o card_{i}\n")
            for p in verts:
                f.write(f"v {p[0]:.9g} {p[1]:.9g} {p[2]:.9g}\n")
            for t in uv:
                f.write(f"vt {t[0]:.9g} {t[1]:.9g}\n")
            for tri in card.triangles:
                a, b, c = (int(x) + 1 + v_off for x in tri)
                f.write(f"f {a}/{a} {b}/{b} {c}/{c}\n")
            v_off += len(verts)

    man_path = out_dir / "manifest.txt"
    with open(man_path, "w") as f:
        for i in range(len(cards)):
            group = int(assignment.group_index[i])
            row, col = config.slot_cell(group)
            zm = atlas.z_max[group] if group < len(atlas.z_max) else 0.0
            f.write(f"{i} {row} {col} {zm:.17g} crossed:{int(crossed[i])}\n")

    png_paths = save_atlas(atlas, out_dir)
    out = {"obj": obj_path, "manifest": man_path}
    for p in png_paths:
        out[p.stem.replace("atlas_", "")] = p
    return out
