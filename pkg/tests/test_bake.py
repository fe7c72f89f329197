import numpy as np
import pytest
from PIL import Image

from strandcards.bake import (BakeConfig, bake_ao, bake_atlas,
                              card_local_tangents, export_cards,
                              ribbon_occluders, save_atlas, slot_strokes,
                              slot_uv)
from strandcards.strokes import composite_strokes
from strandcards.cardgeom import CardGeometry
from strandcards.texreduce import TextureAssignment
from strandcards.texspace import CardTexture


def flat_card(length=1.0, width=0.4, n_quads=4):
    c = n_quads + 1
    rails = np.zeros((c, 2, 3))
    ys = np.linspace(0.0, length, c)
    rails[:, 0] = np.stack([-width / 2 * np.ones(c), ys, np.zeros(c)], axis=1)
    rails[:, 1] = np.stack([width / 2 * np.ones(c), ys, np.zeros(c)], axis=1)
    return CardGeometry(rails=rails, centerline=rails.mean(axis=1),
                        sample_indices=np.arange(c))


def strand_rows(specs, n=9):
    """specs: list of (u, z, width). Vertical strands spanning v in 0..1."""
    uv, z, tan, wid = [], [], [], []
    for u, zz, w in specs:
        v = np.linspace(0.0, 1.0, n)
        uv.append(np.stack([np.full(n, u), v], axis=1))
        z.append(np.full(n, zz))
        tan.append(np.tile([0.0, 1.0, 0.0], (n, 1)))
        wid.append(w)
    return CardTexture(uv=np.array(uv), z=np.array(z),
                       tangent3d=np.array(tan), widths=np.array(wid))


def empty_texture(n=9):
    return CardTexture(uv=np.zeros((0, n, 2)), z=np.zeros((0, n)),
                       tangent3d=np.zeros((0, n, 3)), widths=np.zeros(0))


def small_config(**kw):
    base = dict(slot_height=64, slot_width=128, slot_rows=2, slot_cols=2,
                ao_rays=16)
    base.update(kw)
    return BakeConfig(**base)


class TestLocalFrame:
    def test_straight_card_tangent_encoding(self):
        card = flat_card()
        tex = strand_rows([(0.5, 0.0, 0.02)])
        local = card_local_tangents(tex, card)
        # card u axis is +x, v axis +y, normal +z; strand tangent +y
        assert np.allclose(local[0], [0.0, 1.0, 0.0], atol=1e-12)

    def test_normal_component(self):
        card = flat_card()
        tex = strand_rows([(0.5, 0.0, 0.02)])
        tex.tangent3d[:] = [0.0, 0.0, 1.0]
        local = card_local_tangents(tex, card)
        assert np.allclose(local[0], [0.0, 0.0, 1.0], atol=1e-12)


class TestAtlas:
    def test_empty_texture_transparent_slot(self):
        cfg = small_config()
        atlas = bake_atlas([empty_texture()], [flat_card()], cfg)
        win = cfg.slot_window(0)
        assert np.all(atlas.alpha[win] == 0.0)
        assert np.all(atlas.tangent[win] == 0.5)
        assert np.all(atlas.ao[win] == 1.0)

    def test_zero_z_depth_is_midrange(self):
        cfg = small_config(ao_rays=4)
        tex = strand_rows([(0.3, 0.0, 0.04), (0.7, 0.0, 0.04)])
        atlas = bake_atlas([tex], [flat_card()], cfg)
        win = cfg.slot_window(0)
        assert np.all(atlas.depth[win] == 0.5)
        assert atlas.z_max[0] == 0.0

    def test_depth_encodes_symmetric_range(self):
        cfg = small_config(ao_rays=4)
        tex = strand_rows([(0.3, 0.05, 0.04), (0.7, -0.05, 0.04)])
        atlas = bake_atlas([tex], [flat_card()], cfg)
        dep = atlas.depth[cfg.slot_window(0)]
        alpha = atlas.alpha[cfg.slot_window(0)]
        solid = alpha > 0.999
        cols = np.nonzero(solid.any(axis=0))[0]
        near = dep[solid[:, cols[:8]].nonzero()[0][:, None], cols[:8]]
        assert atlas.z_max[0] == pytest.approx(0.05)
        left = dep[:, : dep.shape[1] // 2]
        right = dep[:, dep.shape[1] // 2:]
        a_l = alpha[:, : dep.shape[1] // 2]
        a_r = alpha[:, dep.shape[1] // 2:]
        assert np.allclose(left[a_l > 0.999], 1.0, atol=1e-9)
        assert np.allclose(right[a_r > 0.999], 0.0, atol=1e-9)

    def test_alpha_coverage_matches_analytic(self):
        cfg = small_config(slot_height=256, slot_width=512, ao_rays=4)
        width_world, length_v = 0.012, 1.0
        tex = strand_rows([(0.5, 0.0, width_world)])
        atlas = bake_atlas([tex], [flat_card(width=0.4)], cfg)
        a = atlas.alpha[cfg.slot_window(0)]
        fraction = a.sum() / (256 * 512)
        expected = (width_world / 0.4) * length_v
        assert fraction == pytest.approx(expected, rel=0.10)

    def test_no_bleed_outside_assigned_slots(self):
        cfg = small_config(ao_rays=4)
        texs = [strand_rows([(0.5, 0.0, 0.05)]),
                strand_rows([(0.2, 0.0, 0.05)])]
        atlas = bake_atlas(texs, [flat_card(), flat_card()], cfg)
        mask = np.zeros_like(atlas.alpha, dtype=bool)
        for i in range(len(texs)):
            mask[cfg.slot_window(i)] = True
        assert np.all(atlas.alpha[~mask] == 0.0)

    def test_too_many_textures(self):
        cfg = small_config(slot_rows=1, slot_cols=1)
        with pytest.raises(ValueError, match="exceed"):
            bake_atlas([empty_texture()] * 2, [flat_card()] * 2, cfg)

    def test_card_count_mismatch(self):
        with pytest.raises(ValueError, match="representative"):
            bake_atlas([empty_texture()], [], small_config())


class TestAo:
    def test_isolated_straight_strand_unoccluded(self):
        card = flat_card()
        tex = strand_rows([(0.5, 0.0, 0.04)])
        ao = bake_ao(tex, card, n_rays=16, shape=(64, 128))
        covered = bake_atlas([tex], [card], small_config(ao_rays=4)
                             ).alpha[small_config().slot_window(0)] > 0.5
        assert np.all(ao[covered] == 1.0)

    def test_canopy_shadows_lower_strand(self):
        # Origins restricted to the two z=0 strands; occluders include a
        # solid canopy at z=0.03 over the first one.
        card = flat_card(width=0.4)
        lower = strand_rows([(0.25, 0.0, 0.02), (0.75, 0.0, 0.02)])
        canopy = [(u, 0.03, 0.03) for u in np.linspace(0.17, 0.33, 7)]
        both = strand_rows(
            [(0.25, 0.0, 0.02), (0.75, 0.0, 0.02)] + canopy)
        img = composite_strokes((64, 128),
                                slot_strokes(lower, card, (64, 128)))
        ao = bake_ao(both, card, n_rays=48, seed=1, shape=(64, 128),
                     coverage=(img.alpha, img.depth))
        shaded = ao[:, 30:35]  # texel columns of the u=0.25 strand
        free = ao[:, 94:99]  # distant strand, only grazing rays blocked
        assert free.mean() > 0.95
        assert shaded.mean() < 0.8
        assert shaded.mean() < free.mean()

    def test_surface_ao_uses_composited_top_layer(self):
        # When the canopy fully hides the lower strand the baked surface
        # is the canopy itself, which sees open sky.
        card = flat_card(width=0.4)
        canopy = [(u, 0.03, 0.03) for u in np.linspace(0.17, 0.33, 7)]
        tex = strand_rows([(0.25, 0.0, 0.02)] + canopy)
        ao = bake_ao(tex, card, n_rays=32, seed=1, shape=(64, 128))
        assert ao[:, 30:35].min() > 0.9

    def test_ray_count_convergence(self):
        card = flat_card(width=0.4)
        canopy = [(u, 0.05, 0.03) for u in np.linspace(0.2, 0.3, 5)]
        tex = strand_rows([(0.25, 0.0, 0.02)] + canopy)
        a = bake_ao(tex, card, n_rays=64, seed=2, shape=(32, 64))
        b = bake_ao(tex, card, n_rays=128, seed=3, shape=(32, 64))
        assert np.abs(a - b).max() <= 2.0 / np.sqrt(64)

    def test_stride_fills_all_covered(self):
        card = flat_card()
        tex = strand_rows([(0.5, 0.0, 0.06)])
        ao = bake_ao(tex, card, n_rays=8, shape=(64, 128), stride=4)
        assert ao.shape == (64, 128)
        assert np.isfinite(ao).all()

    def test_occluder_geometry_shape(self):
        card = flat_card()
        tex = strand_rows([(0.4, 0.01, 0.02), (0.6, 0.02, 0.02)], n=5)
        occ = ribbon_occluders(tex, card)
        assert occ.shape == (2 * 2 * 4, 3, 3)


class TestExport:
    def make_scene(self, n_cards=2, n_quads=4):
        cards = [flat_card(n_quads=n_quads) for _ in range(n_cards)]
        texs = [strand_rows([(0.5, 0.0, 0.05)]) for _ in range(n_cards)]
        assign = TextureAssignment(group_index=np.arange(n_cards),
                                   representatives=np.arange(n_cards))
        return cards, texs, assign

    def test_single_card_obj(self, tmp_path):
        cards, texs, assign = self.make_scene(1)
        cfg = small_config(ao_rays=4)
        atlas = bake_atlas(texs, cards, cfg)
        paths = export_cards(cards, assign, atlas, tmp_path)
        text = paths["obj"].read_text().splitlines()
        faces = [l for l in text if l.startswith("f ")]
        assert len(faces) == 2 * cards[0].n_quads
        vts = np.array([[float(x) for x in l.split()[1:]]
                        for l in text if l.startswith("vt ")])
        # slot (0, 0): u in [0, 0.5], v in [0.5, 1] for a 2x2 grid
        assert vts[:, 0].min() >= 0.0 and vts[:, 0].max() <= 0.5
        assert vts[:, 1].min() >= 0.5 and vts[:, 1].max() <= 1.0

    def test_manifest_and_roundtrip(self, tmp_path):
        cards, texs, assign = self.make_scene(2)
        cfg = small_config(ao_rays=4)
        atlas = bake_atlas(texs, cards, cfg)
        paths = export_cards(cards, assign, atlas, tmp_path)
        rows = paths["manifest"].read_text().strip().splitlines()
        assert len(rows) == 2
        for i, row in enumerate(rows):
            parts = row.split()
            assert int(parts[0]) == i
            r, c = int(parts[1]), int(parts[2])
            assert (r, c) == cfg.slot_cell(i)
            float(parts[3])
            assert parts[4] in ("crossed:0", "crossed:1")
        text = paths["obj"].read_text().splitlines()
        assert sum(1 for l in text if l.startswith("o ")) == 2
        assert sum(1 for l in text if l.startswith("f ")) == \
            sum(2 * c.n_quads for c in cards)

    def test_crossed_flags(self, tmp_path):
        cards, texs, assign = self.make_scene(2)
        cfg = small_config(ao_rays=4)
        atlas = bake_atlas(texs, cards, cfg)
        paths = export_cards(cards, assign, atlas, tmp_path,
                             crossed=[0, 1])
        rows = paths["manifest"].read_text().strip().splitlines()
        assert rows[0].endswith("crossed:0")
        assert rows[1].endswith("crossed:1")

    def test_pngs_written(self, tmp_path):
        cards, texs, assign = self.make_scene(1)
        cfg = small_config(ao_rays=4)
        atlas = bake_atlas(texs, cards, cfg)
        export_cards(cards, assign, atlas, tmp_path)
        for name in ("atlas_tangent.png", "atlas_depth.png",
                     "atlas_alpha.png", "atlas_ao.png"):
            img = Image.open(tmp_path / name)
            assert img.size == (cfg.atlas_shape[1], cfg.atlas_shape[0])

    def test_depth_16bit(self, tmp_path):
        cfg = small_config(ao_rays=4, depth_16bit=True)
        cards, texs, _ = self.make_scene(1)
        atlas = bake_atlas(texs, cards, cfg)
        save_atlas(atlas, tmp_path)
        img = Image.open(tmp_path / "atlas_depth.png")
        assert img.mode.startswith("I")

    def test_slot_uv_corners(self):
        cfg = small_config()
        corners = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
        # slot 3 of a 2x2 grid = row 1, col 1 (bottom-right quadrant)
        out = slot_uv(cfg, 3, corners)
        assert np.allclose(out[0], [0.5, 0.0])  # chart origin, slot bottom
        assert np.allclose(out[1], [1.0, 0.0])
        assert np.allclose(out[2], [0.5, 0.5])
        assert np.allclose(out[3], [1.0, 0.5])
