import numpy as np
import pytest

from strandcards.strokes import Stroke, chart_to_texels, composite_strokes
from strandcards.texreduce import (TextureAssignment, apply_reduction,
                                   load_distance_matrix, perceptual_distance,
                                   raster_card_texture, reduce_textures,
                                   save_distance_matrix, texture_descriptor,
                                   texture_strokes, uv_width_scale)
from strandcards.texspace import CardTexture


def line_texture(u0, v0, u1, v1, width, tangent=(0.0, 0.0, 1.0),
                 z=0.0, n=8):
    t = np.linspace(0.0, 1.0, n)
    uv = np.stack([u0 + t * (u1 - u0), v0 + t * (v1 - v0)], axis=1)[None]
    tan = np.tile(np.asarray(tangent, dtype=np.float64), (1, n, 1))
    return CardTexture(uv=uv, z=np.full((1, n), z), tangent3d=tan,
                       widths=np.array([width]))


def merge_textures(a, b):
    return CardTexture(uv=np.concatenate([a.uv, b.uv]),
                       z=np.concatenate([a.z, b.z]),
                       tangent3d=np.concatenate([a.tangent3d, b.tangent3d]),
                       widths=np.concatenate([a.widths, b.widths]))


def empty_texture():
    return CardTexture(uv=np.zeros((0, 4, 2)), z=np.zeros((0, 4)),
                       tangent3d=np.zeros((0, 4, 3)), widths=np.zeros(0))


class TestStrokeCore:
    def test_chart_corner_mapping(self):
        uv = np.array([[0.0, 0.0], [1.0, 1.0], [0.5, 0.5]])
        px = chart_to_texels(uv, (64, 128))
        assert np.allclose(px[0], [0.0, 64.0])  # v=0 at image bottom
        assert np.allclose(px[1], [128.0, 0.0])
        assert np.allclose(px[2], [64.0, 32.0])

    def test_no_strokes_blank(self):
        img = composite_strokes((16, 16), [])
        assert np.all(img.alpha == 0.0)
        rgb, dep, _ = img.over_background()
        assert np.all(rgb == 0.5) and np.all(dep == 0.5)

    def test_painter_order(self):
        # two fat crossing strokes; the higher key wins the crossing
        def stroke(p0, p1, color, key):
            pts = np.array([p0, p1], dtype=np.float64)
            return Stroke(points=pts, half_width=np.full(2, 4.0),
                          color=np.tile(color, (2, 1)),
                          depth=np.zeros(2), order=np.full(2, key))

        red = stroke((2.0, 16.0), (30.0, 16.0), np.array([1.0, 0.0, 0.0]),
                     key=0.0)
        blue = stroke((16.0, 2.0), (16.0, 30.0), np.array([0.0, 0.0, 1.0]),
                      key=1.0)
        img = composite_strokes((32, 32), [red, blue])
        rgb, _, _ = img.over_background()
        assert np.allclose(rgb[16, 16], [0.0, 0.0, 1.0])
        img2 = composite_strokes((32, 32), [blue, red])
        rgb2, _, _ = img2.over_background()
        assert np.array_equal(rgb, rgb2)


class TestRaster:
    def test_empty_texture_background(self):
        img = raster_card_texture(empty_texture(), (32, 64))
        assert img.shape == (32, 64, 3)
        assert np.all(img == 0.5)

    def test_stroke_area_matches_analytic(self):
        width, length = 0.03, 0.8
        tex = line_texture(0.5, 0.1, 0.5, 0.9, width)
        img = composite_strokes((256, 512), texture_strokes(tex, (256, 512)))
        fraction = img.alpha.sum() / (256 * 512)
        assert fraction == pytest.approx(width * length, rel=0.10)

    def test_identical_textures_identical_images(self):
        a = line_texture(0.2, 0.0, 0.8, 1.0, 0.05)
        b = line_texture(0.2, 0.0, 0.8, 1.0, 0.05)
        assert np.array_equal(raster_card_texture(a, (64, 128)),
                              raster_card_texture(b, (64, 128)))

    def test_higher_z_strand_on_top(self):
        low = line_texture(0.0, 0.5, 1.0, 0.5, 0.1, tangent=(1.0, 0.0, 0.0),
                           z=0.0)
        high = line_texture(0.5, 0.0, 0.5, 1.0, 0.1, tangent=(0.0, 0.0, 1.0),
                            z=0.2)
        img = raster_card_texture(merge_textures(low, high), (64, 64))
        assert np.allclose(img[32, 32], [0.5, 0.5, 1.0])

    def test_tangent_color_encoding(self):
        tex = line_texture(0.1, 0.5, 0.9, 0.5, 0.1, tangent=(1.0, 0.0, 0.0))
        img = raster_card_texture(tex, (64, 64))
        assert np.allclose(img[32, 32], [1.0, 0.5, 0.5])


class TestPerceptualDistance:
    def test_self_distance_zero(self):
        rng = np.random.default_rng(0)
        img = rng.random((64, 128, 3))
        assert perceptual_distance(img, img.copy()) == 0.0

    def test_symmetric(self):
        rng = np.random.default_rng(1)
        for _ in range(3):
            a, b = rng.random((32, 64, 3)), rng.random((32, 64, 3))
            assert perceptual_distance(a, b) == \
                pytest.approx(perceptual_distance(b, a), rel=1e-12)

    def test_ordering(self):
        black = np.zeros((64, 64, 3))
        white = np.ones((64, 64, 3))
        rng = np.random.default_rng(2)
        noisy = np.clip(black + 0.1 * rng.random((64, 64, 3)), 0.0, 1.0)
        assert perceptual_distance(black, white) > \
            perceptual_distance(black, noisy)

    def test_resolution_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            perceptual_distance(np.zeros((32, 32, 3)), np.zeros((64, 64, 3)))

    def test_descriptor_finite_and_stable(self):
        img = np.linspace(0.0, 1.0, 64 * 128 * 3).reshape(64, 128, 3)
        d1 = texture_descriptor(img)
        d2 = texture_descriptor(img.copy())
        assert np.array_equal(d1, d2) and np.isfinite(d1).all()


class TestReduce:
    def make_family(self, n, seed=0):
        rng = np.random.default_rng(seed)
        out = []
        for _ in range(n):
            u0, u1 = rng.uniform(0.1, 0.9, size=2)
            out.append(line_texture(u0, 0.05, u1, 0.95,
                                    rng.uniform(0.02, 0.08)))
        return out

    def test_identity_when_target_equals_count(self):
        texs = self.make_family(4)
        a = reduce_textures(texs, 4, shape=(32, 64))
        assert np.array_equal(a.group_index, np.arange(4))
        assert np.array_equal(a.representatives, np.arange(4))

    def test_duplicate_pairs(self):
        a = line_texture(0.2, 0.0, 0.2, 1.0, 0.05)
        b = line_texture(0.8, 0.0, 0.8, 1.0, 0.05)
        texs = [a, line_texture(0.2, 0.0, 0.2, 1.0, 0.05),
                b, line_texture(0.8, 0.0, 0.8, 1.0, 0.05)]
        out = reduce_textures(texs, 2, shape=(32, 64))
        assert np.array_equal(out.group_index, [0, 0, 1, 1])
        assert np.array_equal(out.representatives, [0, 2])

    def test_beats_every_two_partition(self):
        texs = self.make_family(6, seed=3)
        shape = (32, 64)
        imgs = [raster_card_texture(t, shape) for t in texs]
        n = 6
        dist = np.zeros((n, n))
        for i in range(n):
            for j in range(i + 1, n):
                dist[i, j] = dist[j, i] = perceptual_distance(imgs[i],
                                                              imgs[j])
        ours = reduce_textures(texs, 2, shape=shape)
        cost = sum(dist[i, ours.representatives[ours.group_index[i]]]
                   for i in range(n))

        def part_cost(members):
            members = np.array(members)
            sub = dist[np.ix_(members, members)]
            return sub.sum(axis=0).min()

        for bits in range(1, 2 ** (n - 1)):
            first = [i for i in range(n) if (bits >> i) & 1 or i == 0]
            first = sorted(set(first))
            second = [i for i in range(n) if i not in first]
            if not second:
                continue
            assert cost <= part_cost(first) + part_cost(second) + 1e-9

    def test_pam_path_objective_non_increasing(self):
        rng = np.random.default_rng(4)
        n = 30
        pts = rng.random((n, 2))
        dist = np.linalg.norm(pts[:, None] - pts[None], axis=2)
        trace: list = []
        out = reduce_textures([None] * n, 3, seed=5, distance_matrix=dist,
                              trace=trace)
        out.validate()
        assert trace
        for run in trace:
            assert all(b <= a + 1e-12 for a, b in zip(run, run[1:]))

    def test_deterministic_under_seed(self):
        rng = np.random.default_rng(6)
        n = 30
        pts = rng.random((n, 2))
        dist = np.linalg.norm(pts[:, None] - pts[None], axis=2)
        a = reduce_textures([None] * n, 4, seed=7, distance_matrix=dist)
        b = reduce_textures([None] * n, 4, seed=7, distance_matrix=dist)
        assert np.array_equal(a.group_index, b.group_index)
        assert np.array_equal(a.representatives, b.representatives)

    def test_errors(self):
        texs = self.make_family(3)
        with pytest.raises(ValueError, match="positive"):
            reduce_textures(texs, 0)
        with pytest.raises(ValueError, match="exceeds"):
            reduce_textures(texs, 4)
        with pytest.raises(ValueError, match="shape"):
            reduce_textures(texs, 2, distance_matrix=np.zeros((2, 2)))

    def test_apply_reduction(self):
        texs = self.make_family(5, seed=8)
        out = reduce_textures(texs, 2, shape=(32, 64))
        retained, per_card = apply_reduction(texs, out)
        assert len(retained) == 2
        assert len(per_card) == 5
        assert out.instance_counts().sum() == 5
        for g, r in enumerate(out.representatives):
            assert retained[g] is texs[r]

    def test_validate_rejects_foreign_representative(self):
        bad = TextureAssignment(group_index=np.array([0, 0, 1]),
                                representatives=np.array([1, 0]))
        with pytest.raises(AssertionError):
            bad.validate()


class TestMatrixFile:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(9)
        m = rng.random((4, 4))
        path = tmp_path / "d.dmat"
        save_distance_matrix(path, m)
        assert np.array_equal(load_distance_matrix(path), m)

    def test_bad_header(self, tmp_path):
        p = tmp_path / "x.dmat"
        p.write_text("NOPE 3\n")
        with pytest.raises(ValueError, match="DMAT"):
            load_distance_matrix(p)

    def test_missing_entries(self, tmp_path):
        p = tmp_path / "y.dmat"
        p.write_text("DMAT 3\n1 2 3 4\n")
        with pytest.raises(ValueError, match="expected 9"):
            load_distance_matrix(p)


class TestWidthScale:
    def test_inverse_mean_strip_width(self):
        from strandcards.cardgeom import CardGeometry
        rails = np.zeros((3, 2, 3))
        rails[:, 1, 0] = [0.2, 0.4, 0.6]  # strip widths 0.2, 0.4, 0.6
        card = CardGeometry(rails=rails, centerline=rails.mean(axis=1),
                            sample_indices=np.array([0, 1, 2]))
        assert uv_width_scale(card) == pytest.approx(1.0 / 0.4, rel=1e-12)
