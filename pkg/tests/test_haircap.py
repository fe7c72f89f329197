import numpy as np
import pytest

from strandcards.haircap import (CapMesh, bake_cap_texture, build_cap_mesh,
                                 chart_mask, one_ring_faces, root_subsegment,
                                 save_cap)
from strandcards.hairio import HairModel, HeadMesh, Strand

from fixtures_geom import icosphere, make_wig


def tri_head(scale=2.0):
    """One right triangle in the z=0 plane, normal +z."""
    v = scale * np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    n = np.tile([0.0, 0.0, 1.0], (3, 1))
    return HeadMesh(vertices=v, triangles=np.array([[0, 1, 2]]),
                    vertex_normals=n)


def line_model(specs, n=4):
    """specs: list of (root xyz, direction xyz, length)."""
    strands = []
    for root, direction, length in specs:
        root = np.asarray(root, dtype=float)
        d = np.asarray(direction, dtype=float)
        d = d / np.linalg.norm(d)
        t = np.linspace(0.0, length, n)
        strands.append(Strand(samples=root + t[:, None] * d))
    return HairModel(strands=strands)


def vertex_fan_oracle(head, face):
    """All faces sharing a vertex with `face`, by plain enumeration."""
    out = set()
    for v in head.triangles[face]:
        for f in range(len(head.triangles)):
            if v in head.triangles[f]:
                out.add(f)
    return sorted(out)


class TestCapMesh:
    def test_zero_strands_empty_cap(self):
        cap = build_cap_mesh(icosphere(1), None, eps_cap=1e-3)
        assert cap.is_empty

    def test_eps_cap_must_be_positive(self):
        with pytest.raises(ValueError, match="eps_cap"):
            build_cap_mesh(icosphere(1), None, eps_cap=0.0)

    def test_single_face_roots_select_one_ring(self):
        head = icosphere(1)
        face = 7
        tri = head.vertices[head.triangles[face]]
        normal = np.cross(tri[1] - tri[0], tri[2] - tri[0])
        normal /= np.linalg.norm(normal)
        roots = [tri.mean(axis=0) + 0.02 * normal,
                 (0.6 * tri[0] + 0.25 * tri[1] + 0.15 * tri[2])
                 + 0.02 * normal]
        model = line_model([(r, normal, 0.3) for r in roots])
        cap = build_cap_mesh(head, model, eps_cap=5e-3)
        assert sorted(cap.face_ids) == vertex_fan_oracle(head, face)
        assert face in cap.face_ids

    def test_extrusion_distance_exact(self):
        head = icosphere(1)
        model = make_wig(20, n_samples=8, seed=3)
        eps = 7.5e-3
        cap = build_cap_mesh(head, model, eps_cap=eps)
        assert not cap.is_empty
        src = head.vertices[cap.source_vertices]
        d = np.linalg.norm(cap.vertices - src, axis=1)
        assert np.abs(d - eps).max() <= 1e-9
        cap.validate(head, eps)

    def test_selection_is_idempotent(self):
        head = icosphere(1)
        model = make_wig(15, n_samples=8, seed=1)
        a = build_cap_mesh(head, model, eps_cap=1e-3)
        b = build_cap_mesh(head, model, eps_cap=1e-3)
        assert np.array_equal(a.face_ids, b.face_ids)
        assert np.array_equal(a.triangles, b.triangles)
        # the face set already contains its generating hits
        ring = one_ring_faces(head, a.face_ids)
        assert set(a.face_ids).issubset(set(ring))

    def test_no_roots_near_head_warns_empty(self):
        head = icosphere(1)
        model = line_model([((8.0, 9.0, 10.0), (0, 0, 1), 0.5)])
        with pytest.warns(UserWarning, match="no hair roots"):
            cap = build_cap_mesh(head, model, eps_cap=1e-3)
        assert cap.is_empty

    def test_far_root_ignored(self):
        head = icosphere(1)
        tri = head.vertices[head.triangles[4]]
        normal = np.cross(tri[1] - tri[0], tri[2] - tri[0])
        normal /= np.linalg.norm(normal)
        model = line_model([(tri.mean(axis=0) + 0.02 * normal, normal, 0.3),
                            ((6.0, 6.0, 6.0), (0, 0, 1), 0.3)])
        cap = build_cap_mesh(head, model, eps_cap=1e-3)
        assert sorted(cap.face_ids) == vertex_fan_oracle(head, 4)


class TestRootSubsegment:
    def test_cuts_inside_first_segment(self):
        pts = np.array([[0.0, 0, 0], [0.2, 0, 0], [0.4, 0, 0]])
        sub = root_subsegment(pts, 0.05)
        assert sub.shape == (2, 3)
        assert np.isclose(np.linalg.norm(np.diff(sub, axis=0), axis=1).sum(),
                          0.05)

    def test_spans_multiple_segments(self):
        pts = np.array([[0.0, 0, 0], [0.2, 0, 0], [0.4, 0, 0],
                        [0.4, 0.2, 0]])
        sub = root_subsegment(pts, 0.5)
        assert len(sub) == 4
        assert np.isclose(np.linalg.norm(np.diff(sub, axis=0), axis=1).sum(),
                          0.5)

    def test_clamps_to_full_strand(self):
        pts = np.array([[0.0, 0, 0], [0.2, 0, 0]])
        sub = root_subsegment(pts, 5.0)
        assert np.allclose(sub, pts)


class TestCapTexture:
    def test_stroke_length_matches_eps_root(self):
        head = tri_head()
        model = line_model([((0.5, 0.6, 0.0), (1, 0, 0), 0.8)], n=3)
        cap = build_cap_mesh(head, model, eps_cap=1e-3)
        eps_root = 0.25
        tex = bake_cap_texture(head, model, cap, eps_root=eps_root,
                               resolution=256, strand_width=0.01)
        ys, xs = np.nonzero(tex.alpha > 0.5)
        assert len(xs) > 0
        u = (xs + 0.5) / 256.0
        measured = u.max() - u.min()
        expected = eps_root * cap.chart_scale[0]
        assert measured == pytest.approx(expected, rel=0.10)

    def test_zero_strands_fully_transparent(self):
        head = tri_head()
        donor = line_model([((0.5, 0.6, 0.0), (1, 0, 0), 0.4)])
        cap = build_cap_mesh(head, donor, eps_cap=1e-3)
        tex = bake_cap_texture(head, None, cap, eps_root=0.1, resolution=64)
        assert np.all(tex.alpha == 0.0)
        assert np.all(tex.ao == 1.0)

    def test_eps_root_must_be_positive(self):
        head = tri_head()
        model = line_model([((0.5, 0.6, 0.0), (1, 0, 0), 0.4)])
        cap = build_cap_mesh(head, model, eps_cap=1e-3)
        with pytest.raises(ValueError, match="eps_root"):
            bake_cap_texture(head, model, cap, eps_root=0.0)

    def test_empty_cap_rejected(self):
        head = tri_head()
        model = line_model([((0.5, 0.6, 0.0), (1, 0, 0), 0.4)])
        cap = build_cap_mesh(head, None, eps_cap=1e-3)
        with pytest.raises(ValueError, match="empty"):
            bake_cap_texture(head, model, cap, eps_root=0.1)

    def test_density_doubling_doubles_coverage(self):
        head = tri_head()
        xs = 0.15 + 0.18 * np.arange(5)
        row_a = [((x, 0.25, 0.0), (0, 1, 0), 0.12) for x in xs]
        row_b = [((x, 0.75, 0.0), (0, 1, 0), 0.12) for x in xs]
        cap = build_cap_mesh(head, line_model(row_a + row_b), eps_cap=1e-3)
        kw = dict(eps_root=0.12, resolution=256, strand_width=0.02)
        single = bake_cap_texture(head, line_model(row_a), cap, **kw)
        double = bake_cap_texture(head, line_model(row_a + row_b), cap, **kw)
        ratio = double.alpha.mean() / single.alpha.mean()
        assert ratio == pytest.approx(2.0, rel=0.15)

    def test_alpha_confined_to_cap_faces(self):
        head = icosphere(1)
        model = make_wig(25, n_samples=8, seed=2)
        cap = build_cap_mesh(head, model, eps_cap=1e-3)
        tex = bake_cap_texture(head, model, cap, eps_root=0.05,
                               resolution=128)
        mask = chart_mask(cap, (128, 128))
        assert np.all(tex.alpha[~mask] == 0.0)
        assert tex.alpha.max() > 0.0

    def test_dense_fuzz_darkens_ao(self):
        head = tri_head()
        xs = 0.3 + 0.012 * np.arange(20)  # overlapping bundle
        model = line_model([((x, 0.4, 0.0), (0, 1, 0), 0.3) for x in xs])
        cap = build_cap_mesh(head, model, eps_cap=1e-3)
        tex = bake_cap_texture(head, model, cap, eps_root=0.3,
                               resolution=128, strand_width=0.05)
        assert tex.ao.min() < 0.5
        assert np.all(tex.ao <= 1.0) and np.all(tex.ao >= 0.0)


class TestSaveCap:
    def test_obj_and_pngs(self, tmp_path):
        head = icosphere(1)
        model = make_wig(12, n_samples=8, seed=4)
        cap = build_cap_mesh(head, model, eps_cap=1e-3)
        tex = bake_cap_texture(head, model, cap, eps_root=0.05,
                               resolution=64)
        paths = save_cap(cap, tex, tmp_path)
        text = paths["obj"].read_text().splitlines()
        assert sum(1 for l in text if l.startswith("v ")) == len(cap.vertices)
        assert sum(1 for l in text if l.startswith("vt ")) == \
            3 * len(cap.triangles)
        assert sum(1 for l in text if l.startswith("f ")) == \
            len(cap.triangles)
        for key in ("tangent", "alpha", "ao"):
            assert paths[key].exists()
