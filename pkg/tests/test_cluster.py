import itertools

import numpy as np
import pytest

from strandcards.cluster import (
    StrandCluster, cluster_strands, clustering_inertia, load_assignments,
    mean_strand, save_assignments, strand_distance,
)
from strandcards.hairio import HairModel, Strand


def naive_distance(a, b):
    # independent oracle: explicit per-sample loop
    total = 0.0
    for p, q in zip(a, b):
        d = p - q
        total += float(d[0] ** 2 + d[1] ** 2 + d[2] ** 2)
    return total / len(a)


def random_model(n, s, seed, scale=1.0, offset=(0, 0, 0)):
    rng = np.random.default_rng(seed)
    base = rng.normal(size=(n, 1, 3)) * scale + np.asarray(offset, float)
    drift = np.cumsum(rng.normal(scale=0.1, size=(n, s, 3)), axis=1)
    return HairModel([Strand(base[i] + drift[i]) for i in range(n)])


class TestDistance:
    def test_identity(self):
        s = Strand(np.random.default_rng(0).normal(size=(8, 3)))
        assert strand_distance(s, s) == 0.0

    def test_translation(self):
        rng = np.random.default_rng(1)
        a = Strand(rng.normal(size=(16, 3)))
        v = np.array([1.0, -2.0, 0.5])
        b = Strand(a.samples + v)
        assert strand_distance(a, b) == pytest.approx(float(v @ v), rel=1e-12)

    def test_matches_naive_sum(self):
        rng = np.random.default_rng(2)
        a = Strand(rng.normal(size=(32, 3)))
        b = Strand(rng.normal(size=(32, 3)))
        got = strand_distance(a, b)
        want = naive_distance(a.samples, b.samples)
        assert got == pytest.approx(want, rel=1e-12)

    def test_symmetric(self):
        rng = np.random.default_rng(3)
        a = Strand(rng.normal(size=(12, 3)))
        b = Strand(rng.normal(size=(12, 3)))
        assert strand_distance(a, b) == strand_distance(b, a)

    def test_mismatched_counts(self):
        a = Strand(np.zeros((4, 3)))
        b = Strand(np.zeros((5, 3)))
        with pytest.raises(ValueError, match="mismatched"):
            strand_distance(a, b)


class TestClusterStrands:
    def test_singletons(self):
        m = random_model(6, 8, seed=0)
        cl = cluster_strands(m, 6, seed=0)
        assert sorted(int(c.member_indices[0]) for c in cl) == list(range(6))
        assert clustering_inertia(m, cl) == pytest.approx(0.0, abs=1e-18)

    def test_two_bundles_recovered(self):
        a = random_model(10, 8, seed=1, offset=(0, 0, 0))
        b = random_model(10, 8, seed=2, offset=(100, 0, 0))
        m = HairModel(a.strands + b.strands)
        cl = cluster_strands(m, 2, seed=0)
        groups = sorted(tuple(c.member_indices) for c in cl)
        assert groups == [tuple(range(10)), tuple(range(10, 20))]

        # brute force over all 2-partitions confirms this is the minimum;
        # within-group sum of squares = total_ss - |sum_g|^2/n_g per group
        n = 20
        flat = m.samples.reshape(n, -1)
        total_ss = float((flat * flat).sum())
        total_sum = flat.sum(axis=0)
        best = np.inf
        all_masks = np.arange(1, 2 ** (n - 1), dtype=np.uint32)
        for chunk in np.array_split(all_masks, 8):
            bits = ((chunk[:, None] >> np.arange(n, dtype=np.uint32)) & 1).astype(np.float64)
            n1 = bits.sum(axis=1)
            s1 = bits @ flat
            s2 = total_sum - s1
            obj = total_ss - (s1 * s1).sum(1) / n1 - (s2 * s2).sum(1) / (n - n1)
            best = min(best, float(obj.min()))
        assert clustering_inertia(m, cl) == pytest.approx(best / m.n_samples, rel=1e-9)

    def test_six_strand_one_reassignment_local_optimality(self):
        m = random_model(6, 8, seed=5)
        cl = cluster_strands(m, 2, seed=0)
        final = clustering_inertia(m, cl)
        assign = np.empty(6, dtype=int)
        for c, group in enumerate(cl):
            assign[group.member_indices] = c
        flat = m.samples.reshape(6, -1)
        for i in range(6):
            other = 1 - assign[i]
            trial = assign.copy()
            trial[i] = other
            if not (np.any(trial == 0) and np.any(trial == 1)):
                continue
            inertia = 0.0
            for g in (trial == 0, trial == 1):
                c = flat[g].mean(axis=0)
                d = flat[g] - c
                inertia += float((d * d).sum()) / m.n_samples
            assert final <= inertia + 1e-12

    def test_inertia_monotone_trace(self):
        m = random_model(60, 8, seed=9, scale=3.0)
        trace: list = []
        cluster_strands(m, 5, seed=3, trace=trace)
        assert trace and all(len(run) >= 1 for run in trace)
        for run in trace:
            diffs = np.diff(run)
            assert np.all(diffs <= 1e-9 * np.maximum(1.0, np.abs(run[1:])))

    def test_deterministic(self):
        m = random_model(40, 8, seed=4, scale=2.0)
        a = cluster_strands(m, 4, seed=7)
        b = cluster_strands(m, 4, seed=7)
        for ca, cb in zip(a, b):
            np.testing.assert_array_equal(ca.member_indices, cb.member_indices)

    def test_partition(self):
        m = random_model(30, 8, seed=6, scale=2.0)
        cl = cluster_strands(m, 4, seed=1)
        all_idx = np.concatenate([c.member_indices for c in cl])
        assert sorted(all_idx.tolist()) == list(range(30))

    def test_mean_strand_consistent(self):
        m = random_model(30, 8, seed=7, scale=2.0)
        cl = cluster_strands(m, 3, seed=2)
        for c in cl:
            recomputed = mean_strand(m, c.member_indices)
            assert np.abs(recomputed.samples - c.mean_strand.samples).max() < 1e-6

    def test_zero_clusters(self):
        with pytest.raises(ValueError):
            cluster_strands(random_model(4, 6, seed=0), 0)

    def test_too_many_clusters(self):
        with pytest.raises(ValueError):
            cluster_strands(random_model(4, 6, seed=0), 5)


class TestAssignmentDump:
    def test_roundtrip(self, tmp_path):
        m = random_model(25, 8, seed=8, scale=2.0)
        cl = cluster_strands(m, 3, seed=0)
        p = tmp_path / "assign.txt"
        save_assignments(p, cl)
        lines = p.read_text().strip().splitlines()
        assert len(lines) == 25
        assert lines[0].split()[0] == "0"
        back = load_assignments(p, m)
        for a, b in zip(cl, back):
            np.testing.assert_array_equal(a.member_indices, b.member_indices)
            np.testing.assert_allclose(a.mean_strand.samples, b.mean_strand.samples)
