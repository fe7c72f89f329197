"""Strand clustering under the per-sample shape-similarity metric.

The similarity between two equal-count strands is the mean over sample indices
of squared sample distances. That equals squared Euclidean distance between the
flattened sample vectors divided by the sample count, so Lloyd's algorithm on
flattened strands with per-sample mean centroids is exact for this metric.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .hairio import HairModel, Strand


@dataclass(frozen=True)
class StrandCluster:
    member_indices: np.ndarray  # sorted strand indices into the model
    mean_strand: Strand


def strand_distance(a: Strand, b: Strand) -> float:
    """Mean over samples of squared sample-to-sample distance."""
    if a.n_samples != b.n_samples:
        raise ValueError(
            f"mismatched sample counts: {a.n_samples} vs {b.n_samples}")
    d = a.samples - b.samples
    return float(np.einsum("ij,ij->", d, d) / a.n_samples)


def mean_strand(model: HairModel, indices) -> Strand:
    return Strand(model.samples[np.asarray(indices)].mean(axis=0))


def _inertia(flat: np.ndarray, centers: np.ndarray, assign: np.ndarray,
             n_samples: int) -> float:
    d = flat - centers[assign]
    return float(np.einsum("ij,ij->", d, d) / n_samples)


def _pairwise_sq(flat: np.ndarray, centers: np.ndarray) -> np.ndarray:
    # |x - c|^2 via the expansion; centers are few, strands many
    x2 = np.einsum("ij,ij->i", flat, flat)[:, None]
    c2 = np.einsum("ij,ij->i", centers, centers)[None, :]
    cross = flat @ centers.T
    return np.maximum(x2 + c2 - 2.0 * cross, 0.0)


def _kmeanspp_init(flat: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = flat.shape[0]
    centers = np.empty((k, flat.shape[1]))
    idx = int(rng.integers(n))
    centers[0] = flat[idx]
    d2 = _pairwise_sq(flat, centers[:1]).ravel()
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centers[j] = flat[idx]
        d2 = np.minimum(d2, _pairwise_sq(flat, centers[j:j + 1]).ravel())
    return centers


def _lloyd(flat: np.ndarray, k: int, rng: np.random.Generator, max_iters: int,
           n_samples: int, trace: list | None = None
           ) -> tuple[np.ndarray, np.ndarray, float]:
    centers = _kmeanspp_init(flat, k, rng)
    assign = np.full(flat.shape[0], -1, dtype=np.int64)
    last = np.inf
    for _ in range(max_iters):
        d2 = _pairwise_sq(flat, centers)
        new_assign = d2.argmin(axis=1)
        own = d2[np.arange(len(new_assign)), new_assign].copy()
        for c in range(k):
            if not np.any(new_assign == c):
                # reseed an empty cluster with the globally farthest strand;
                # the center snaps to that strand so inertia cannot rise
                far = int(own.argmax())
                new_assign[far] = c
                centers[c] = flat[far]
                own[far] = 0.0
        cur = _inertia(flat, centers, new_assign, n_samples)
        assert cur <= last + 1e-9 * max(1.0, abs(cur)) or not np.isfinite(last), \
            "inertia increased during Lloyd iteration"
        if trace is not None:
            trace.append(cur)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        last = cur
        for c in range(k):
            centers[c] = flat[assign == c].mean(axis=0)
    final = _inertia(flat, centers, assign, n_samples)
    return assign, centers, final


def cluster_strands(model: HairModel, n_clusters: int, seed: int = 0,
                    max_iters: int = 100, n_init: int = 4,
                    trace: list | None = None) -> list[StrandCluster]:
    """Lloyd k-means on strands; best of n_init seeded restarts.

    trace, when given, collects the per-iteration inertia of every restart
    as one flat list (each restart appends a non-increasing run).
    """
    n = len(model.strands)
    if n_clusters == 0:
        raise ValueError("n_clusters must be positive")
    if n_clusters > n:
        raise ValueError(f"n_clusters {n_clusters} exceeds strand count {n}")
    flat = model.samples.reshape(n, -1)
    rng = np.random.default_rng(seed)
    best_assign, best_inertia = None, np.inf
    for _ in range(max(1, n_init)):
        run: list = []
        assign, _, inertia = _lloyd(flat, n_clusters, rng, max_iters,
                                    model.n_samples, trace=run)
        if trace is not None:
            trace.append(run)
        if inertia < best_inertia - 1e-15:
            best_assign, best_inertia = assign, inertia
    clusters = []
    for c in range(n_clusters):
        members = np.flatnonzero(best_assign == c)
        clusters.append(StrandCluster(member_indices=members,
                                      mean_strand=mean_strand(model, members)))
    return clusters


def clustering_inertia(model: HairModel, clusters: list[StrandCluster]) -> float:
    total = 0.0
    for cl in clusters:
        d = model.samples[cl.member_indices] - cl.mean_strand.samples
        total += float(np.einsum("ijk,ijk->", d, d) / model.n_samples)
    return total


def save_assignments(path, clusters: list[StrandCluster]) -> None:
    """Debug dump: one `strand_index cluster_index` line per strand."""
    pairs = []
    for c, cl in enumerate(clusters):
        pairs += [(int(i), c) for i in cl.member_indices]
    pairs.sort()
    with open(path, "w") as f:
        for i, c in pairs:
            f.write(f"{i} {c}\n")


def load_assignments(path, model: HairModel) -> list[StrandCluster]:
    pairs = []
    with open(path) as f:
        for ln in f:
            if ln.strip():
                i, c = ln.split()
                pairs.append((int(i), int(c)))
    n_clusters = max(c for _, c in pairs) + 1
    clusters = []
    for c in range(n_clusters):
        members = np.array(sorted(i for i, cc in pairs if cc == c), dtype=np.int64)
        clusters.append(StrandCluster(member_indices=members,
                                      mean_strand=mean_strand(model, members)))
    return clusters
