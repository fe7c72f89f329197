"""Texture reduction: group similar card textures, keep one per group.

Each texture is rasterized as tangent-colored uv strokes; a multi-scale
patch-statistics descriptor stands in for a learned perceptual metric
(an externally computed distance matrix can be supplied instead). Groups
come from k-medoids under that distance, so the retained texture is
always a real member, never a synthetic average.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from math import comb
from pathlib import Path

import numpy as np

from .cardgeom import CardGeometry
from .strokes import Stroke, chart_to_texels, composite_strokes
from .texspace import CardTexture

DEFAULT_SLOT_SHAPE = (256, 512)  # (height, width): v along height
_EXHAUSTIVE_LIMIT = 2000  # max medoid subsets to enumerate exactly


def uv_width_scale(card: CardGeometry) -> float:
    """Chart u units per world unit, from the card's mean strip width."""
    widths = np.linalg.norm(card.rails[:, 1] - card.rails[:, 0], axis=1)
    return 1.0 / max(float(widths.mean()), 1e-12)


def texture_strokes(texture: CardTexture, shape: tuple[int, int],
                    width_scale: float = 1.0) -> list[Stroke]:
    """Strand polylines as texel-space strokes with encoded-tangent color.

    width_scale converts the stored world widths to chart u units; the
    painter key is the per-sample z offset (larger z draws on top).
    """
    h, w = shape
    strokes = []
    for i in range(len(texture.uv)):
        pts = chart_to_texels(texture.uv[i], shape)
        half = np.full(len(pts),
                       0.5 * float(texture.widths[i]) * width_scale * w)
        color = 0.5 * (texture.tangent3d[i] + 1.0)
        strokes.append(Stroke(points=pts, half_width=half, color=color,
                              depth=np.zeros(len(pts)),
                              order=texture.z[i].astype(np.float64)))
    return strokes


def raster_card_texture(texture: CardTexture,
                        shape: tuple[int, int] = DEFAULT_SLOT_SHAPE,
                        width_scale: float = 1.0) -> np.ndarray:
    """Tangent-encoded RGB rasterization of the uv strands.

    Used only for similarity; uncovered texels blend to the neutral 0.5
    gray, matching the 3D renderer's background. An empty texture gives
    the plain background.
    """
    if len(texture.uv) == 0:
        return np.full((*shape, 3), 0.5)
    img = composite_strokes(shape, texture_strokes(texture, shape,
                                                   width_scale))
    rgb, _, _ = img.over_background()
    return rgb


def _box_downsample(img: np.ndarray) -> np.ndarray:
    h, w = img.shape[:2]
    img = img[:h - h % 2, :w - w % 2]
    return 0.25 * (img[0::2, 0::2] + img[1::2, 0::2] + img[0::2, 1::2]
                   + img[1::2, 1::2])


def _level_descriptor(img: np.ndarray, grid: int, bins: int) -> np.ndarray:
    gray = img.mean(axis=2)
    gy, gx = np.gradient(gray)
    mag = np.hypot(gx, gy)
    ang = np.arctan2(gy, gx)
    bin_idx = np.clip(((ang + np.pi) / (2.0 * np.pi) * bins).astype(np.int64),
                      0, bins - 1)
    parts = []
    for rows in np.array_split(np.arange(img.shape[0]), grid):
        for cols in np.array_split(np.arange(img.shape[1]), grid):
            patch = img[np.ix_(rows, cols)]
            m = mag[np.ix_(rows, cols)].ravel()
            b = bin_idx[np.ix_(rows, cols)].ravel()
            hist = np.bincount(b, weights=m, minlength=bins)
            area = float(len(rows) * len(cols))
            parts.append(patch.reshape(-1, 3).mean(axis=0))
            parts.append(hist / area)
    return np.concatenate(parts)


def texture_descriptor(img: np.ndarray, levels: int = 3, grid: int = 4,
                       bins: int = 8) -> np.ndarray:
    """Patch means + gradient-orientation histograms over a pyramid."""
    parts = []
    for _ in range(levels):
        parts.append(_level_descriptor(img, grid, bins))
        img = _box_downsample(img)
    return np.concatenate(parts)


def perceptual_distance(img_a: np.ndarray, img_b: np.ndarray) -> float:
    """Symmetric non-negative image distance; 0 for identical images."""
    if img_a.shape != img_b.shape:
        raise ValueError(f"resolution mismatch {img_a.shape} vs {img_b.shape}")
    da = texture_descriptor(img_a)
    db = texture_descriptor(img_b)
    return float(np.linalg.norm(da - db))


def save_distance_matrix(path, matrix: np.ndarray) -> None:
    matrix = np.asarray(matrix, dtype=np.float64)
    n = len(matrix)
    with open(path, "w") as f:
        f.write(f"DMAT {n}\n")
        for row in matrix:
            f.write(" ".join(f"{v:.17g}" for v in row) + "\n")


def load_distance_matrix(path) -> np.ndarray:
    text = Path(path).read_text().split()
    if len(text) < 2 or text[0] != "DMAT":
        raise ValueError("not a DMAT file")
    n = int(text[1])
    vals = text[2:]
    if len(vals) != n * n:
        raise ValueError(f"expected {n * n} entries, found {len(vals)}")
    return np.array(vals, dtype=np.float64).reshape(n, n)


@dataclass
class TextureAssignment:
    group_index: np.ndarray  # (n_cards,) group id per original texture
    representatives: np.ndarray  # (n_groups,) original texture index kept

    def validate(self) -> None:
        reps = self.representatives
        assert len(np.unique(reps)) == len(reps)
        assert self.group_index.min() >= 0
        assert self.group_index.max() < len(reps)
        for g, r in enumerate(reps):
            assert self.group_index[r] == g
        counts = np.bincount(self.group_index, minlength=len(reps))
        assert counts.min() >= 1

    def instance_counts(self) -> np.ndarray:
        return np.bincount(self.group_index,
                           minlength=len(self.representatives))


def _assignment_cost(dist: np.ndarray, medoids: np.ndarray
                     ) -> tuple[np.ndarray, float]:
    cols = dist[:, medoids]
    pick = cols.argmin(axis=1)  # first minimum: ties to lowest medoid
    return pick, float(cols[np.arange(len(dist)), pick].sum())


def _pam(dist: np.ndarray, k: int, rng: np.random.Generator,
         trace: list | None) -> tuple[np.ndarray, float]:
    n = len(dist)
    medoids = np.sort(rng.choice(n, size=k, replace=False))
    _, cost = _assignment_cost(dist, medoids)
    for _ in range(100):
        if trace is not None:
            trace.append(cost)
        assign, _ = _assignment_cost(dist, medoids)
        new_medoids = medoids.copy()
        for g in range(k):
            members = np.flatnonzero(assign == g)
            if len(members) == 0:
                # reseed on the point farthest from its medoid
                gaps = dist[np.arange(n), medoids[assign]]
                new_medoids[g] = int(gaps.argmax())
                continue
            within = dist[np.ix_(members, members)].sum(axis=1)
            new_medoids[g] = members[int(within.argmin())]
        new_medoids = np.sort(np.unique(new_medoids))
        while len(new_medoids) < k:  # collapsed duplicates: refill greedily
            gaps = dist[:, new_medoids].min(axis=1)
            gaps[new_medoids] = -1.0
            new_medoids = np.sort(np.append(new_medoids, gaps.argmax()))
        _, new_cost = _assignment_cost(dist, new_medoids)
        if np.array_equal(new_medoids, medoids) or new_cost >= cost:
            break
        medoids, cost = new_medoids, new_cost
    if trace is not None:
        trace.append(cost)
    return medoids, cost


def reduce_textures(textures, n_target: int, seed: int = 0,
                    shape: tuple[int, int] = DEFAULT_SLOT_SHAPE,
                    width_scales=None,
                    distance_matrix: np.ndarray | None = None,
                    n_init: int = 4,
                    trace: list | None = None) -> TextureAssignment:
    """Group textures under the perceptual distance; keep each medoid.

    Small instances are solved exactly by enumerating medoid subsets,
    which dominates every possible partition with member centers; larger
    ones run seeded k-medoids restarts.
    """
    n = len(textures)
    if n_target == 0:
        raise ValueError("n_target must be positive")
    if n_target > n:
        raise ValueError(f"n_target {n_target} exceeds texture count {n}")

    if distance_matrix is not None:
        dist = np.asarray(distance_matrix, dtype=np.float64)
        if dist.shape != (n, n):
            raise ValueError(f"distance matrix shape {dist.shape}, "
                             f"need {(n, n)}")
    else:
        if width_scales is None:
            width_scales = [1.0] * n
        descs = [texture_descriptor(raster_card_texture(t, shape, ws))
                 for t, ws in zip(textures, width_scales)]
        descs = np.stack(descs)
        diff = descs[:, None, :] - descs[None, :, :]
        dist = np.sqrt((diff ** 2).sum(axis=2))

    if comb(n, n_target) <= _EXHAUSTIVE_LIMIT:
        best_m, best_c = None, np.inf
        for combo in combinations(range(n), n_target):
            m = np.array(combo)
            _, c = _assignment_cost(dist, m)
            if c < best_c - 1e-15:
                best_m, best_c = m, c
        medoids = best_m
        if trace is not None:
            trace.append([best_c])
    else:
        rng = np.random.default_rng(seed)
        best_m, best_c = None, np.inf
        for _ in range(max(1, n_init)):
            run: list = []
            m, c = _pam(dist, n_target, rng, run)
            if trace is not None:
                trace.append(run)
            if c < best_c - 1e-15:
                best_m, best_c = m, c
        medoids = best_m

    assign, _ = _assignment_cost(dist, medoids)
    # every medoid owns itself even under exact distance ties
    assign[medoids] = np.arange(n_target)
    out = TextureAssignment(group_index=assign,
                            representatives=medoids.copy())
    out.validate()
    return out


def apply_reduction(textures, assignment: TextureAssignment
                    ) -> tuple[list, list[int]]:
    """(retained textures, per-card texture index) for the optimizer."""
    retained = [textures[int(r)] for r in assignment.representatives]
    return retained, [int(g) for g in assignment.group_index]
