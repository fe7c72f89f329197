"""2D anti-aliased capsule strokes for texture-space rasterization.

Strands live in chart uv; here they become polylines in continuous texel
coordinates and are composited far-to-near with per-texel coverage, so
both the similarity rasterizer and the atlas baker share one code path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class Stroke:
    """One polyline with per-sample attributes, in texel coordinates."""

    points: np.ndarray  # (n, 2) continuous (x, y) texel positions
    half_width: np.ndarray  # (n,) texels
    color: np.ndarray  # (n, 3)
    depth: np.ndarray  # (n,) scalar composited like color (already encoded)
    order: np.ndarray  # (n,) painter key, larger = nearer = drawn later


@dataclass
class StrokeImage:
    color: np.ndarray  # (H, W, 3) premultiplied accumulation
    depth: np.ndarray  # (H, W) premultiplied accumulation
    alpha: np.ndarray  # (H, W) in [0, 1]

    def over_background(self, bg_color: float = 0.5, bg_depth: float = 0.5
                        ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        rest = 1.0 - self.alpha
        rgb = self.color + rest[..., None] * bg_color
        dep = self.depth + rest * bg_depth
        return rgb, dep, self.alpha


def chart_to_texels(uv: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Map chart uv to continuous texel coords; v runs up the image."""
    h, w = shape
    out = np.empty_like(uv, dtype=np.float64)
    out[..., 0] = uv[..., 0] * w
    out[..., 1] = (1.0 - uv[..., 1]) * h
    return out


def _segment_coverage(p0, p1, h0, h1, shape):
    """Coverage of one capsule segment over its texel bounding box.

    Returns (ys, xs, coverage, t) where t is the projection parameter used
    to interpolate per-sample attributes.
    """
    height, width = shape
    pad = max(h0, h1) + 1.0
    x_lo = int(np.floor(min(p0[0], p1[0]) - pad))
    x_hi = int(np.ceil(max(p0[0], p1[0]) + pad))
    y_lo = int(np.floor(min(p0[1], p1[1]) - pad))
    y_hi = int(np.ceil(max(p0[1], p1[1]) + pad))
    x_lo, x_hi = max(x_lo, 0), min(x_hi, width)
    y_lo, y_hi = max(y_lo, 0), min(y_hi, height)
    if x_lo >= x_hi or y_lo >= y_hi:
        return None
    xs = np.arange(x_lo, x_hi) + 0.5
    ys = np.arange(y_lo, y_hi) + 0.5
    gx, gy = np.meshgrid(xs, ys)
    d = p1 - p0
    len2 = float(d @ d)
    if len2 <= 1e-24:
        t = np.zeros_like(gx)
    else:
        t = ((gx - p0[0]) * d[0] + (gy - p0[1]) * d[1]) / len2
        t = np.clip(t, 0.0, 1.0)
    cx = p0[0] + t * d[0]
    cy = p0[1] + t * d[1]
    dist = np.hypot(gx - cx, gy - cy)
    half = h0 + t * (h1 - h0)
    cov = np.clip(half - dist + 0.5, 0.0, 1.0)
    return (slice(y_lo, y_hi), slice(x_lo, x_hi)), cov, t


def accumulate_coverage(shape: tuple[int, int], strokes: list[Stroke]
                        ) -> np.ndarray:
    """Additive per-texel coverage sum: overlap density, not alpha."""
    dens = np.zeros(shape)
    for s in strokes:
        for j in range(len(s.points) - 1):
            hit = _segment_coverage(s.points[j], s.points[j + 1],
                                    float(s.half_width[j]),
                                    float(s.half_width[j + 1]), shape)
            if hit is None:
                continue
            window, cov, _ = hit
            dens[window] += cov
    return dens


def composite_strokes(shape: tuple[int, int], strokes: list[Stroke]
                      ) -> StrokeImage:
    """Far-to-near over-compositing of capsule segments.

    Segments across all strokes are sorted by mean painter key (ascending)
    with stable (stroke, segment) tie-breaking, then composited with the
    standard over operator on premultiplied color/depth.
    """
    h, w = shape
    color = np.zeros((h, w, 3))
    depth = np.zeros((h, w))
    alpha = np.zeros((h, w))
    segs = []
    for si, s in enumerate(strokes):
        n = len(s.points)
        for j in range(n - 1):
            key = 0.5 * (s.order[j] + s.order[j + 1])
            segs.append((key, si, j))
    if segs:
        keys = np.array([s[0] for s in segs])
        sidx = np.array([s[1] for s in segs])
        jidx = np.array([s[2] for s in segs])
        for k in np.lexsort((jidx, sidx, keys)):
            s = strokes[sidx[k]]
            j = jidx[k]
            hit = _segment_coverage(s.points[j], s.points[j + 1],
                                    float(s.half_width[j]),
                                    float(s.half_width[j + 1]), shape)
            if hit is None:
                continue
            window, cov, t = hit
            col = s.color[j][None, None, :] + t[..., None] * (
                s.color[j + 1] - s.color[j])[None, None, :]
            dep = s.depth[j] + t * (s.depth[j + 1] - s.depth[j])
            rest = 1.0 - cov
            color[window] = cov[..., None] * col + rest[..., None] * color[window]
            depth[window] = cov * dep + rest * depth[window]
            alpha[window] = cov + rest * alpha[window]
    return StrokeImage(color=color, depth=depth, alpha=alpha)
