"""Evaluation metrics: card renders against strand renders, fixed views.

Both models are drawn with the same soft rasterizer at the same
resolution; all image metrics run on the resulting tangent and mask
channels. The reference is always the strand model.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .hairio import HairModel
from .softrender import (render_strands_torch, sample_views,
                         save_channel_png, strand_tangent_attrs)
from .texreduce import perceptual_distance
from .texspace import default_strand_width

PSNR_CAP = 99.0  # report sentinel standing in for infinity


def psnr(img_a: np.ndarray, img_b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for images valued in [0, 1]."""
    a = np.asarray(img_a, dtype=np.float64)
    b = np.asarray(img_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"resolution mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse <= 0.0:
        return PSNR_CAP
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP)


def _binarize(mask: np.ndarray) -> np.ndarray:
    return np.asarray(mask) > 0.5


def coverage_error(mask_a: np.ndarray, mask_b: np.ndarray) -> float:
    """Fraction of the frame where the binarized masks disagree."""
    a = _binarize(mask_a)
    b = _binarize(mask_b)
    if a.shape != b.shape:
        raise ValueError(f"resolution mismatch {a.shape} vs {b.shape}")
    return float(np.mean(a != b))


def dice_coefficient(mask_a: np.ndarray, mask_b: np.ndarray) -> float:
    """Binarized overlap score in [0, 1]; two empty masks count as 1."""
    a = _binarize(mask_a)
    b = _binarize(mask_b)
    if a.shape != b.shape:
        raise ValueError(f"resolution mismatch {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


@dataclass(frozen=True)
class ViewMetrics:
    view_index: int
    psnr: float
    perceptual: float
    coverage_error: float
    dice: float


@dataclass(frozen=True)
class EvalReport:
    views: tuple[ViewMetrics, ...]
    psnr: float
    perceptual: float
    coverage_error: float
    dice: float
    resolution: int

    def validate(self) -> None:
        for name in ("psnr", "perceptual", "coverage_error", "dice"):
            mean = float(np.mean([getattr(v, name) for v in self.views]))
            if abs(mean - getattr(self, name)) > 1e-9:
                raise ValueError(f"report average for {name} drifted")

    def to_text(self) -> str:
        payload = {
            "resolution": self.resolution,
            "n_views": len(self.views),
            "average": {"psnr": self.psnr, "perceptual": self.perceptual,
                        "coverage_error": self.coverage_error,
                        "dice": self.dice},
            "views": [asdict(v) for v in self.views],
        }
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def report_from_views(views: list[ViewMetrics], resolution: int
                      ) -> EvalReport:
    def mean(name):
        return float(np.mean([getattr(v, name) for v in views]))

    return EvalReport(views=tuple(views), psnr=mean("psnr"),
                      perceptual=mean("perceptual"),
                      coverage_error=mean("coverage_error"),
                      dice=mean("dice"), resolution=resolution)


def render_strand_set(points: np.ndarray, widths: np.ndarray, views
                      ) -> list[tuple[np.ndarray, np.ndarray]]:
    """Render (S, n, 3) polylines for every view; (tangent, mask) pairs.

    An empty set renders as blank frames.
    """
    out = []
    if len(points) == 0:
        for cam in views:
            res = cam.resolution
            out.append((np.zeros((res, res, 3)), np.zeros((res, res))))
        return out
    pts = torch.as_tensor(points, dtype=torch.float64)
    wid = torch.as_tensor(widths, dtype=torch.float64)
    attrs = torch.as_tensor(strand_tangent_attrs(np.asarray(points)),
                            dtype=torch.float64)
    with torch.no_grad():
        for cam in views:
            tan, _, mask, _ = render_strands_torch(pts, attrs, wid, cam)
            out.append((tan.numpy(), mask.numpy()))
    return out


def evaluate_strand_sets(card_points: np.ndarray, card_widths: np.ndarray,
                         model: HairModel, n_views: int = 12,
                         resolution: int = 256,
                         pairs_dir=None) -> EvalReport:
    """Full evaluation of a card model, given as its reconstructed strands.

    pairs_dir, when set, receives per-view tangent PNGs of both models
    for visual diffing.
    """
    views = sample_views(n_views, model.bounds, resolution=resolution)
    ref_width = default_strand_width(model.bounds.radius, resolution)
    ref = render_strand_set(model.samples,
                            np.full(len(model.strands), ref_width), views)
    cand = render_strand_set(card_points, np.asarray(card_widths), views)

    per_view = []
    for k in range(n_views):
        cand_tan, cand_mask = cand[k]
        ref_tan, ref_mask = ref[k]
        # tangent channels are camera-space directions in [-1, 1]
        cand_enc = 0.5 * (cand_tan + 1.0)
        ref_enc = 0.5 * (ref_tan + 1.0)
        per_view.append(ViewMetrics(
            view_index=k,
            psnr=psnr(cand_enc, ref_enc),
            perceptual=perceptual_distance(cand_enc, ref_enc),
            coverage_error=coverage_error(cand_mask, ref_mask),
            dice=dice_coefficient(cand_mask, ref_mask)))
        if pairs_dir is not None:
            pairs_dir = Path(pairs_dir)
            pairs_dir.mkdir(parents=True, exist_ok=True)
            save_channel_png(cand_enc, pairs_dir / f"view_{k:02d}_cards.png")
            save_channel_png(ref_enc, pairs_dir / f"view_{k:02d}_strands.png")
    return report_from_views(per_view, resolution)
