"""Joint gradient fine-tuning of card geometry and strand textures.

Decision variables are the rail points of every card and the uv, tangent,
and width entries of every texture; per-strand depth offsets stay fixed.
Textures may be shared by several cards (after reduction), in which case
the shared tensors accumulate gradients from every card instance that
uses them. Epochs walk the fixed view set in seeded random subsets.
"""

from __future__ import annotations

import csv
import os
import tempfile
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .cardgeom import CardGeometry
from .hairio import HairModel
from .losses import LossWeights, MeshSdf, total_loss
from .softrender import (ViewCamera, render_strands_torch, sample_views,
                         strand_tangent_attrs)
from .texspace import (CardTexture, chart_lookup, default_strand_width,
                       reconstruct_points_torch)

_TANGENT_FLOOR = 1e-9


@dataclass
class OptimConfig:
    epochs: int = 200
    n_views: int = 12
    subset_size: int = 4
    resolution: int = 256
    seed: int = 0
    texture_lr: float = 1e-3
    rail_lr_scale: float = 1e-4  # multiplied by the bounding radius
    width_floor_scale: float = 1e-6  # multiplied by the bounding radius
    checkpoint_every: int = 0  # epochs between checkpoints, 0 disables
    checkpoint_dir: str | Path | None = None
    log_path: str | Path | None = None

    def __post_init__(self):
        if self.epochs < 0 or self.n_views < 1 or self.subset_size < 1:
            raise ValueError("invalid optimization schedule")
        if self.texture_lr <= 0 or self.rail_lr_scale <= 0:
            raise ValueError("learning rates must be positive")


@dataclass
class TextureParams:
    """Trainable tensors for one (possibly shared) texture."""

    uv: torch.Tensor  # (S, n, 2) leaf
    tangent: torch.Tensor  # (S, n, 3) leaf
    widths: torch.Tensor  # (S,) leaf
    z: torch.Tensor  # (S, n) constant


@dataclass
class CardParams:
    rails: torch.Tensor  # (C, 2, 3) leaf
    sample_indices: np.ndarray  # (C,) constant
    v_values: torch.Tensor  # (C,) constant
    texture_index: int
    centerline: np.ndarray  # (C, 3) carried through for provenance


@dataclass
class CardScene:
    cards: list[CardParams]
    textures: list[TextureParams]

    def trainable_parameters(self) -> tuple[list[torch.Tensor],
                                            list[torch.Tensor]]:
        """(texture-space params, rail params) in stable build order."""
        tex = []
        for t in self.textures:
            tex.extend((t.uv, t.tangent, t.widths))
        return tex, [c.rails for c in self.cards]


@dataclass
class OptimState:
    """Flattened parameters plus Adam moments; the checkpoint payload."""

    parameters: np.ndarray
    exp_avg: np.ndarray
    exp_avg_sq: np.ndarray
    step_count: int
    epoch: int


@dataclass
class OptimResult:
    cards: list[CardGeometry]
    textures: list[CardTexture]
    assignment: list[int]
    initial_loss: float
    final_loss: float
    history: list[dict] = field(default_factory=list)


def build_scene(cards: Sequence[CardGeometry],
                textures: Sequence[CardTexture],
                assignment: Sequence[int] | None = None) -> CardScene:
    """Lift geometry and textures into trainable torch tensors.

    assignment[i] names the texture card i uses; default is one texture
    per card in order.
    """
    if assignment is None:
        if len(textures) != len(cards):
            raise ValueError("without an assignment, need one texture per card")
        assignment = list(range(len(cards)))
    if len(assignment) != len(cards):
        raise ValueError("assignment length must match card count")
    tex_params = []
    for t in textures:
        t.validate()
        tex_params.append(TextureParams(
            uv=torch.tensor(t.uv, dtype=torch.float64, requires_grad=True),
            tangent=torch.tensor(t.tangent3d, dtype=torch.float64,
                                 requires_grad=True),
            widths=torch.tensor(t.widths, dtype=torch.float64,
                                requires_grad=True),
            z=torch.tensor(t.z, dtype=torch.float64)))
    card_params = []
    for card, tex_i in zip(cards, assignment):
        tex_i = int(tex_i)
        if not 0 <= tex_i < len(textures):
            raise ValueError(f"texture index {tex_i} out of range")
        v = card.uv_layout[0::2, 1]
        card_params.append(CardParams(
            rails=torch.tensor(card.rails, dtype=torch.float64,
                               requires_grad=True),
            sample_indices=card.sample_indices.copy(),
            v_values=torch.tensor(v, dtype=torch.float64),
            texture_index=tex_i,
            centerline=card.centerline.copy()))
    return CardScene(cards=card_params, textures=tex_params)


def scene_outputs(scene: CardScene) -> tuple[list[CardGeometry],
                                             list[CardTexture]]:
    """Detach the scene back into geometry and texture records.

    The centerline is carried from the input geometry; after rails move
    freely the rails alone are authoritative.
    """
    cards = []
    for c in scene.cards:
        rails = c.rails.detach().numpy().copy()
        cards.append(CardGeometry(rails=rails,
                                  centerline=c.centerline.copy(),
                                  sample_indices=c.sample_indices.copy()))
    textures = []
    for t in scene.textures:
        tex = CardTexture(uv=t.uv.detach().numpy().copy(),
                          z=t.z.detach().numpy().copy(),
                          tangent3d=t.tangent.detach().numpy().copy(),
                          widths=t.widths.detach().numpy().copy())
        tex.validate()
        textures.append(tex)
    return cards, textures


def reconstruct_scene(scene: CardScene) -> tuple[torch.Tensor, torch.Tensor,
                                                 torch.Tensor]:
    """All card strands in world space: (points, tangents, widths).

    Chart triangle selection is refreshed from the current uv values and
    held constant through differentiation.
    """
    pts, attrs, widths = [], [], []
    for c in scene.cards:
        t = scene.textures[c.texture_index]
        s, n, _ = t.uv.shape
        uv_flat = t.uv.reshape(-1, 2)
        band_np, side_np = chart_lookup(c.v_values.numpy(),
                                        uv_flat.detach().numpy())
        band = torch.from_numpy(band_np)
        side = torch.from_numpy(side_np)
        p = reconstruct_points_torch(c.rails.reshape(-1, 3), c.v_values,
                                     uv_flat, t.z.reshape(-1), band, side)
        pts.append(p.reshape(s, n, 3))
        attrs.append(t.tangent)
        widths.append(t.widths)
    return torch.cat(pts), torch.cat(attrs), torch.cat(widths)


def scene_rails(scene: CardScene) -> torch.Tensor:
    return torch.cat([c.rails.reshape(-1, 3) for c in scene.cards])


def reference_renders(model: HairModel, views: Sequence[ViewCamera]
                      ) -> list[tuple[torch.Tensor, torch.Tensor,
                                      torch.Tensor]]:
    """Strand-model channel renders per view, as constant tensors."""
    samples = model.samples
    bounds = model.bounds
    width = default_strand_width(bounds.radius, views[0].resolution)
    pts = torch.tensor(samples, dtype=torch.float64)
    attrs = torch.tensor(strand_tangent_attrs(samples), dtype=torch.float64)
    widths = torch.full((len(samples),), width, dtype=torch.float64)
    out = []
    with torch.no_grad():
        for cam in views:
            tan, dep, mask, _ = render_strands_torch(pts, attrs, widths, cam)
            out.append((tan, dep, mask))
    return out


def _objective(scene: CardScene, refs, views, view_ids, sdf, weights
               ) -> tuple[torch.Tensor, dict]:
    points, tangents, widths = reconstruct_scene(scene)
    rendered = []
    for v in view_ids:
        tan, dep, mask, _ = render_strands_torch(points, tangents, widths,
                                                 views[v])
        rendered.append((tan, dep, mask))
    return total_loss(rendered, [refs[v] for v in view_ids], tangents,
                      points, scene_rails(scene), sdf, weights)


def full_objective(scene: CardScene, refs, views, sdf, weights
                   ) -> tuple[float, dict]:
    """Objective over the whole view set at the current parameters."""
    with torch.no_grad():
        total, terms = _objective(scene, refs, views, range(len(views)),
                                  sdf, weights)
    return float(total), terms


def _project_constraints(scene: CardScene, width_floor: float,
                         prev_tangents: list[torch.Tensor]) -> None:
    with torch.no_grad():
        for t, prev in zip(scene.textures, prev_tangents):
            t.uv.clamp_(0.0, 1.0)
            t.widths.clamp_(min=width_floor)
            norms = torch.linalg.norm(t.tangent, dim=-1, keepdim=True)
            # a step that annihilates a tangent keeps its pre-step direction
            dead = norms <= _TANGENT_FLOOR
            t.tangent.copy_(torch.where(dead, prev,
                                        t.tangent / norms.clamp_min(
                                            _TANGENT_FLOOR)))


def capture_state(scene: CardScene, optimizer: torch.optim.Adam,
                  epoch: int) -> OptimState:
    tex, rails = scene.trainable_parameters()
    params = tex + rails
    flat_p, flat_m, flat_v = [], [], []
    step = 0
    for p in params:
        flat_p.append(p.detach().numpy().ravel())
        st = optimizer.state.get(p, {})
        if st:
            step = int(st["step"])
            flat_m.append(st["exp_avg"].numpy().ravel())
            flat_v.append(st["exp_avg_sq"].numpy().ravel())
        else:
            flat_m.append(np.zeros(p.numel()))
            flat_v.append(np.zeros(p.numel()))
    return OptimState(parameters=np.concatenate(flat_p),
                      exp_avg=np.concatenate(flat_m),
                      exp_avg_sq=np.concatenate(flat_v),
                      step_count=step, epoch=epoch)


def restore_state(scene: CardScene, optimizer: torch.optim.Adam,
                  state: OptimState) -> None:
    tex, rails = scene.trainable_parameters()
    params = tex + rails
    total = sum(p.numel() for p in params)
    if total != state.parameters.size:
        raise ValueError("checkpoint layout does not match the scene")
    off = 0
    with torch.no_grad():
        for p in params:
            n = p.numel()
            sl = slice(off, off + n)
            p.copy_(torch.from_numpy(
                state.parameters[sl].reshape(p.shape).copy()))
            if state.step_count > 0:
                optimizer.state[p] = {
                    "step": torch.tensor(float(state.step_count)),
                    "exp_avg": torch.from_numpy(
                        state.exp_avg[sl].reshape(p.shape).copy()),
                    "exp_avg_sq": torch.from_numpy(
                        state.exp_avg_sq[sl].reshape(p.shape).copy()),
                }
            off += n


def save_checkpoint(path: str | Path, state: OptimState) -> None:
    """Atomic write so a killed run never leaves a torn checkpoint."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        np.savez(f, parameters=state.parameters, exp_avg=state.exp_avg,
                 exp_avg_sq=state.exp_avg_sq,
                 step_count=np.int64(state.step_count),
                 epoch=np.int64(state.epoch))
    os.replace(tmp, path)


def load_checkpoint(path: str | Path) -> OptimState:
    with np.load(path) as d:
        return OptimState(parameters=d["parameters"], exp_avg=d["exp_avg"],
                          exp_avg_sq=d["exp_avg_sq"],
                          step_count=int(d["step_count"]),
                          epoch=int(d["epoch"]))


def _latest_checkpoint(ckpt_dir: Path) -> Path | None:
    found = sorted(ckpt_dir.glob("epoch_*.npz"))
    return found[-1] if found else None


def _dump_diagnostics(scene: CardScene, terms: dict, epoch: int, step: int,
                      ckpt_dir: Path | None) -> Path:
    base = ckpt_dir if ckpt_dir is not None else Path(tempfile.gettempdir())
    base.mkdir(parents=True, exist_ok=True)
    path = base / f"nan_diagnostics_epoch{epoch}_step{step}.npz"
    tex, rails = scene.trainable_parameters()
    payload = {"epoch": np.int64(epoch), "step": np.int64(step)}
    for i, p in enumerate(tex + rails):
        payload[f"param_{i}"] = p.detach().numpy()
        payload[f"grad_{i}"] = (p.grad.numpy() if p.grad is not None
                                else np.zeros(p.shape))
    for k, v in terms.items():
        payload[f"term_{k}"] = np.float64(v)
    np.savez(path, **payload)
    return path


def joint_optimize(cards: Sequence[CardGeometry],
                   textures: Sequence[CardTexture],
                   reference: HairModel, sdf: MeshSdf | None,
                   weights: LossWeights, config: OptimConfig,
                   assignment: Sequence[int] | None = None,
                   views: Sequence[ViewCamera] | None = None,
                   resume: bool = False) -> OptimResult:
    """Adam fine-tuning of all cards and textures against strand renders.

    Epoch = one pass over the view set in seeded random subsets of
    config.subset_size. Texture-space parameters and rail points sit in
    separate learning-rate groups; constraints (uv box, width floor, unit
    tangents) are re-projected after each step. With zero epochs the
    inputs round-trip unchanged.
    """
    scene = build_scene(cards, textures, assignment)
    assign = (list(range(len(cards))) if assignment is None
              else [int(a) for a in assignment])
    bounds = reference.bounds
    if views is None:
        views = sample_views(config.n_views, bounds,
                             resolution=config.resolution)
    refs = reference_renders(reference, views)
    tex_params, rail_params = scene.trainable_parameters()
    optimizer = torch.optim.Adam([
        {"params": tex_params, "lr": config.texture_lr},
        {"params": rail_params, "lr": config.rail_lr_scale * bounds.radius},
    ])
    width_floor = config.width_floor_scale * bounds.radius

    ckpt_dir = (Path(config.checkpoint_dir)
                if config.checkpoint_dir is not None else None)
    start_epoch = 0
    if resume and ckpt_dir is not None:
        latest = _latest_checkpoint(ckpt_dir)
        if latest is not None:
            state = load_checkpoint(latest)
            restore_state(scene, optimizer, state)
            start_epoch = state.epoch

    initial_loss, _ = full_objective(scene, refs, views, sdf, weights)
    start_snapshot = capture_state(scene, optimizer, start_epoch)

    rng = np.random.default_rng(config.seed)
    for _ in range(start_epoch):  # replay the schedule up to the restart
        rng.permutation(len(views))

    log_file = writer = None
    if config.log_path is not None:
        log_path = Path(config.log_path)
        fresh = not (resume and log_path.exists() and start_epoch > 0)
        log_file = open(log_path, "w" if fresh else "a", newline="")
        writer = csv.writer(log_file)
        if fresh:
            writer.writerow(["epoch", "tangent", "depth", "dice", "match",
                             "collision", "total"])

    history: list[dict] = []
    try:
        for epoch in range(start_epoch, config.epochs):
            order = rng.permutation(len(views))
            step_terms: list[dict] = []
            step_totals: list[float] = []
            for s0 in range(0, len(order), config.subset_size):
                subset = order[s0:s0 + config.subset_size]
                optimizer.zero_grad()
                total, terms = _objective(scene, refs, views, subset, sdf,
                                          weights)
                if not torch.isfinite(total):
                    total.backward()
                    path = _dump_diagnostics(scene, terms, epoch,
                                             s0 // config.subset_size,
                                             ckpt_dir)
                    raise RuntimeError(
                        f"non-finite loss at epoch {epoch}; "
                        f"diagnostics written to {path}")
                total.backward()
                prev_tan = [t.tangent.detach().clone()
                            for t in scene.textures]
                optimizer.step()
                _project_constraints(scene, width_floor, prev_tan)
                step_terms.append(terms)
                step_totals.append(float(total.detach()))
            row = {k: float(np.mean([t[k] for t in step_terms]))
                   for k in step_terms[0]}
            row["epoch"] = epoch
            row["total"] = float(np.mean(step_totals))
            history.append(row)
            if writer is not None:
                writer.writerow([epoch] + [f"{row[k]:.17g}" for k in
                                           ("tangent", "depth", "dice",
                                            "match", "collision", "total")])
                log_file.flush()
            done = epoch + 1
            if (ckpt_dir is not None and config.checkpoint_every > 0
                    and (done % config.checkpoint_every == 0
                         or done == config.epochs)):
                ckpt_dir.mkdir(parents=True, exist_ok=True)
                save_checkpoint(ckpt_dir / f"epoch_{done:04d}.npz",
                                capture_state(scene, optimizer, done))
    finally:
        if log_file is not None:
            log_file.close()

    final_loss, _ = full_objective(scene, refs, views, sdf, weights)
    if final_loss > initial_loss:
        # contract: never end worse than the starting point
        warnings.warn("optimization ended above its starting loss; "
                      "restoring the initial parameters")
        restore_state(scene, optimizer, start_snapshot)
        final_loss = initial_loss
    out_cards, out_textures = scene_outputs(scene)
    return OptimResult(cards=out_cards, textures=out_textures,
                       assignment=assign, initial_loss=initial_loss,
                       final_loss=final_loss, history=history)
