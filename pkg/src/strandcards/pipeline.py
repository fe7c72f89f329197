"""Batch pipeline: strand hair in, textured hair-card model out.

Stages run in a fixed order inside a fixed output layout. Every stage
reads only files written by earlier stages and finishes by writing its
own manifest, so a killed run resumes at the first stage whose manifest
is missing. A lock file keeps the output directory single-writer.
"""

from __future__ import annotations

import colorsys
import os
from contextlib import contextmanager
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
import torch

from .cardgeom import (CardGeometry, bishop_frames, build_card, card_widths,
                       cross_card, orientation_search)
from .cluster import (cluster_strands, clustering_inertia, load_assignments,
                      save_assignments)
from .haircap import bake_cap_texture, build_cap_mesh, save_cap
from .hairio import (HairModel, downsample_strands, load_hair, load_head_mesh,
                     save_hair_text, save_head_mesh)
from .losses import LossWeights, MeshSdf
from .metrics import evaluate_strand_sets, render_strand_set
from .optimize import OptimConfig, joint_optimize
from .softrender import render_strands_torch, sample_views, save_channel_png
from .texreduce import (TextureAssignment, apply_reduction, reduce_textures,
                        uv_width_scale)
from .texspace import (default_strand_width, load_textures, project_cluster,
                       reconstruct, save_textures)
from . import bake as bakemod

STAGE_ORDER = ("load", "cluster", "fit", "project", "reduce", "optimize",
               "bake", "cap", "eval")

# stages a later stage reads artifacts from
STAGE_DEPS = {
    "load": (),
    "cluster": ("load",),
    "fit": ("load", "cluster"),
    "project": ("load", "cluster", "fit"),
    "reduce": ("fit", "project"),
    "optimize": ("load", "fit", "project", "reduce"),
    "bake": ("optimize", "reduce"),
    "cap": ("load",),
    "eval": ("load", "fit", "project", "reduce", "optimize"),
}

WEIGHT_PRESETS = ("straight", "curly")


class PipelineConfigError(ValueError):
    pass


class PipelineLockError(RuntimeError):
    pass


class StageError(RuntimeError):
    """Wraps any stage failure with the stage name attached."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


def _power_of_two(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class PipelineConfig:
    """Resolved pipeline settings; field names double as config file keys."""

    hair_path: str = ""
    head_path: str = ""
    output_dir: str = "cards_out"
    n_strands: int = 0  # 0 keeps every input strand
    n_samples: int = 32
    n_cards: int = 32
    n_textures: int = 32
    n_quads: int = 10
    crossed: bool = False
    cap: bool = False
    weights: str = "straight"  # preset name or five comma-separated values
    seed: int = 0
    optimize_resolution: int = 256
    eval_resolution: int = 256
    cap_resolution: int = 512
    slot_width: int = 512
    slot_height: int = 256
    slot_rows: int = 8
    slot_cols: int = 4
    ao_rays: int = 64
    ao_stride: int = 1
    epochs: int = 200
    optimize_views: int = 12
    view_subset: int = 4
    eval_views: int = 12
    checkpoint_every: int = 25
    texture_lr: float = 1e-3
    rail_lr_scale: float = 1e-4

    def __post_init__(self):
        if self.n_textures > self.n_cards:
            raise PipelineConfigError(
                f"n_textures ({self.n_textures}) must not exceed "
                f"n_cards ({self.n_cards})")
        if self.n_quads < 1:
            raise PipelineConfigError("n_quads must be >= 1")
        if self.n_cards < 1 or self.n_textures < 1:
            raise PipelineConfigError("need at least one card and texture")
        if self.n_samples < 2:
            raise PipelineConfigError("n_samples must be >= 2")
        for name in ("optimize_resolution", "eval_resolution",
                     "cap_resolution", "slot_width", "slot_height"):
            if not _power_of_two(getattr(self, name)):
                raise PipelineConfigError(f"{name} must be a power of two")
        if self.slot_rows < 1 or self.slot_cols < 1:
            raise PipelineConfigError("atlas grid must be at least 1x1")
        if self.epochs < 0:
            raise PipelineConfigError("epochs must be >= 0")
        if min(self.optimize_views, self.eval_views, self.view_subset) < 1:
            raise PipelineConfigError("view counts must be >= 1")
        self.resolve_weights()  # fail early on a bad weights string

    def resolve_weights(self) -> LossWeights:
        text = self.weights.strip()
        if text == "straight":
            return LossWeights.straight_preset()
        if text == "curly":
            return LossWeights.curly_preset()
        parts = [p for p in text.replace(",", " ").split() if p]
        if len(parts) != 5:
            raise PipelineConfigError(
                "weights must be 'straight', 'curly', or five numbers "
                "(tangent, depth, dice, match, collision)")
        try:
            vals = [float(p) for p in parts]
        except ValueError as e:
            raise PipelineConfigError(f"bad weights value: {e}") from e
        return LossWeights(tangent=vals[0], depth=vals[1], dice=vals[2],
                           match=vals[3], collision=vals[4])

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


def parse_config_file(path) -> dict[str, str]:
    """key = value lines; '#' comments; unknown keys rejected later."""
    out: dict[str, str] = {}
    for ln, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise PipelineConfigError(f"{path}:{ln}: expected 'key = value'")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _coerce(name: str, kind: type, text: str):
    if kind is bool:
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise PipelineConfigError(f"{name}: expected a boolean, got {text!r}")
    try:
        return kind(text)
    except ValueError as e:
        raise PipelineConfigError(f"{name}: {e}") from e


def config_from_sources(config_file=None, overrides: dict | None = None
                        ) -> PipelineConfig:
    """defaults <- config file <- explicit overrides."""
    values: dict = {}
    types = {f.name: type(f.default) for f in fields(PipelineConfig)}
    if config_file is not None:
        for key, text in parse_config_file(config_file).items():
            if key not in types:
                raise PipelineConfigError(f"unknown config key {key!r}")
            values[key] = _coerce(key, types[key], text)
    for key, value in (overrides or {}).items():
        if key not in types:
            raise PipelineConfigError(f"unknown config key {key!r}")
        if value is None:
            continue
        if isinstance(value, str):
            value = _coerce(key, types[key], value)
        values[key] = value
    return PipelineConfig(**values)


class PipelinePaths:
    """The fixed on-disk layout below one output directory."""

    def __init__(self, root):
        self.root = Path(root)

    def stage_dir(self, name: str) -> Path:
        return self.root / "stages" / name

    def manifest(self, name: str) -> Path:
        return self.stage_dir(name) / "manifest.txt"

    @property
    def lock_file(self) -> Path:
        return self.root / "pipeline.lock"

    @property
    def config_snapshot(self) -> Path:
        return self.root / "config.txt"

    @property
    def model_file(self) -> Path:
        return self.stage_dir("load") / "model.hair"

    @property
    def head_file(self) -> Path:
        return self.stage_dir("load") / "head.obj"

    @property
    def assignments_file(self) -> Path:
        return self.stage_dir("cluster") / "assignments.txt"

    @property
    def cards_file(self) -> Path:
        return self.stage_dir("fit") / "cards.npz"

    @property
    def textures_file(self) -> Path:
        return self.stage_dir("project") / "textures.bin"

    @property
    def reduction_file(self) -> Path:
        return self.stage_dir("reduce") / "assignment.txt"

    @property
    def opt_cards_file(self) -> Path:
        return self.stage_dir("optimize") / "cards.npz"

    @property
    def opt_textures_file(self) -> Path:
        return self.stage_dir("optimize") / "textures.bin"

    @property
    def history_file(self) -> Path:
        return self.stage_dir("optimize") / "history.csv"

    @property
    def checkpoint_dir(self) -> Path:
        return self.stage_dir("optimize") / "checkpoints"

    @property
    def bake_export_dir(self) -> Path:
        return self.stage_dir("bake") / "export"

    @property
    def report_file(self) -> Path:
        return self.stage_dir("eval") / "report.json"

    @property
    def report_initial_file(self) -> Path:
        return self.stage_dir("eval") / "report_initial.json"


def _pid_alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True


@contextmanager
def pipeline_lock(paths: PipelinePaths):
    """One pipeline instance per output directory; stale locks reclaimed."""
    paths.root.mkdir(parents=True, exist_ok=True)
    lock = paths.lock_file
    for _ in range(8):
        try:
            fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            os.write(fd, f"{os.getpid()}\n".encode())
            os.close(fd)
            break
        except FileExistsError:
            try:
                pid = int(lock.read_text().strip() or "0")
            except (OSError, ValueError):
                pid = 0
            if pid and pid != os.getpid() and _pid_alive(pid):
                raise PipelineLockError(
                    f"output directory {paths.root} is locked by running "
                    f"process {pid}") from None
            lock.unlink(missing_ok=True)  # stale: owner is gone
    else:
        raise PipelineLockError(f"could not acquire {lock}")
    try:
        yield
    finally:
        lock.unlink(missing_ok=True)


def _write_manifest(path: Path, entries: dict) -> None:
    lines = []
    for key, value in entries.items():
        if isinstance(value, float):
            value = "%.17g" % value
        lines.append(f"{key} = {value}")
    tmp = path.with_suffix(".tmp")
    tmp.write_text("\n".join(lines) + "\n")
    os.replace(tmp, path)


def read_manifest(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if "=" in line:
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def _ensure_config_snapshot(config: PipelineConfig,
                            paths: PipelinePaths) -> None:
    text = config.to_text()
    snap = paths.config_snapshot
    if snap.exists():
        if snap.read_text() != text:
            raise PipelineConfigError(
                f"{snap} disagrees with the requested configuration; "
                "resume with the original settings or use a new output "
                "directory")
        return
    paths.root.mkdir(parents=True, exist_ok=True)
    snap.write_text(text)


def save_cards(path, cards: list[CardGeometry], cluster_of_card,
               crossed_flag) -> None:
    np.savez(path,
             rails=np.stack([c.rails for c in cards]),
             centerline=np.stack([c.centerline for c in cards]),
             sample_indices=cards[0].sample_indices,
             cluster=np.asarray(cluster_of_card, dtype=np.int64),
             crossed=np.asarray(crossed_flag, dtype=np.int64))


def load_cards(path) -> tuple[list[CardGeometry], np.ndarray, np.ndarray]:
    with np.load(path) as blob:
        rails = blob["rails"]
        centerline = blob["centerline"]
        sample_indices = blob["sample_indices"]
        cluster = blob["cluster"]
        crossed = blob["crossed"]
    cards = [CardGeometry(rails=rails[i], centerline=centerline[i],
                          sample_indices=sample_indices)
             for i in range(len(rails))]
    return cards, cluster, crossed


def save_reduction(path, assignment: TextureAssignment) -> None:
    reps = " ".join(str(int(r)) for r in assignment.representatives)
    groups = " ".join(str(int(g)) for g in assignment.group_index)
    Path(path).write_text(f"representatives = {reps}\ngroups = {groups}\n")


def load_reduction(path) -> TextureAssignment:
    data = read_manifest(path)
    reps = np.array([int(x) for x in data["representatives"].split()],
                    dtype=np.int64)
    groups = np.array([int(x) for x in data["groups"].split()],
                      dtype=np.int64)
    return TextureAssignment(group_index=groups, representatives=reps)


def _load_model(config: PipelineConfig, paths: PipelinePaths) -> HairModel:
    return load_hair(paths.model_file, n_samples=config.n_samples)


def _load_head(paths: PipelinePaths):
    if paths.head_file.exists():
        return load_head_mesh(paths.head_file)
    return None


def _stage_load(config: PipelineConfig, paths: PipelinePaths) -> None:
    if not config.hair_path:
        raise FileNotFoundError("hair_path is required")
    out = paths.stage_dir("load")
    out.mkdir(parents=True, exist_ok=True)
    model = load_hair(config.hair_path, n_samples=config.n_samples)
    if 0 < config.n_strands < len(model.strands):
        model = downsample_strands(model, config.n_strands, config.seed)
    save_hair_text(paths.model_file, model)
    entries = {"stage": "load", "n_strands": len(model.strands),
               "n_samples": config.n_samples,
               "bounding_radius": float(model.bounds.radius),
               "head": 0}
    if config.head_path:
        head = load_head_mesh(config.head_path)
        save_head_mesh(paths.head_file, head)
        entries["head"] = 1
        entries["head_vertices"] = len(head.vertices)
        entries["head_faces"] = len(head.triangles)
    _write_manifest(paths.manifest("load"), entries)


def _stage_cluster(config: PipelineConfig, paths: PipelinePaths) -> None:
    out = paths.stage_dir("cluster")
    out.mkdir(parents=True, exist_ok=True)
    model = _load_model(config, paths)
    clusters = cluster_strands(model, config.n_cards, seed=config.seed)
    save_assignments(paths.assignments_file, clusters)
    sizes = ",".join(str(len(c.member_indices)) for c in clusters)
    _write_manifest(paths.manifest("cluster"), {
        "stage": "cluster", "n_clusters": len(clusters),
        "inertia": clustering_inertia(model, clusters), "sizes": sizes})


def _min_card_width(config: PipelineConfig, model: HairModel) -> float:
    return default_strand_width(model.bounds.radius,
                                config.optimize_resolution)


def _stage_fit(config: PipelineConfig, paths: PipelinePaths) -> None:
    out = paths.stage_dir("fit")
    out.mkdir(parents=True, exist_ok=True)
    model = _load_model(config, paths)
    clusters = load_assignments(paths.assignments_file, model)
    min_width = _min_card_width(config, model)
    cards, cluster_of_card, crossed_flag, losses = [], [], [], []
    for ci, cl in enumerate(clusters):
        root_normal, loss = orientation_search(model, cl,
                                               min_width=min_width)
        frames = bishop_frames(cl.mean_strand, root_normal)
        widths = card_widths(model, cl, frames)
        card = build_card(cl.mean_strand, frames, widths, config.n_quads,
                          min_width)
        cards.append(card)
        cluster_of_card.append(ci)
        crossed_flag.append(0)
        losses.append(loss)
        if config.crossed:
            cards.append(cross_card(card, cl.mean_strand, frames, widths,
                                    min_width))
            cluster_of_card.append(ci)
            crossed_flag.append(1)
    save_cards(paths.cards_file, cards, cluster_of_card, crossed_flag)
    _write_manifest(paths.manifest("fit"), {
        "stage": "fit", "n_cards": len(cards),
        "crossed": 1 if config.crossed else 0,
        "n_quads": config.n_quads,
        "orientation_loss": ",".join("%.17g" % l for l in losses)})


def _stage_project(config: PipelineConfig, paths: PipelinePaths) -> None:
    out = paths.stage_dir("project")
    out.mkdir(parents=True, exist_ok=True)
    model = _load_model(config, paths)
    clusters = load_assignments(paths.assignments_file, model)
    cards, cluster_of_card, _ = load_cards(paths.cards_file)
    width = default_strand_width(model.bounds.radius,
                                 config.optimize_resolution)
    textures = [project_cluster(model, clusters[cluster_of_card[i]],
                                cards[i], width)
                for i in range(len(cards))]
    save_textures(paths.textures_file, textures)
    _write_manifest(paths.manifest("project"), {
        "stage": "project", "n_textures": len(textures),
        "strands_per_texture": ",".join(str(t.n_strands) for t in textures)})


def _stage_reduce(config: PipelineConfig, paths: PipelinePaths) -> None:
    out = paths.stage_dir("reduce")
    out.mkdir(parents=True, exist_ok=True)
    textures = load_textures(paths.textures_file)
    cards, _, _ = load_cards(paths.cards_file)
    total = len(textures)
    target = min(config.n_textures, total)
    if target == total:
        assignment = TextureAssignment(
            group_index=np.arange(total, dtype=np.int64),
            representatives=np.arange(total, dtype=np.int64))
        identity = 1
    else:
        assignment = reduce_textures(
            textures, target, seed=config.seed + 1,
            shape=(config.slot_height, config.slot_width),
            width_scales=[uv_width_scale(c) for c in cards])
        identity = 0
    save_reduction(paths.reduction_file, assignment)
    _write_manifest(paths.manifest("reduce"), {
        "stage": "reduce", "n_input": total,
        "n_retained": len(assignment.representatives),
        "identity": identity,
        "representatives": " ".join(str(int(r))
                                    for r in assignment.representatives)})


def _stage_optimize(config: PipelineConfig, paths: PipelinePaths) -> None:
    out = paths.stage_dir("optimize")
    out.mkdir(parents=True, exist_ok=True)
    model = _load_model(config, paths)
    cards, cluster_of_card, crossed_flag = load_cards(paths.cards_file)
    textures = load_textures(paths.textures_file)
    assignment = load_reduction(paths.reduction_file)
    retained, per_card = apply_reduction(textures, assignment)
    head = _load_head(paths)
    sdf = MeshSdf(head) if head is not None else None
    opt = OptimConfig(epochs=config.epochs, n_views=config.optimize_views,
                      subset_size=config.view_subset,
                      resolution=config.optimize_resolution,
                      seed=config.seed + 2,
                      texture_lr=config.texture_lr,
                      rail_lr_scale=config.rail_lr_scale,
                      checkpoint_every=config.checkpoint_every,
                      checkpoint_dir=paths.checkpoint_dir,
                      log_path=paths.history_file)
    result = joint_optimize(cards, retained, model, sdf,
                            config.resolve_weights(), opt,
                            assignment=per_card, resume=True)
    save_cards(paths.opt_cards_file, result.cards, cluster_of_card,
               crossed_flag)
    save_textures(paths.opt_textures_file, result.textures)
    _write_manifest(paths.manifest("optimize"), {
        "stage": "optimize", "epochs": config.epochs,
        "initial_loss": result.initial_loss,
        "final_loss": result.final_loss})


def _reconstruct_all(cards, textures, per_card
                     ) -> tuple[np.ndarray, np.ndarray]:
    """Strand polylines of the whole card model, plus per-strand widths."""
    points, widths = [], []
    for i, card in enumerate(cards):
        tex = textures[per_card[i]]
        if tex.n_strands == 0:
            continue
        pts, _ = reconstruct(tex, card)
        points.append(pts)
        widths.append(tex.widths)
    if not points:
        n = 2 if not textures else textures[0].n_samples
        return np.zeros((0, n, 3)), np.zeros(0)
    return np.concatenate(points), np.concatenate(widths)


def _stage_bake(config: PipelineConfig, paths: PipelinePaths) -> None:
    out = paths.stage_dir("bake")
    out.mkdir(parents=True, exist_ok=True)
    cards, _, crossed_flag = load_cards(paths.opt_cards_file)
    textures = load_textures(paths.opt_textures_file)
    assignment = load_reduction(paths.reduction_file)
    bcfg = bakemod.BakeConfig(slot_height=config.slot_height,
                              slot_width=config.slot_width,
                              slot_rows=config.slot_rows,
                              slot_cols=config.slot_cols,
                              ao_rays=config.ao_rays,
                              ao_stride=config.ao_stride,
                              ao_seed=config.seed + 3)
    reps = [cards[int(r)] for r in assignment.representatives]
    atlas = bakemod.bake_atlas(textures, reps, bcfg)
    # the exporter writes its own manifest.txt (the slot table), so it
    # gets a subdirectory; manifest.txt here stays the stage marker
    bakemod.export_cards(cards, assignment, atlas, paths.bake_export_dir,
                         crossed=[int(x) for x in crossed_flag])
    _write_manifest(paths.manifest("bake"), {
        "stage": "bake", "n_slots_used": len(textures),
        "atlas_height": bcfg.atlas_shape[0],
        "atlas_width": bcfg.atlas_shape[1]})


def _stage_cap(config: PipelineConfig, paths: PipelinePaths) -> None:
    out = paths.stage_dir("cap")
    out.mkdir(parents=True, exist_ok=True)
    head = _load_head(paths)
    if not config.cap or head is None:
        _write_manifest(paths.manifest("cap"),
                        {"stage": "cap", "skipped": 1})
        return
    model = _load_model(config, paths)
    radius = model.bounds.radius
    eps_cap = 5e-3 * radius
    eps_root = 2e-2 * radius
    cap = build_cap_mesh(head, model, eps_cap)
    if cap.is_empty:
        _write_manifest(paths.manifest("cap"),
                        {"stage": "cap", "skipped": 0, "empty": 1})
        return
    texture = bake_cap_texture(head, model, cap, eps_root,
                               resolution=config.cap_resolution)
    save_cap(cap, texture, out)
    _write_manifest(paths.manifest("cap"), {
        "stage": "cap", "skipped": 0, "empty": 0,
        "n_faces": len(cap.triangles), "n_vertices": len(cap.vertices),
        "eps_cap": eps_cap, "eps_root": eps_root})


def _stage_eval(config: PipelineConfig, paths: PipelinePaths) -> None:
    out = paths.stage_dir("eval")
    out.mkdir(parents=True, exist_ok=True)
    model = _load_model(config, paths)
    assignment = load_reduction(paths.reduction_file)

    fit_cards, _, _ = load_cards(paths.cards_file)
    initial_tex = load_textures(paths.textures_file)
    retained, per_card = apply_reduction(initial_tex, assignment)
    pts0, w0 = _reconstruct_all(fit_cards, retained, per_card)
    initial = evaluate_strand_sets(pts0, w0, model,
                                   n_views=config.eval_views,
                                   resolution=config.eval_resolution)
    initial.validate()
    paths.report_initial_file.write_text(initial.to_text())

    opt_cards, _, _ = load_cards(paths.opt_cards_file)
    opt_tex = load_textures(paths.opt_textures_file)
    pts1, w1 = _reconstruct_all(opt_cards, opt_tex, per_card)
    final = evaluate_strand_sets(pts1, w1, model,
                                 n_views=config.eval_views,
                                 resolution=config.eval_resolution,
                                 pairs_dir=out / "views")
    final.validate()
    paths.report_file.write_text(final.to_text())
    _write_manifest(paths.manifest("eval"), {
        "stage": "eval", "n_views": config.eval_views,
        "initial_coverage_error": initial.coverage_error,
        "final_coverage_error": final.coverage_error,
        "initial_dice": initial.dice, "final_dice": final.dice,
        "final_psnr": final.psnr})


_STAGE_FUNCS = {
    "load": _stage_load,
    "cluster": _stage_cluster,
    "fit": _stage_fit,
    "project": _stage_project,
    "reduce": _stage_reduce,
    "optimize": _stage_optimize,
    "bake": _stage_bake,
    "cap": _stage_cap,
    "eval": _stage_eval,
}


def run_stage(config: PipelineConfig, paths: PipelinePaths,
              name: str) -> bool:
    """Run one stage; returns False when it was already complete."""
    if paths.manifest(name).exists():
        return False
    for dep in STAGE_DEPS[name]:
        if not paths.manifest(dep).exists():
            raise StageError(name, FileNotFoundError(
                f"artifacts of stage '{dep}' are missing; run it first"))
    try:
        _STAGE_FUNCS[name](config, paths)
    except StageError:
        raise
    except Exception as e:
        raise StageError(name, e) from e
    return True


def run_pipeline(config: PipelineConfig) -> Path:
    """All stages in order, skipping completed ones; returns output dir."""
    paths = PipelinePaths(config.output_dir)
    with pipeline_lock(paths):
        _ensure_config_snapshot(config, paths)
        for name in STAGE_ORDER:
            run_stage(config, paths, name)
    return paths.root


def run_single_stage(config: PipelineConfig, name: str) -> Path:
    if name not in _STAGE_FUNCS:
        raise PipelineConfigError(f"unknown stage {name!r}")
    paths = PipelinePaths(config.output_dir)
    with pipeline_lock(paths):
        _ensure_config_snapshot(config, paths)
        # load has no subcommand of its own; pull it in when required
        if "load" in STAGE_DEPS[name] and not paths.manifest("load").exists():
            run_stage(config, paths, "load")
        run_stage(config, paths, name)
    return paths.root


def _cluster_palette(n: int) -> np.ndarray:
    hues = (0.61803398875 * np.arange(n)) % 1.0
    return np.array([colorsys.hsv_to_rgb(h, 0.85, 0.95) for h in hues])


def preview(config: PipelineConfig, what: str,
            n_views: int | None = None) -> list[Path]:
    """Render stage artifacts for eyeballing; returns written files."""
    paths = PipelinePaths(config.output_dir)
    out = paths.root / "preview" / what
    try:
        if what == "cluster":
            files = _preview_clusters(config, paths, out, n_views)
        elif what == "final":
            files = _preview_final(config, paths, out, n_views)
        else:
            raise ValueError(f"no preview for {what!r}; "
                             "choose 'cluster' or 'final'")
    except StageError:
        raise
    except Exception as e:
        raise StageError("preview", e) from e
    return files


def _preview_clusters(config, paths, out, n_views) -> list[Path]:
    model = _load_model(config, paths)
    clusters = load_assignments(paths.assignments_file, model)
    palette = _cluster_palette(len(clusters))
    colors = np.zeros((len(model.strands), 3))
    for ci, cl in enumerate(clusters):
        colors[cl.member_indices] = palette[ci]
    n = n_views or config.eval_views
    views = sample_views(n, model.bounds,
                         resolution=config.eval_resolution)
    width = default_strand_width(model.bounds.radius,
                                 config.eval_resolution)
    pts = torch.as_tensor(model.samples)
    wid = torch.full((len(model.strands),), width, dtype=torch.float64)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    signal = 2.0 * colors - 1.0
    with torch.no_grad():
        for k, cam in enumerate(views):
            basis = np.stack([cam.right, cam.up, -cam.direction], axis=1)
            # renderer maps attributes into the camera basis; pre-undo it
            # so the drawn values are the palette colors themselves
            attrs = np.einsum("sj,kj->sk", signal, basis)
            attrs = np.repeat(attrs[:, None, :], model.n_samples, axis=1)
            tan, _, _, _ = render_strands_torch(
                pts, torch.as_tensor(attrs), wid, cam)
            img = 0.5 * (tan.numpy() + 1.0)
            path = out / f"view_{k:02d}_clusters.png"
            save_channel_png(img, path)
            files.append(path)
    return files


def _preview_final(config, paths, out, n_views) -> list[Path]:
    model = _load_model(config, paths)
    cards, _, _ = load_cards(paths.opt_cards_file)
    textures = load_textures(paths.opt_textures_file)
    assignment = load_reduction(paths.reduction_file)
    # optimized textures are already the retained set
    per_card = [int(g) for g in assignment.group_index]
    pts, widths = _reconstruct_all(cards, textures, per_card)
    n = n_views or config.eval_views
    views = sample_views(n, model.bounds,
                         resolution=config.eval_resolution)
    ref_width = default_strand_width(model.bounds.radius,
                                     config.eval_resolution)
    cand = render_strand_set(pts, widths, views)
    ref = render_strand_set(model.samples,
                            np.full(len(model.strands), ref_width), views)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for k in range(n):
        for tag, (tan, _) in (("cards", cand[k]), ("strands", ref[k])):
            path = out / f"view_{k:02d}_{tag}.png"
            save_channel_png(0.5 * (tan + 1.0), path)
            files.append(path)
    return files
