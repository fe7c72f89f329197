"""strandcards: convert strand-based hair models into textured hair-card models.

The package is a batch pipeline. Each stage is usable on its own:

- ``hairio``: load/save strand models and head meshes
- ``cluster``: group strands into card-sized clusters
- ``cardgeom``: fit a ribbon card to a cluster
- ``texspace``: project strands into a card's texture space
- ``texreduce``: shrink the texture set by similarity
- ``softrender``: differentiable strand rasterizer
- ``losses``: image and geometry objectives
- ``optimize``: joint card/texture refinement
- ``bake``: texture atlas baking and export
- ``haircap``: scalp cap mesh under the cards
- ``metrics``: held-out view evaluation
- ``pipeline`` / ``cli``: orchestration, resume, and the ``strandcards``
  command

``run_pipeline`` drives everything from a :class:`PipelineConfig`.
"""

from .bake import BakeConfig, TextureAtlas, bake_atlas, export_cards
from .cardgeom import (CardGeometry, FrameField, bishop_frames, build_card,
                       card_widths, orientation_search)
from .cluster import (StrandCluster, cluster_strands, clustering_inertia,
                      strand_distance)
from .haircap import (CapMesh, CapTexture, bake_cap_texture, build_cap_mesh,
                      save_cap)
from .hairio import (HairModel, HeadMesh, Strand, load_hair, load_head_mesh,
                     resample_strand, save_hair_text, save_head_mesh)
from .losses import (LossWeights, MeshSdf, collision_loss, dice_loss,
                     match_loss, total_loss)
from .metrics import (EvalReport, ViewMetrics, evaluate_strand_sets,
                      report_from_views)
from .optimize import (CardScene, OptimConfig, OptimResult, build_scene,
                       joint_optimize, reference_renders)
from .pipeline import (PipelineConfig, PipelineConfigError, PipelineLockError,
                       PipelinePaths, StageError, config_from_sources,
                       run_pipeline, run_single_stage, run_stage)
from .softrender import (ViewCamera, render_strands_torch, sample_views,
                         strand_tangent_attrs)
from .texreduce import (TextureAssignment, apply_reduction,
                        perceptual_distance, reduce_textures)
from .texspace import (CardTexture, closest_points_on_card,
                       default_strand_width, project_cluster, reconstruct)

__version__ = "0.1.0"

__all__ = [
    "BakeConfig", "CapMesh", "CapTexture", "CardGeometry", "CardScene",
    "CardTexture", "EvalReport", "FrameField", "HairModel", "HeadMesh",
    "LossWeights", "MeshSdf", "OptimConfig", "OptimResult",
    "PipelineConfig", "PipelineConfigError", "PipelineLockError",
    "PipelinePaths", "StageError", "Strand", "StrandCluster",
    "TextureAssignment", "TextureAtlas", "ViewCamera", "ViewMetrics",
    "apply_reduction", "bake_atlas", "bake_cap_texture", "bishop_frames",
    "build_cap_mesh", "build_card", "build_scene", "card_widths",
    "closest_points_on_card", "cluster_strands", "clustering_inertia",
    "collision_loss", "config_from_sources", "default_strand_width",
    "dice_loss", "evaluate_strand_sets", "export_cards", "joint_optimize",
    "load_hair", "load_head_mesh", "match_loss", "orientation_search",
    "perceptual_distance", "project_cluster", "reconstruct",
    "reduce_textures", "reference_renders", "render_strands_torch",
    "report_from_views", "resample_strand", "run_pipeline",
    "run_single_stage", "run_stage", "sample_views", "save_cap",
    "save_hair_text", "save_head_mesh", "strand_distance",
    "strand_tangent_attrs", "total_loss",
    "__version__",
]
