"""Semantic-mask pose verification and re-ranking for visual localization.

The pipeline: render perspective views from geo-tagged panoramic class masks,
score query masks against them (pixel agreement or a self-supervised
contrastive embedding), fuse those scores into an appearance-retrieval
ranking, and measure Recall@N against metric ground truth.
"""

__version__ = "0.1.0"

from .augment import AugmentConfig, make_pair
from .contrastive import (
    Batch,
    TrainConfig,
    embed_mask,
    embed_similarity,
    finetune,
    info_nce_loss,
    load_train_config,
    pair_indices,
    train,
)
from .errors import ConfigError, ManifestError, MaskFormatError, PaletteError
from .evalkit import (
    EvalReport,
    PositionIndex,
    RetrievalTask,
    recall_at_n,
    sweep_crop_ratio,
    sweep_w,
    threshold_curve,
)
from .maskio import (
    ClassPalette,
    Dataset,
    PanoramaRecord,
    QueryRecord,
    SemanticMask,
    ViewRecord,
    load_dataset,
    load_mask,
    load_palette,
    resize_nearest,
    save_dataset,
    save_mask,
)
from .nn import (
    EmbeddingModel,
    LayerDescriptor,
    build_default_model,
    finite_difference_gradient,
    l2_normalize,
    load_model,
    one_hot_encode,
    save_model,
)
from .pixelsim import pixelwise_similarity
from .projection import ViewSpec, generate_database_views, gnomonic_view, neighbors_of
from .rerank import (
    CandidateList,
    RgbScoreTable,
    fuse,
    make_embed_scorer,
    make_pixel_scorer,
    normalize_scores,
    rerank_all,
)
from .synth import SceneSpec, generate_dataset, make_oracle_scorer, synth_rgb_scores

__all__ = [
    "AugmentConfig", "Batch", "CandidateList", "ClassPalette", "ConfigError",
    "Dataset", "EmbeddingModel", "EvalReport", "LayerDescriptor",
    "ManifestError", "MaskFormatError", "PaletteError", "PanoramaRecord",
    "PositionIndex", "QueryRecord", "RetrievalTask", "RgbScoreTable",
    "SceneSpec", "SemanticMask", "TrainConfig", "ViewRecord", "ViewSpec",
    "build_default_model", "embed_mask", "embed_similarity", "finetune",
    "finite_difference_gradient", "fuse", "generate_database_views",
    "generate_dataset", "gnomonic_view", "info_nce_loss", "l2_normalize",
    "load_dataset", "load_mask", "load_model", "load_palette",
    "load_train_config", "make_embed_scorer", "make_oracle_scorer",
    "make_pair", "make_pixel_scorer", "neighbors_of", "normalize_scores",
    "one_hot_encode", "pair_indices", "pixelwise_similarity", "recall_at_n",
    "rerank_all", "resize_nearest", "save_dataset", "save_mask", "save_model",
    "sweep_crop_ratio", "sweep_w", "threshold_curve", "train",
]
