"""Gallery-ranking evaluation for disorder-tagged facial embeddings."""

__version__ = "0.1.0"

from .embedio import (  # noqa: E402
    EmbeddingRecord,
    EmbeddingSet,
    TTA_TAGS,
    ValidationReport,
    parse_embedding_file,
    validate_set,
    write_embedding_file,
)
from .distance import (  # noqa: E402
    DistanceMatrix,
    UnitVectorBlock,
    cosine_distance,
    distance_matrix,
    l2_normalize,
)
from .ensemble import (  # noqa: E402
    AggregatedDistances,
    VariantIndex,
    VariantKey,
    aggregate_distances,
    group_variants,
)
from .evaluation import (  # noqa: E402
    DisorderRanking,
    EvaluationReport,
    GalleryEntry,
    collapse_to_disorders,
    evaluate,
    mean_accuracy,
    topk_hit,
)
from .folds import (  # noqa: E402
    FoldAssignment,
    GalleryConfig,
    assign_folds,
    build_gallery,
    run_cv,
)
from .losses import (  # noqa: E402
    ArcFaceParams,
    arcface_loss,
    finite_diff_check,
    wce_loss,
    wce_weights,
)
from .training import (  # noqa: E402
    PlateauScheduler,
    SimModel,
    TrainSimConfig,
    TrainSimData,
    train_sim,
)
from .synth import LongTailSpec, SyntheticDataset, generate_dataset, sample_longtail  # noqa: E402

__all__ = [
    "AggregatedDistances",
    "ArcFaceParams",
    "DisorderRanking",
    "DistanceMatrix",
    "EmbeddingRecord",
    "EmbeddingSet",
    "EvaluationReport",
    "FoldAssignment",
    "GalleryConfig",
    "GalleryEntry",
    "LongTailSpec",
    "PlateauScheduler",
    "SimModel",
    "SyntheticDataset",
    "TTA_TAGS",
    "TrainSimConfig",
    "TrainSimData",
    "UnitVectorBlock",
    "ValidationReport",
    "VariantIndex",
    "VariantKey",
    "aggregate_distances",
    "arcface_loss",
    "assign_folds",
    "build_gallery",
    "collapse_to_disorders",
    "cosine_distance",
    "distance_matrix",
    "evaluate",
    "finite_diff_check",
    "generate_dataset",
    "group_variants",
    "l2_normalize",
    "mean_accuracy",
    "parse_embedding_file",
    "run_cv",
    "sample_longtail",
    "topk_hit",
    "train_sim",
    "validate_set",
    "wce_loss",
    "wce_weights",
    "write_embedding_file",
]
