"""Cross-modal continuous metric learning for emotion-based image-music
matching in valence-arousal space.

The package covers the full desk-scale pipeline: corpus construction
and splitting, similarity-labeled pair generation, joint training of a
shared embedding space with seven objective terms, evaluation against
baselines, ablation over loss toggles, and top-k retrieval.
"""

from .dataset import (
    Corpus,
    Item,
    PairPolicy,
    PairRecord,
    SplitManifest,
    gen_synthetic,
    generate_pairs,
    load_corpus,
    read_pairs,
    split_corpus,
    write_corpus,
    write_pairs,
)
from .evaluator import (
    EvalReport,
    OracleModel,
    baseline_concat,
    baseline_sp,
    evaluate,
    mae,
    match_topk,
    mse,
    run_ablation,
)
from .losses import LossConfig, LossReport
from .nn import (
    ArchConfig,
    ModelParams,
    Network,
    OptimizerState,
    build_model,
    load_checkpoint,
    lr_at,
    save_checkpoint,
)
from .trainer import SplitData, TrainConfig, TrainHistory, train
from .va import (
    SimilarityScale,
    VAPoint,
    compute_sigma,
    normalize_va,
    similarity,
    va_distance,
)

__version__ = "0.1.0"
