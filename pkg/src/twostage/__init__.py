"""Two-stage cross-modal retrieval at desk scale.

Stage 1 scores the whole gallery with a single text-agnostic vector per
image and keeps the top-K candidates; stage 2 rescores only those
candidates with a parameter-free token-level interaction guided by the
query text. A paired training objective, a synthetic-data trainer, and
an evaluation/benchmark harness round out the package.
"""

from .errors import (
    BadMagicError,
    CountMismatchError,
    FileFormatError,
    MeasurementError,
    ParameterError,
    ShapeError,
    TrainingError,
    TruncatedFileError,
    UnsupportedVersionError,
    ValidationError,
)
from .gallery import (
    Gallery,
    GalleryEntry,
    ImageTextEncoder,
    QueryText,
    aggregate_recall_embedding,
    build_gallery,
    load_gallery,
    load_queries,
    save_gallery,
    save_queries,
)
from .interaction import (
    GuidedEmbeddings,
    RankedResult,
    RerankConfig,
    dual_normalize,
    guided_embeddings,
    rerank_candidates,
    rerank_score,
    similarity_matrix,
    text_guided_embed,
)
from .loss import (
    AlignmentBatch,
    LossBreakdown,
    LossConfig,
    LossGradients,
    NeighborGraph,
    alignment_loss,
    combined_loss,
    combined_loss_gradients,
    neighbor_graph,
    pairwise_alignment_loss,
    structure_loss,
)
from .bench import (
    BenchReport,
    BenchVariant,
    SweepRow,
    k_sweep,
    measure_bench,
    speedup_display,
)
from .evaluation import (
    AblationRow,
    MetricsReport,
    RetrievalRun,
    ablation_suite,
    compute_metrics,
    encode_eval_split,
    mean_recall,
    random_baseline_mr,
    recall_at_k,
    run_one_stage,
    run_two_stage,
)
from .recall import CandidateSet, recall_scores, recall_topk
from .toy import (
    SyntheticDataset,
    SyntheticSpec,
    ToyEncoder,
    ToyEncoderParams,
    encode_pair,
    generate_synthetic,
    load_dataset,
    load_params,
    save_dataset,
    save_params,
)
from .train import TrainConfig, TrainResult, train
from .variants import ABLATION_VARIANTS, FULL, PipelineVariant

__all__ = [name for name in dir() if not name.startswith("_")]
