"""Feature-level zero-shot detection at desk scale.

A three-unit conditional WGAN-GP synthesizes visual features for unseen
classes from semantic embeddings; a classifier head trained on those
features is evaluated with detection metrics over a seeded synthetic
feature domain.
"""

from zsdgen.autodiff import AdamState, Tape, adam_step
from zsdgen.detection_eval import (
    BoxRect,
    EvaluationError,
    MetricsReport,
    evaluate_pipeline,
    iou,
    mean_average_precision,
    recall_at_k,
)
from zsdgen.domain import (
    Dataset,
    DomainConfig,
    DomainError,
    EvalSet,
    World,
    build_eval_set,
    build_training_set,
    corrupt_to_iou,
    make_world,
    merge_eval_sets,
)
from zsdgen.experiment import (
    ExperimentConfig,
    ExperimentError,
    RunFailure,
    RunManifest,
    build_report,
    load_config,
    run_ablation,
    run_full,
    run_gzsd,
    write_report,
)
from zsdgen.heads import (
    HeadError,
    LinearHead,
    NearestEmbeddingHead,
    pretrain_seen_head,
    train_linear_head,
)
from zsdgen.synthesizer import (
    FeatureSynthesizer,
    LossRecord,
    SynthesisError,
    TrainConfig,
    load_model,
    save_model,
    synthesize,
    train_synthesizer,
)
from zsdgen.transfer import (
    ABLATION_VARIANTS,
    GzsdHead,
    TransferConfig,
    TransferError,
    build_gzsd_head,
    build_variant_head,
    train_transfer_head,
)

__all__ = [
    "ABLATION_VARIANTS",
    "AdamState",
    "BoxRect",
    "Dataset",
    "DomainConfig",
    "DomainError",
    "EvalSet",
    "EvaluationError",
    "ExperimentConfig",
    "ExperimentError",
    "FeatureSynthesizer",
    "GzsdHead",
    "HeadError",
    "LinearHead",
    "LossRecord",
    "MetricsReport",
    "NearestEmbeddingHead",
    "RunFailure",
    "RunManifest",
    "SynthesisError",
    "Tape",
    "TrainConfig",
    "TransferConfig",
    "TransferError",
    "World",
    "adam_step",
    "build_eval_set",
    "build_gzsd_head",
    "build_report",
    "build_training_set",
    "build_variant_head",
    "corrupt_to_iou",
    "evaluate_pipeline",
    "iou",
    "load_config",
    "load_model",
    "make_world",
    "mean_average_precision",
    "merge_eval_sets",
    "pretrain_seen_head",
    "recall_at_k",
    "run_ablation",
    "run_full",
    "run_gzsd",
    "save_model",
    "synthesize",
    "train_linear_head",
    "train_synthesizer",
    "train_transfer_head",
    "write_report",
]
