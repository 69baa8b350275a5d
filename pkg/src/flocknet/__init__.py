"""flocknet: a small from-scratch CNN toolkit.

Five convolutional block families, an Adam training loop with plateau
scheduling and early stopping, classification metrics with ROC/AUC, a
trainable weighted-average ensemble, and a binary record data pipeline.
Everything numerical is implemented on plain numpy arrays.
"""

from .blocks import (
    KINDS,
    BlockSpec,
    ModelGraph,
    build_toy_model,
    load_checkpoint,
    make_block,
    model_checksum,
    save_checkpoint,
)
from .data import (
    CorruptRecordError,
    LabeledImage,
    RecordDataset,
    SplitPlan,
    augment_flip,
    default_split_counts,
    ingest_directory,
    read_records,
    resize_bilinear,
    shuffle_split,
    synth_corpus,
    write_records,
)
from .ensemble import (
    EnsembleModel,
    EnsembleWeights,
    WeightFitConfig,
    ensemble_forward,
    fit_weights,
    load_ensemble,
    read_manifest,
    write_manifest,
)
from .metrics import (
    ConfusionMatrix,
    MetricsReport,
    RocCurve,
    accuracy,
    confusion,
    evaluate,
    f1,
    precision,
    recall,
    roc_auc,
)
from .optim import (
    EarlyStopState,
    PlateauSchedule,
    TrainConfig,
    TrainingDivergedError,
    evaluate_loss,
    train,
)
from .tensor import DTYPE, NonFiniteError, Parameter, Tensor, no_grad

__version__ = "0.1.0"

__all__ = [
    "BlockSpec",
    "ConfusionMatrix",
    "CorruptRecordError",
    "DTYPE",
    "EarlyStopState",
    "EnsembleModel",
    "EnsembleWeights",
    "KINDS",
    "LabeledImage",
    "MetricsReport",
    "ModelGraph",
    "NonFiniteError",
    "Parameter",
    "PlateauSchedule",
    "RecordDataset",
    "RocCurve",
    "SplitPlan",
    "Tensor",
    "TrainConfig",
    "TrainingDivergedError",
    "WeightFitConfig",
    "accuracy",
    "augment_flip",
    "build_toy_model",
    "confusion",
    "default_split_counts",
    "ensemble_forward",
    "evaluate",
    "evaluate_loss",
    "f1",
    "fit_weights",
    "ingest_directory",
    "load_checkpoint",
    "load_ensemble",
    "make_block",
    "model_checksum",
    "no_grad",
    "precision",
    "read_manifest",
    "read_records",
    "recall",
    "resize_bilinear",
    "roc_auc",
    "save_checkpoint",
    "shuffle_split",
    "synth_corpus",
    "train",
    "write_manifest",
    "write_records",
    "__version__",
]
