"""Time-series interpretability workbench.

Train 1D sequence classifiers and convolutional auto-encoders, fine-tune
the auto-encoder so its output becomes a feature attribution, and benchmark
that attribution against other techniques with the suppression test and
Jacobian spectrum analysis.
"""

from .engine import EngineError, GradCheckReport, Tape, grad_check
from .models import (
    AutoEncoderSpec,
    CheckpointError,
    ClassifierSpec,
    Model,
    ModelBundle,
    SpecError,
    build_model,
    load_checkpoint,
    save_checkpoint,
    stacked_forward,
)
from .training import (
    ConfigError,
    FitReport,
    TrainConfig,
    TrainingDiverged,
    TSInsightConfig,
    auto_hyperparams,
    finetune_palacio,
    finetune_tsinsight,
    train_autoencoder,
    train_classifier,
)
from .attribution import (
    AttributionError,
    AttributionMap,
    METHODS,
    MethodConfig,
    compute_attribution,
)
from .evaluation import (
    EvaluationError,
    SpectrumReport,
    SuppressionCurve,
    average_jacobian,
    singular_spectrum,
    suppress_input,
    suppression_test,
)
from .data import (
    DataBundle,
    DataError,
    Dataset,
    SynthConfig,
    batch_iter,
    generate_synthetic_anomaly,
    load_csv_dataset,
    normalize,
    normalize_bundle,
    save_csv_dataset,
)

__version__ = "0.1.0"

__all__ = [
    "AttributionError",
    "AttributionMap",
    "AutoEncoderSpec",
    "CheckpointError",
    "ClassifierSpec",
    "ConfigError",
    "DataBundle",
    "DataError",
    "Dataset",
    "EngineError",
    "EvaluationError",
    "FitReport",
    "GradCheckReport",
    "METHODS",
    "MethodConfig",
    "Model",
    "ModelBundle",
    "SpecError",
    "SpectrumReport",
    "SuppressionCurve",
    "SynthConfig",
    "Tape",
    "TrainConfig",
    "TrainingDiverged",
    "TSInsightConfig",
    "auto_hyperparams",
    "average_jacobian",
    "batch_iter",
    "build_model",
    "compute_attribution",
    "finetune_palacio",
    "finetune_tsinsight",
    "generate_synthetic_anomaly",
    "grad_check",
    "load_checkpoint",
    "load_csv_dataset",
    "normalize",
    "normalize_bundle",
    "save_checkpoint",
    "save_csv_dataset",
    "singular_spectrum",
    "stacked_forward",
    "suppress_input",
    "suppression_test",
    "train_autoencoder",
    "train_classifier",
]
