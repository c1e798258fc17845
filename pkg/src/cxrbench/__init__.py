"""Cross-validated benchmark of shallow fine-tuned CNNs for COVID-19 chest X-ray classification."""

from .dataset import (
    ClassLabel,
    DatasetManifest,
    FoldPlan,
    ImageRecord,
    SeededStratifiedKFold,
    Source,
    build_manifest,
    generate_synthetic,
    ingest_cohen,
    ingest_kaggle_pneumonia,
    stratified_kfold,
)
from .estimator import CNNClassifier
from .metrics import (
    AggregateReport,
    ConfusionMatrix,
    MetricReport,
    accuracy,
    aggregate_folds,
    auc,
    confusion_matrix,
    consolidate_confusions,
    f1_score,
    precision,
    recall,
    roc_curve,
)
from .models import ArchitectureId, FreezePlan, ModelBundle, apply_sft, build_model, forward
from .training import (
    FoldResult,
    TrainingConfig,
    cross_entropy_loss,
    predict,
    run_cross_validation,
    sgd_momentum_step,
    train_fold,
)
from .transforms import AugmentConfig, PreprocessConfig, augment, resize_bilinear, to_model_tensor

__version__ = "0.1.0"
