"""Per-fold optimization and held-out prediction.

Training minimizes mean cross-entropy with classic momentum SGD over the
head parameters only, for a fixed number of epochs, with online
augmentation of every training sample. There is no validation split and
no early stopping.
"""
from __future__ import annotations

import contextlib
import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .dataset import ClassLabel, DatasetManifest, FoldPlan
from .exceptions import CxrBenchError, FoldError, NumericError, ValidationError
from .models import (
    ArchitectureId,
    FreezePlan,
    ModelBundle,
    apply_sft,
    backbone_checksum,
    build_model,
    forward,
    save_checkpoint,
    set_training_mode,
)
from .transforms import AugmentConfig, PreprocessConfig, as_unit_float, augment, load_image, resize_bilinear, to_model_tensor

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainingConfig:
    optimizer: str = "SGDMomentum"
    learning_rate: float = 0.001
    momentum: float = 0.9
    batch_size: int = 8
    epochs: int = 30
    seed: int = 0
    deterministic: bool = True
    freeze_batchnorm_stats: bool = True

    def __post_init__(self):
        if self.optimizer != "SGDMomentum":
            raise ValidationError(f"unsupported optimizer {self.optimizer!r}")
        if not self.learning_rate > 0:
            raise ValidationError(f"learning_rate must be positive, got {self.learning_rate!r}")
        if not 0 <= self.momentum < 1:
            raise ValidationError(f"momentum must lie in [0, 1), got {self.momentum!r}")
        for name in ("batch_size", "epochs"):
            v = getattr(self, name)
            if isinstance(v, bool) or int(v) != v or v < 1:
                raise ValidationError(f"{name} must be a positive integer, got {v!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpochLog:
    epoch_index: int
    mean_training_loss: float
    wall_time: float


@dataclass
class FoldResult:
    fold_index: int
    test_record_ids: list[str]
    predicted_labels: list[ClassLabel]
    positive_scores: list[float]
    true_labels: list[ClassLabel]
    epoch_logs: list[EpochLog] = field(default_factory=list)
    backbone_checksum_initial: str = ""
    backbone_checksum_final: str = ""

    def __post_init__(self):
        n = len(self.test_record_ids)
        if not (len(self.predicted_labels) == len(self.positive_scores) == len(self.true_labels) == n):
            raise ValidationError("fold result lists differ in length")

    def to_dict(self) -> dict:
        return {
            "fold_index": self.fold_index,
            "test_record_ids": list(self.test_record_ids),
            "predicted_labels": [l.value for l in self.predicted_labels],
            "positive_scores": [float(s) for s in self.positive_scores],
            "true_labels": [l.value for l in self.true_labels],
            "epoch_logs": [asdict(e) for e in self.epoch_logs],
            "backbone_checksum_initial": self.backbone_checksum_initial,
            "backbone_checksum_final": self.backbone_checksum_final,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FoldResult":
        return cls(
            fold_index=int(d["fold_index"]),
            test_record_ids=list(d["test_record_ids"]),
            predicted_labels=[ClassLabel(v) for v in d["predicted_labels"]],
            positive_scores=[float(v) for v in d["positive_scores"]],
            true_labels=[ClassLabel(v) for v in d["true_labels"]],
            epoch_logs=[EpochLog(**e) for e in d.get("epoch_logs", [])],
            backbone_checksum_initial=d.get("backbone_checksum_initial", ""),
            backbone_checksum_final=d.get("backbone_checksum_final", ""),
        )


def save_fold_results(results: Sequence[FoldResult], path: str | Path, **extra) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = dict(extra, folds=[r.to_dict() for r in results])
    path.write_text(json.dumps(doc, indent=2) + "\n")
    return path


def load_fold_results(path: str | Path) -> list[FoldResult]:
    doc = json.loads(Path(path).read_text())
    return [FoldResult.from_dict(d) for d in doc["folds"]]


def append_training_log(path: str | Path, architecture: str, fold_index: int, logs: Sequence[EpochLog]) -> Path:
    path = Path(path)
    new = not path.exists()
    with path.open("a", newline="") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(["architecture", "fold", "epoch", "mean_training_loss", "wall_time_s"])
        for e in logs:
            writer.writerow([architecture, fold_index, e.epoch_index, f"{e.mean_training_loss:.8f}", f"{e.wall_time:.3f}"])
    return path


def label_indices(labels) -> torch.Tensor:
    return torch.tensor([ClassLabel.coerce(l).index for l in labels], dtype=torch.long)


def cross_entropy_loss(logits, true_labels) -> torch.Tensor:
    """Mean negative log-softmax probability of the true class.

    Returns a 0-d tensor that stays attached to the autograd graph; use
    ``float(...)`` for the scalar value. Labels may be ClassLabel values,
    their strings, or column indices.
    """
    logits = torch.as_tensor(logits)
    if logits.ndim != 2 or logits.shape[0] < 1:
        raise ValidationError(f"logits must be B x C with B >= 1, got shape {tuple(logits.shape)}")
    if not torch.isfinite(logits).all():
        raise NumericError("non-finite logits passed to cross_entropy_loss")
    idx = true_labels if isinstance(true_labels, torch.Tensor) else label_indices(true_labels)
    idx = idx.to(device=logits.device, dtype=torch.long)
    if idx.shape != (logits.shape[0],):
        raise ValidationError("one label per logit row is required")
    picked = logits.gather(1, idx[:, None]).squeeze(1)
    return (torch.logsumexp(logits, dim=1) - picked).mean()


@torch.no_grad()
def sgd_momentum_step(params, grads, velocity, lr: float, momentum: float):
    """One classic momentum update, in place: ``v = m*v + g``; ``p = p - lr*v``.

    ``velocity`` may be None on the first step (treated as zeros). Returns
    ``(params, velocity)``.
    """
    params, grads = list(params), list(grads)
    if velocity is None:
        velocity = [torch.zeros_like(p) for p in params]
    velocity = list(velocity)
    if not (len(params) == len(grads) == len(velocity)):
        raise ValidationError("params, grads and velocity must have equal length")
    for p, g, v in zip(params, grads, velocity):
        if p.shape != g.shape or p.shape != v.shape:
            raise ValidationError(f"shape mismatch: param {tuple(p.shape)}, grad {tuple(g.shape)}, velocity {tuple(v.shape)}")
        v.mul_(momentum).add_(g)
        p.sub_(v, alpha=lr)
    return params, velocity


class MomentumSGD:
    """Minimal optimizer over an explicit list of trainable tensors."""

    def __init__(self, params, lr: float, momentum: float):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.velocity = [torch.zeros_like(p) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else torch.zeros_like(p) for p in self.params]
        sgd_momentum_step(self.params, grads, self.velocity, self.lr, self.momentum)


@contextlib.contextmanager
def deterministic_mode(enabled: bool = True):
    previous = torch.are_deterministic_algorithms_enabled()
    torch.use_deterministic_algorithms(enabled)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(previous)


def prepare_image(image: np.ndarray, preprocess: PreprocessConfig) -> np.ndarray:
    """Unit-range float image resized to the model's square input."""
    return resize_bilinear(as_unit_float(image), preprocess.target_size)


def train_fold(
    model: ModelBundle,
    plan: FreezePlan,
    images: Sequence[np.ndarray],
    labels: Sequence,
    preprocess: PreprocessConfig = PreprocessConfig(),
    augment_config: AugmentConfig = AugmentConfig(),
    config: TrainingConfig = TrainingConfig(),
    on_epoch: Callable[[EpochLog], None] | None = None,
) -> tuple[ModelBundle, list[EpochLog]]:
    """Train the head of ``model`` for ``config.epochs`` epochs.

    Each epoch visits the training images in a fresh seeded order, in
    batches of ``config.batch_size`` (the final batch keeps the leftover
    samples), augmenting every sample on the fly.
    """
    if len(images) == 0:
        raise ValidationError("training set is empty")
    if len(images) != len(labels):
        raise ValidationError("images and labels differ in length")
    if set(plan.trainable) != set(model.parameter_map):
        raise ValidationError("freeze plan does not match the model's parameters")

    prepared = [prepare_image(im, preprocess) for im in images]
    targets = label_indices(labels)
    params = model.parameter_map
    trainable = [params[n] for n in plan.trainable_names]
    optimizer = MomentumSGD(trainable, config.learning_rate, config.momentum)
    rng = np.random.default_rng(config.seed)
    logs: list[EpochLog] = []

    with torch.random.fork_rng(devices=[]), deterministic_mode(config.deterministic):
        torch.manual_seed(config.seed)
        set_training_mode(model, config.freeze_batchnorm_stats)
        for epoch in range(config.epochs):
            start = time.perf_counter()
            order = rng.permutation(len(prepared))
            total, seen = 0.0, 0
            for b, lo in enumerate(range(0, len(order), config.batch_size)):
                idx = order[lo:lo + config.batch_size]
                batch = torch.from_numpy(np.stack([
                    to_model_tensor(augment(prepared[i], augment_config, rng), preprocess) for i in idx
                ]))
                optimizer.zero_grad()
                loss = cross_entropy_loss(forward(model, batch), targets[idx])
                if not torch.isfinite(loss):
                    raise NumericError(f"non-finite training loss at epoch {epoch}, batch {b}")
                loss.backward()
                optimizer.step()
                total += loss.item() * len(idx)
                seen += len(idx)
            log = EpochLog(epoch, total / seen, time.perf_counter() - start)
            logger.debug("epoch %d mean loss %.6f", epoch, log.mean_training_loss)
            logs.append(log)
            if on_epoch is not None:
                on_epoch(log)
    model.module.eval()
    return model, logs


def decide(logits: torch.Tensor) -> list[ClassLabel]:
    """Argmax over the two logit columns; ties go to NegativePneumonia."""
    return [ClassLabel.POSITIVE if row[0] > row[1] else ClassLabel.NEGATIVE for row in logits.tolist()]


@torch.no_grad()
def predict_logits(model: ModelBundle, images: Sequence[np.ndarray],
                   preprocess: PreprocessConfig = PreprocessConfig(), batch_size: int = 8) -> torch.Tensor:
    model.module.eval()
    chunks = []
    for lo in range(0, len(images), batch_size):
        batch = torch.from_numpy(np.stack([to_model_tensor(im, preprocess) for im in images[lo:lo + batch_size]]))
        chunks.append(forward(model, batch))
    return torch.cat(chunks) if chunks else torch.empty((0, model.num_classes))


def predict(model: ModelBundle, images: Sequence[np.ndarray],
            preprocess: PreprocessConfig = PreprocessConfig(), batch_size: int = 8) -> tuple[list[ClassLabel], list[float]]:
    """Evaluation-mode labels and softmax PositiveCOVID probabilities."""
    logits = predict_logits(model, images, preprocess, batch_size)
    if not torch.isfinite(logits).all():
        raise NumericError("model produced non-finite logits")
    scores = torch.softmax(logits.double(), dim=1)[:, 0].tolist()
    return decide(logits), scores


def load_manifest_images(manifest: DatasetManifest, preprocess: PreprocessConfig, ids=None) -> dict[str, np.ndarray]:
    """Decode and resize manifest images; an undecodable file aborts the run."""
    records = manifest.by_id()
    out = {}
    for rid in ids if ids is not None else manifest.ids:
        path = manifest.resolve(records[rid])
        try:
            out[rid] = prepare_image(load_image(path), preprocess)
        except (OSError, ValueError) as exc:
            raise CxrBenchError(f"cannot decode image for record {rid} ({path}): {exc}") from exc
    return out


def run_fold(
    fold_index: int,
    manifest: DatasetManifest,
    foldplan: FoldPlan,
    arch: ArchitectureId | str,
    images: dict[str, np.ndarray],
    preprocess: PreprocessConfig,
    augment_config: AugmentConfig,
    config: TrainingConfig,
    pretrained: bool = True,
    weights_path: str | Path | None = None,
    checkpoint_path: str | Path | None = None,
    config_hash: str = "",
    checkpoint_head_only: bool = False,
) -> FoldResult:
    """Fresh model, trained on every fold but ``fold_index``, tested on it."""
    fold_config = TrainingConfig(**{**config.to_dict(), "seed": config.seed + fold_index})
    labels = dict(zip(manifest.ids, manifest.labels))
    train_ids = foldplan.train_ids(fold_index)
    test_ids = foldplan.test_ids(fold_index)
    try:
        model = build_model(arch, 2, pretrained=pretrained, seed=fold_config.seed, weights_path=weights_path)
        plan = apply_sft(model)
        before = backbone_checksum(model)
        model, logs = train_fold(model, plan, [images[i] for i in train_ids], [labels[i] for i in train_ids],
                                 preprocess, augment_config, fold_config)
        with deterministic_mode(config.deterministic):
            predicted, scores = predict(model, [images[i] for i in test_ids], preprocess, config.batch_size)
        after = backbone_checksum(model)
        if checkpoint_path is not None:
            save_checkpoint(model, checkpoint_path, config_hash, head_only=checkpoint_head_only)
    except CxrBenchError as exc:
        raise FoldError(fold_index, str(exc)) from exc
    except RuntimeError as exc:
        raise FoldError(fold_index, f"{type(exc).__name__}: {exc}") from exc
    return FoldResult(fold_index, test_ids, predicted, scores, [labels[i] for i in test_ids], logs, before, after)


def run_cross_validation(
    manifest: DatasetManifest,
    foldplan: FoldPlan,
    arch: ArchitectureId | str,
    preprocess: PreprocessConfig = PreprocessConfig(),
    augment_config: AugmentConfig = AugmentConfig(),
    config: TrainingConfig = TrainingConfig(),
    pretrained: bool = True,
    weights_path: str | Path | None = None,
    checkpoint_dir: str | Path | None = None,
    checkpoint_head_only: bool = False,
    jobs: int = 1,
    images: dict[str, np.ndarray] | None = None,
    config_hash: str = "",
) -> list[FoldResult]:
    """k-fold train/test loop; fold ``i`` trains with seed ``config.seed + i``."""
    if set(foldplan.assignment) != set(manifest.ids):
        raise ValidationError("fold plan does not cover exactly the manifest's records")
    if images is None:
        images = load_manifest_images(manifest, preprocess)
    arch = ArchitectureId.coerce(arch)

    def ckpt(i):
        return None if checkpoint_dir is None else Path(checkpoint_dir) / f"fold_{i:02d}.pt"

    args = [(i, manifest, foldplan, arch, images, preprocess, augment_config, config,
             pretrained, weights_path, ckpt(i), config_hash, checkpoint_head_only) for i in range(foldplan.k)]
    if jobs == 1:
        results = [run_fold(*a) for a in args]
    else:
        from joblib import Parallel, delayed

        results = Parallel(n_jobs=jobs)(delayed(run_fold)(*a) for a in args)
    results.sort(key=lambda r: r.fold_index)
    covered = [rid for r in results for rid in r.test_record_ids]
    if sorted(covered) != sorted(manifest.ids):
        raise ValidationError("cross-validation did not predict every record exactly once")
    return results
