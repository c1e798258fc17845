"""scikit-learn facade over the shallow fine-tuning recipe.

``CNNClassifier`` accepts a sequence of images (``H x W`` or ``H x W x C``
arrays, or file paths) and string/``ClassLabel`` targets, so it composes
with ``cross_val_score``, ``clone`` and grid utilities.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .dataset import ClassLabel
from .exceptions import ValidationError
from .models import apply_sft, build_model
from .training import TrainingConfig, deterministic_mode, predict_logits, prepare_image, train_fold
from .transforms import IMAGENET_MEAN, IMAGENET_STD, AugmentConfig, PreprocessConfig, load_image


def _check_images(X) -> list[np.ndarray]:
    items = list(X)
    if not items:
        raise ValidationError("no images supplied")
    return [load_image(x) if isinstance(x, (str, Path)) else np.asarray(x) for x in items]


class CNNClassifier(ClassifierMixin, BaseEstimator):
    """Pretrained CNN with a retrained two-class head.

    Follows scikit-learn's binary conventions: ``classes_`` is sorted
    (``["NegativePneumonia", "PositiveCOVID"]``), ``predict_proba`` columns
    follow it, and ``decision_function`` is positive toward ``classes_[1]``,
    the COVID-positive class.
    """

    def __init__(
        self,
        architecture="SqueezeNet",
        pretrained=True,
        weights_path=None,
        learning_rate=0.001,
        momentum=0.9,
        batch_size=8,
        epochs=30,
        target_size=224,
        channel_mean=IMAGENET_MEAN,
        channel_std=IMAGENET_STD,
        horizontal_flip_probability=0.5,
        vertical_flip_probability=0.5,
        rotation_range_degrees=(-10.0, 10.0),
        freeze_batchnorm_stats=True,
        deterministic=True,
        random_state=0,
    ):
        self.architecture = architecture
        self.pretrained = pretrained
        self.weights_path = weights_path
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.batch_size = batch_size
        self.epochs = epochs
        self.target_size = target_size
        self.channel_mean = channel_mean
        self.channel_std = channel_std
        self.horizontal_flip_probability = horizontal_flip_probability
        self.vertical_flip_probability = vertical_flip_probability
        self.rotation_range_degrees = rotation_range_degrees
        self.freeze_batchnorm_stats = freeze_batchnorm_stats
        self.deterministic = deterministic
        self.random_state = random_state

    def _configs(self):
        preprocess = PreprocessConfig(self.target_size, "bilinear", self.channel_mean, self.channel_std)
        augment = AugmentConfig(self.horizontal_flip_probability, self.vertical_flip_probability,
                                tuple(self.rotation_range_degrees))
        training = TrainingConfig(
            learning_rate=self.learning_rate,
            momentum=self.momentum,
            batch_size=self.batch_size,
            epochs=self.epochs,
            seed=int(self.random_state or 0),
            deterministic=self.deterministic,
            freeze_batchnorm_stats=self.freeze_batchnorm_stats,
        )
        return preprocess, augment, training

    def fit(self, X, y):
        images = _check_images(X)
        labels = [ClassLabel.coerce(v) for v in np.asarray(y, dtype=object).ravel()]
        if len(labels) != len(images):
            raise ValidationError(f"{len(images)} images but {len(labels)} labels")
        preprocess, augment, training = self._configs()
        self.preprocess_ = preprocess
        self.model_ = build_model(self.architecture, 2, self.pretrained, training.seed, self.weights_path)
        self.freeze_plan_ = apply_sft(self.model_)
        _, self.epoch_logs_ = train_fold(self.model_, self.freeze_plan_, images, labels, preprocess, augment, training)
        self.classes_ = np.array([ClassLabel.NEGATIVE.value, ClassLabel.POSITIVE.value], dtype=object)
        return self

    def _logits(self, X):
        check_is_fitted(self, "model_")
        images = [prepare_image(im, self.preprocess_) for im in _check_images(X)]
        with deterministic_mode(self.deterministic):
            return predict_logits(self.model_, images, self.preprocess_, self.batch_size)

    def decision_function(self, X):
        """Logit margin of PositiveCOVID over NegativePneumonia."""
        logits = self._logits(X).double().numpy()
        return logits[:, 0] - logits[:, 1]

    def predict_proba(self, X):
        # model column 0 is PositiveCOVID; reorder to match classes_
        return torch.softmax(self._logits(X).double(), dim=1).numpy()[:, ::-1].copy()

    def predict(self, X):
        margin = self.decision_function(X)
        # ties resolve to NegativePneumonia
        return np.where(margin > 0, ClassLabel.POSITIVE.value, ClassLabel.NEGATIVE.value).astype(object)
