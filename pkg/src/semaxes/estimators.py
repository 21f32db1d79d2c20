"""sklearn-compatible facade over the prototype-concept classifier."""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .data import ArrayDataset, preprocess
from .losses import LossWeights
from .model import IMAGE_SIZE, ProtoConceptNet
from .training import TrainConfig, train


def _as_image_tensor(X) -> torch.Tensor:
    """Accept [n, 3, 224, 224] float tensors or [n, 224, 224, 3] uint8 arrays."""
    if isinstance(X, torch.Tensor) and X.ndim == 4 and X.shape[1] == 3:
        return X.to(torch.float32)
    X = np.asarray(X)
    if X.ndim != 4:
        raise ValueError(f"X must be a 4-D image batch, got {X.ndim}-D")
    if X.shape[1] == 3 and X.shape[2] == IMAGE_SIZE:
        return torch.as_tensor(X, dtype=torch.float32)
    if X.shape[3] == 3 and X.dtype == np.uint8:
        return preprocess(X)
    raise ValueError(
        "X must be [n, 3, 224, 224] preprocessed floats or [n, 224, 224, 3] uint8"
    )


class ProtoConceptClassifier(BaseEstimator, ClassifierMixin):
    """Image classifier with per-class orthogonal concept vectors.

    fit(X, y) runs the full three-stage schedule on in-memory images;
    predict/predict_proba run the cosine-similarity head. Desk-scale
    defaults keep CPU fit times reasonable.
    """

    def __init__(
        self,
        vectors_per_class: int = 8,
        feature_channels: int = 32,
        backbone: str = "small",
        backbone_channels: int = 32,
        warmup_epochs: int = 1,
        joint_epochs: int = 3,
        fc_epochs: int = 5,
        cycles: int = 1,
        learning_rate: float = 1e-4,
        batch_size: int = 32,
        seed: int = 0,
    ):
        self.vectors_per_class = vectors_per_class
        self.feature_channels = feature_channels
        self.backbone = backbone
        self.backbone_channels = backbone_channels
        self.warmup_epochs = warmup_epochs
        self.joint_epochs = joint_epochs
        self.fc_epochs = fc_epochs
        self.cycles = cycles
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.seed = seed

    def fit(self, X, y):
        images = _as_image_tensor(X)
        y = np.asarray(y)
        if y.shape[0] != images.shape[0]:
            raise ValueError("X and y disagree on sample count")
        self.classes_ = np.unique(y)
        if self.classes_.size < 2:
            raise ValueError("need at least two classes")
        index = {label: i for i, label in enumerate(self.classes_)}
        labels = torch.tensor([index[label] for label in y], dtype=torch.long)
        dataset = ArrayDataset(
            images=images,
            labels=labels,
            image_ids=[f"mem/{i:06d}" for i in range(images.shape[0])],
            class_names=[str(c) for c in self.classes_],
        )
        cfg = TrainConfig(
            vectors_per_class=self.vectors_per_class,
            warmup_epochs=self.warmup_epochs,
            joint_epochs=self.joint_epochs,
            fc_epochs=self.fc_epochs,
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            loss_weights=LossWeights(),
            seed=self.seed,
            cycles=self.cycles,
        )
        torch.manual_seed(self.seed)
        model = ProtoConceptNet(
            num_classes=self.classes_.size,
            per_class=self.vectors_per_class,
            feature_channels=self.feature_channels,
            backbone=self.backbone,
            backbone_channels=self.backbone_channels,
            class_names=dataset.class_names,
        )
        self.model_, self.training_log_ = train(model, dataset, cfg)
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        images = _as_image_tensor(X)
        chunks = []
        with torch.no_grad():
            for start in range(0, images.shape[0], self.batch_size):
                chunks.append(self.model_(images[start : start + self.batch_size]).numpy())
        return np.concatenate(chunks)

    def predict(self, X) -> np.ndarray:
        return self.classes_[self.predict_proba(X).argmax(axis=1)]
