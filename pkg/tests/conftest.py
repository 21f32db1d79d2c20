import numpy as np
import pytest
import torch

from semaxes import ProtoConceptNet, TrainConfig, synthetic_dataset, train
from semaxes.losses import orthogonality_loss

# desk-scale hyperparameters shared by the training-dependent tests
TOY_TRAIN = dict(
    vectors_per_class=8,
    warmup_epochs=2,
    joint_epochs=10,
    fc_epochs=10,
    learning_rate=3e-3,
    fc_learning_rate=1e-2,
    batch_size=32,
    cycles=1,
    seed=0,
)


def random_instance(rng, n=3, num_classes=2, per_class=2, dim=4, side=3):
    """Random small (fmaps, labels, bank) triple in float64."""
    fmaps = torch.tensor(rng.uniform(-1, 1, size=(n, dim, side, side)))
    labels = torch.tensor(rng.integers(0, num_classes, size=n))
    bank = torch.tensor(rng.normal(size=(num_classes, per_class, dim)))
    return fmaps, labels, bank


@pytest.fixture(scope="session")
def tiny_model():
    torch.manual_seed(7)
    return ProtoConceptNet(
        2, per_class=2, feature_channels=16, backbone="small", backbone_channels=16
    )


@pytest.fixture(scope="session")
def tiny_dataset():
    return synthetic_dataset(2, 8, seed=3)


@pytest.fixture(scope="session")
def trained_tiny():
    """Small trained pipeline shared by analysis tests: fast, deterministic."""
    torch.manual_seed(11)
    dataset = synthetic_dataset(2, 24, seed=5)
    cfg = TrainConfig(
        vectors_per_class=3,
        warmup_epochs=1,
        joint_epochs=3,
        fc_epochs=3,
        learning_rate=3e-3,
        fc_learning_rate=1e-2,
        batch_size=16,
        cycles=1,
        seed=11,
    )
    model = ProtoConceptNet(
        2, per_class=3, feature_channels=16, backbone="small", backbone_channels=16
    )
    model, log = train(model, dataset, cfg)
    return model, log, dataset, cfg


@pytest.fixture(scope="session")
def toy_run():
    """The desk-scale run the acceptance criteria measure."""
    torch.manual_seed(TOY_TRAIN["seed"])
    dataset = synthetic_dataset(2, 100, seed=42)
    cfg = TrainConfig(**TOY_TRAIN)
    model = ProtoConceptNet(
        2,
        per_class=cfg.vectors_per_class,
        feature_channels=32,
        backbone="small",
        backbone_channels=32,
    )
    with torch.no_grad():
        init_orth = float(orthogonality_loss(model.basis)) / model.num_classes
    model, log = train(model, dataset, cfg)
    return {
        "model": model,
        "log": log,
        "dataset": dataset,
        "cfg": cfg,
        "init_mean_orth": init_orth,
    }
