"""Three-stage alternating training: warm-up, joint objective, basis
projection, and convex head optimization.

Stage parameter sets are strict: warm-up and the joint stage update the
add-on layers and the basis bank (backbone optionally unfrozen for the
joint stage), projection rewrites only the bank, and the head stage
updates only the clamped classifier weights.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import ArrayDataset
from .losses import (
    LossWeights,
    PerturbationConfig,
    aggregation_loss,
    cross_entropy_loss,
    orthogonality_loss,
    perturb_basis,
    separation_loss,
    subspace_separation_loss,
    total_loss,
)
from .model import ProtoConceptNet, classify, clamp_head_, global_max_pool


@dataclass
class TrainConfig:
    vectors_per_class: int = 100
    warmup_epochs: int = 2
    joint_epochs: int = 10
    fc_epochs: int = 10
    learning_rate: float = 1e-4
    fc_learning_rate: float = 1e-3
    batch_size: int = 32
    loss_weights: LossWeights = field(default_factory=LossWeights)
    perturbation: PerturbationConfig = field(default_factory=PerturbationConfig)
    seed: int = 0
    cycles: int = 5
    convergence_tol: float = 1e-3
    unfreeze_backbone: bool = False

    def __post_init__(self):
        if self.vectors_per_class < 1:
            raise ValueError("vectors_per_class must be >= 1")
        if self.warmup_epochs < 1 or self.joint_epochs < 1:
            raise ValueError("stage epoch counts must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


class TrainingLog:
    """Per-epoch loss records, serializable as JSON lines."""

    def __init__(self):
        self.records: list[dict] = []

    def append(self, **record):
        self.records.append(record)

    def by_stage(self, stage: str) -> list[dict]:
        return [r for r in self.records if r["stage"] == stage]

    def write_jsonl(self, path):
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(json.dumps(r, sort_keys=True) + "\n")

    @staticmethod
    def read_jsonl(path) -> "TrainingLog":
        log = TrainingLog()
        with open(path) as fh:
            for line in fh:
                if line.strip():
                    log.records.append(json.loads(line))
        return log


def _derived_seed(*parts) -> int:
    digest = hashlib.sha256(":".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:4], "little")


def _onehot(labels: torch.Tensor, num_classes: int) -> torch.Tensor:
    return torch.nn.functional.one_hot(labels, num_classes).to(torch.float32)


def _set_trainable(model: ProtoConceptNet, stage: str, cfg: TrainConfig):
    for p in model.parameters():
        p.requires_grad_(False)
    if stage == "warmup":
        for p in model.add_on.parameters():
            p.requires_grad_(True)
        model.basis.requires_grad_(True)
    elif stage == "joint":
        for p in model.add_on.parameters():
            p.requires_grad_(True)
        model.basis.requires_grad_(True)
        if cfg.unfreeze_backbone:
            for p in model.backbone.parameters():
                p.requires_grad_(True)
    elif stage == "fc":
        model.head.requires_grad_(True)
    else:
        raise ValueError(f"unknown stage: {stage}")


def _batch_losses(model, images, labels, cfg: TrainConfig, perturb_seed: int):
    """All five loss terms plus the batch's correct-prediction count."""
    fmaps = model.extract_features(images)
    perturbed = perturb_basis(model.basis, cfg.perturbation, seed=perturb_seed)
    l_agg = aggregation_loss(fmaps, labels, perturbed)
    l_sep = separation_loss(fmaps, labels, perturbed)
    l_orth = orthogonality_loss(model.basis)
    l_ss = subspace_separation_loss(model.basis)
    probs = classify(global_max_pool(model.similarity_maps(fmaps)), model.head)
    ce = cross_entropy_loss(probs, _onehot(labels, model.num_classes))
    with torch.no_grad():
        correct = int((probs.argmax(dim=1) == labels).sum())
    return ce, l_orth, l_ss, l_sep, l_agg, correct


def _run_epochs(model, dataset, cfg, stage, epochs, optimizer, log, cycle=0):
    n = len(dataset)
    for epoch in range(epochs):
        order = np.random.default_rng(
            _derived_seed(cfg.seed, stage, cycle, epoch, "shuffle")
        ).permutation(n)
        sums = {"ce": 0.0, "l_orth": 0.0, "l_ss": 0.0, "l_sep": 0.0, "l_agg": 0.0, "total": 0.0}
        correct_total = 0
        for batch_idx, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start : start + cfg.batch_size].tolist()
            images, labels = dataset.images[idx], dataset.labels[idx]
            ce, l_orth, l_ss, l_sep, l_agg, correct = _batch_losses(
                model, images, labels, cfg,
                _derived_seed(cfg.seed, stage, cycle, epoch, batch_idx, "perturb"),
            )
            total = total_loss(ce, l_orth, l_ss, l_sep, l_agg, cfg.loss_weights)
            if not torch.isfinite(total):
                raise RuntimeError(
                    f"{stage} stage diverged at epoch {epoch}, batch {batch_idx}: "
                    f"ce={ce.detach():.4g} l_orth={l_orth.detach():.4g} "
                    f"l_ss={l_ss.detach():.4g} l_sep={l_sep.detach():.4g} "
                    f"l_agg={l_agg.detach():.4g}"
                )
            optimizer.zero_grad()
            total.backward()
            optimizer.step()
            bs = len(idx)
            for key, value in zip(sums, (ce, l_orth, l_ss, l_sep, l_agg, total)):
                sums[key] += float(value.detach()) * bs
            correct_total += correct
        log.append(
            stage=stage,
            cycle=cycle,
            epoch=epoch,
            **{k: v / n for k, v in sums.items()},
            accuracy=correct_total / n,
        )
    return model


def warmup_stage(model, dataset: ArrayDataset, cfg: TrainConfig, log: TrainingLog | None = None):
    """Adam on add-on layers + basis bank for warmup_epochs; backbone frozen."""
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    log = log if log is not None else TrainingLog()
    _set_trainable(model, "warmup", cfg)
    optimizer = torch.optim.Adam(
        list(model.add_on.parameters()) + [model.basis], lr=cfg.learning_rate
    )
    return _run_epochs(model, dataset, cfg, "warmup", cfg.warmup_epochs, optimizer, log)


def joint_stage(model, dataset, cfg: TrainConfig, log: TrainingLog | None = None, cycle: int = 0):
    """Full objective for joint_epochs; aborts on non-finite loss."""
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    log = log if log is not None else TrainingLog()
    _set_trainable(model, "joint", cfg)
    params = list(model.add_on.parameters()) + [model.basis]
    if cfg.unfreeze_backbone:
        params += list(model.backbone.parameters())
    optimizer = torch.optim.Adam(params, lr=cfg.learning_rate)
    return _run_epochs(model, dataset, cfg, "joint", cfg.joint_epochs, optimizer, log, cycle)


def extract_all_features(model, dataset, batch_size: int = 32) -> torch.Tensor:
    """[N, D, H, W] feature maps for the whole dataset, no gradients."""
    chunks = []
    with torch.no_grad():
        for start in range(0, len(dataset), batch_size):
            chunks.append(model.extract_features(dataset.images[start : start + batch_size]))
    return torch.cat(chunks)


def project_basis_vectors(model: ProtoConceptNet, dataset: ArrayDataset, batch_size: int = 32):
    """Snap every basis vector to its best-matching same-class patch feature.

    The winning patch maximizes cosine similarity with the vector (the
    scale-invariant "nearest block", which also makes repeated
    projection idempotent: a vector that already equals a patch is its
    own best match). Ties break toward the lexicographically smallest
    (image id, row, col). Provenance is recorded per flat vector index.
    """
    fmaps = extract_all_features(model, dataset, batch_size)
    h, w = fmaps.shape[2], fmaps.shape[3]
    provenance: list[dict | None] = [None] * (model.num_classes * model.per_class)
    with torch.no_grad():
        for c in range(model.num_classes):
            class_idx = dataset.indices_of_class(c)
            if not class_idx:
                raise ValueError(f"class {c} ({model.class_names[c]}) has no images")
            class_idx = sorted(class_idx, key=lambda i: dataset.image_ids[i])
            # patches ordered by (image id, row, col) so argmax's first-hit
            # rule implements the lexicographic tie-break
            patches = (
                fmaps[class_idx].permute(0, 2, 3, 1).reshape(-1, fmaps.shape[1])
            )
            unit_patches = torch.nn.functional.normalize(patches, dim=1)
            unit_basis = torch.nn.functional.normalize(model.basis[c], dim=1)
            dots = unit_patches @ unit_basis.T  # [P, M] cosines
            best = dots.argmax(dim=0)
            for m in range(model.per_class):
                flat = int(best[m])
                img_pos, rem = divmod(flat, h * w)
                row, col = divmod(rem, w)
                model.basis[c, m] = patches[flat]
                provenance[c * model.per_class + m] = {
                    "image_id": dataset.image_ids[class_idx[img_pos]],
                    "row": int(row),
                    "col": int(col),
                }
    model.projection_provenance = provenance
    return model


def fc_convex_stage(model, dataset, cfg: TrainConfig, log: TrainingLog | None = None, cycle: int = 0):
    """Optimize only the clamped head on frozen pooled similarity scores."""
    log = log if log is not None else TrainingLog()
    _set_trainable(model, "fc", cfg)
    fmaps = extract_all_features(model, dataset, cfg.batch_size)
    with torch.no_grad():
        scores = global_max_pool(model.similarity_maps(fmaps))
        perturbed = perturb_basis(
            model.basis, cfg.perturbation, seed=_derived_seed(cfg.seed, "fc", cycle, "perturb")
        )
        frozen = {
            "l_agg": float(aggregation_loss(fmaps, dataset.labels, perturbed)),
            "l_sep": float(separation_loss(fmaps, dataset.labels, perturbed)),
            "l_orth": float(orthogonality_loss(model.basis)),
            "l_ss": float(subspace_separation_loss(model.basis)),
        }
    onehot = _onehot(dataset.labels, model.num_classes)
    optimizer = torch.optim.Adam([model.head], lr=cfg.fc_learning_rate)
    n = len(dataset)
    for epoch in range(cfg.fc_epochs):
        order = np.random.default_rng(
            _derived_seed(cfg.seed, "fc", cycle, epoch, "shuffle")
        ).permutation(n)
        ce_sum, correct = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size].tolist()
            probs = classify(scores[idx], model.head)
            ce = cross_entropy_loss(probs, onehot[idx])
            optimizer.zero_grad()
            ce.backward()
            optimizer.step()
            clamp_head_(model.head)
            ce_sum += float(ce.detach()) * len(idx)
            with torch.no_grad():
                correct += int((probs.argmax(dim=1) == dataset.labels[idx]).sum())
        ce_epoch = ce_sum / n
        log.append(
            stage="fc",
            cycle=cycle,
            epoch=epoch,
            ce=ce_epoch,
            **frozen,
            total=float(
                total_loss(
                    torch.tensor(ce_epoch),
                    torch.tensor(frozen["l_orth"]),
                    torch.tensor(frozen["l_ss"]),
                    torch.tensor(frozen["l_sep"]),
                    torch.tensor(frozen["l_agg"]),
                    cfg.loss_weights,
                )
            ),
            accuracy=correct / n,
        )
    return model


def train(model: ProtoConceptNet, dataset: ArrayDataset, cfg: TrainConfig):
    """Warm-up once, then alternate joint / projection / head stages.

    Stops after cfg.cycles cycles or once the relative total-loss
    improvement across a cycle drops below cfg.convergence_tol.
    Returns (model, TrainingLog).
    """
    torch.manual_seed(cfg.seed)
    log = TrainingLog()
    warmup_stage(model, dataset, cfg, log)
    previous_total = None
    for cycle in range(cfg.cycles):
        joint_stage(model, dataset, cfg, log, cycle=cycle)
        project_basis_vectors(model, dataset, cfg.batch_size)
        fc_convex_stage(model, dataset, cfg, log, cycle=cycle)
        cycle_total = log.records[-1]["total"]
        if previous_total is not None:
            improvement = (previous_total - cycle_total) / max(abs(previous_total), 1e-12)
            if improvement < cfg.convergence_tol:
                break
        previous_total = cycle_total
    return model, log


def train_accuracy(model, dataset, batch_size: int = 32) -> float:
    correct = 0
    with torch.no_grad():
        for start in range(0, len(dataset), batch_size):
            images = dataset.images[start : start + batch_size]
            labels = dataset.labels[start : start + batch_size]
            correct += int((model.predict(images) == labels).sum())
    return correct / len(dataset)
