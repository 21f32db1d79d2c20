"""The five training loss terms and their weighted combination.

Sign conventions follow the printed formulas literally:

  aggregation   (1/n) sum_i min over same-class vectors j and patches P
                of -cos(a_j', P)  ==  -(1/n) sum_i max cos
  separation    (1/n) sum_i min over wrong-class vectors j and patches P
                of cos(a_j', P)
  orthogonality sum_c || A_c A_c^T - I ||_F^2
  subspace      (-1/sqrt(2)) sum_{c1<c2} || A_c1^T A_c1 - A_c2^T A_c2 ||_F
  cross-entropy -(1/n) sum_i sum_c y_ic log p_ic

The aggregation/separation terms are evaluated on a perturbed bank
a' = a + sigma * eps; orthogonality and subspace terms use the raw bank.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .model import cosine_similarity_maps
from .validation import check_basis_bank, check_feature_map, check_labels

LOG_EPS = 1e-12


@dataclass
class LossWeights:
    """Multipliers for the four auxiliary terms (cross-entropy is unweighted)."""

    orthogonality: float = 1.0
    subspace: float = -1e-7
    separation: float = -0.08
    aggregation: float = 0.8


@dataclass
class PerturbationConfig:
    """Gaussian perturbation a' = a + sigma * eps applied per forward pass."""

    sigma: float = 0.01

    def __post_init__(self):
        if not math.isfinite(self.sigma) or self.sigma < 0:
            raise ValueError(f"sigma must be finite and >= 0, got {self.sigma}")


def perturb_basis(
    bank: torch.Tensor,
    cfg: PerturbationConfig | float = PerturbationConfig(),
    seed: int | None = None,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Additive Gaussian perturbation of every basis vector.

    Deterministic for a given seed; sigma == 0 returns the input
    unchanged (gradients still flow to the original bank).
    """
    sigma = cfg.sigma if isinstance(cfg, PerturbationConfig) else float(cfg)
    if sigma == 0:
        return bank
    if generator is None:
        generator = torch.Generator()
        generator.manual_seed(0 if seed is None else int(seed))
    noise = torch.randn(bank.shape, generator=generator, dtype=bank.dtype)
    return bank + sigma * noise


def _similarity_by_class(fmaps, labels, bank):
    """Shared setup: cosine of every patch vs every vector, shaped [n, C, M, H, W]."""
    check_feature_map(fmaps)
    check_basis_bank(bank)
    num_classes, per_class, _ = bank.shape
    labels = check_labels(labels, num_classes)
    if labels.shape[0] != fmaps.shape[0]:
        raise ValueError("labels and feature maps disagree on batch size")
    sims = cosine_similarity_maps(fmaps, bank.reshape(-1, bank.shape[-1]))
    n, _, h, w = sims.shape
    return sims.reshape(n, num_classes, per_class, h, w), labels


def aggregation_loss(fmaps, labels, bank) -> torch.Tensor:
    """Pulls each sample toward its own class's closest basis vector.

    Equals minus the mean over samples of the best cosine between any
    same-class vector and any patch; in [-1, 0) once any same-class
    similarity is positive.
    """
    sims, labels = _similarity_by_class(fmaps, labels, bank)
    n = sims.shape[0]
    own = sims[torch.arange(n), labels]  # [n, M, H, W]
    return (-own.amax(dim=(1, 2, 3))).mean()


def separation_loss(fmaps, labels, bank) -> torch.Tensor:
    """Mean over samples of the smallest cosine against any wrong-class vector."""
    sims, labels = _similarity_by_class(fmaps, labels, bank)
    n, num_classes = sims.shape[:2]
    if num_classes < 2:
        raise ValueError("separation loss needs at least two classes in the bank")
    # mask own-class similarities with a value above the cosine range so
    # the min can never select them (and autograd ignores them)
    own = torch.zeros(n, num_classes, dtype=torch.bool)
    own[torch.arange(n), labels] = True
    masked = torch.where(own[:, :, None, None, None], torch.full_like(sims, 2.0), sims)
    return masked.amin(dim=(1, 2, 3, 4)).mean()


def orthogonality_loss(bank) -> torch.Tensor:
    """Squared Frobenius distance of every per-class Gram matrix from identity."""
    check_basis_bank(bank)
    per_class = bank.shape[1]
    eye = torch.eye(per_class, dtype=bank.dtype)
    gram = torch.einsum("cmd,cnd->cmn", bank, bank)
    return ((gram - eye) ** 2).sum()


def subspace_separation_loss(bank) -> torch.Tensor:
    """Negative sum of pairwise Frobenius distances between class projector matrices.

    More negative means the class subspaces differ more; zero when all
    classes share one subspace matrix.
    """
    check_basis_bank(bank)
    num_classes = bank.shape[0]
    if num_classes < 2:
        raise ValueError("subspace separation needs at least two classes")
    proj = torch.einsum("cmd,cme->cde", bank, bank)  # A^T A per class, [C, D, D]
    total = bank.new_zeros(())
    for c1 in range(num_classes):
        for c2 in range(c1 + 1, num_classes):
            total = total + (proj[c1] - proj[c2]).norm()
    return -total / math.sqrt(2.0)


def cross_entropy_loss(probs: torch.Tensor, onehot: torch.Tensor) -> torch.Tensor:
    """Mean negative log-likelihood from probability rows and one-hot labels.

    Probabilities are clamped at 1e-12 before the log so degenerate rows
    stay finite.
    """
    if probs.shape != onehot.shape:
        raise ValueError("probs and one-hot labels must have matching shapes")
    logp = torch.log(probs.clamp(min=LOG_EPS))
    return -(onehot * logp).sum(dim=1).mean()


def total_loss(ce, l_orth, l_ss, l_sep, l_agg, weights: LossWeights):
    """Weighted sum of all five terms."""
    return (
        ce
        + weights.orthogonality * l_orth
        + weights.subspace * l_ss
        + weights.separation * l_sep
        + weights.aggregation * l_agg
    )
