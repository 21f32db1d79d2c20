"""Row-centered PCA for common-trait extraction, plus the q-q normality
diagnostic and per-concept feature collection.

Rows of the input matrix W are samples, columns are features. Each row
is centered on its own mean, the N_s x N_s covariance P = W_hat W_hat^T
/ (m - 1) is decomposed by SVD, and the retained singular vectors U_k
are mapped back to feature space as components W^T U_k. Each component
column is a "common trait" direction; projecting centered rows onto the
unit component directions gives per-sample scores.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass

import numpy as np
import torch
from scipy import stats
from sklearn.base import BaseEstimator, TransformerMixin

from .validation import check_2d

EIGENVALUE_RTOL = 1e-12


def row_center(W) -> tuple[np.ndarray, np.ndarray]:
    """Subtract each row's mean: returns (centered matrix, row means)."""
    W = check_2d(W, "W")
    if W.shape[0] < 2:
        raise ValueError(f"need at least 2 sample rows, got {W.shape[0]}")
    means = W.mean(axis=1)
    return W - means[:, None], means


def sample_covariance(W_hat) -> np.ndarray:
    """P = W_hat W_hat^T / (m - 1), an N_s x N_s PSD matrix.

    m is the feature (column) count; rows must already be centered.
    """
    W_hat = check_2d(W_hat, "W_hat")
    m = W_hat.shape[1]
    if m < 2:
        raise ValueError("need at least 2 feature columns")
    P = W_hat @ W_hat.T / (m - 1)
    return (P + P.T) / 2.0  # exact symmetry against accumulation order


def _psd_rank(eigenvalues: np.ndarray) -> int:
    if eigenvalues.size == 0 or eigenvalues[0] <= 0:
        return 0
    return int(np.count_nonzero(eigenvalues > EIGENVALUE_RTOL * eigenvalues[0]))


@dataclass
class TraitSpace:
    """Output of the row-centered PCA over one concept's samples."""

    components: np.ndarray  # [feature_dim, k] = W^T U_k, sign-fixed
    eigenvalues: np.ndarray  # [k], descending
    info_ratios: np.ndarray  # [k], cumulative retained-variance fractions
    sample_count: int
    row_means: np.ndarray  # [N_s]
    scores: np.ndarray  # [N_s, k], centered rows on unit trait directions
    directions: np.ndarray  # [feature_dim, k], unit score directions

    @property
    def k(self) -> int:
        return self.components.shape[1]

    def first_component(self) -> np.ndarray:
        return self.components[:, 0]


def principal_components(W, P, k: int) -> TraitSpace:
    """Retain k components of the covariance SVD, mapped to feature space.

    k above the numerical rank of P is clamped with a warning. Component
    signs are fixed so each column's largest-magnitude entry is positive.
    """
    W = check_2d(W, "W")
    P = check_2d(P, "P")
    if k < 1:
        raise ValueError("k must be >= 1")
    U, sigma, _ = np.linalg.svd(P)
    rank = _psd_rank(sigma)
    if rank == 0:
        raise ValueError("covariance matrix is zero; no components to retain")
    if k > rank:
        warnings.warn(f"k={k} exceeds covariance rank {rank}; clamping")
        k = rank
    W_hat, row_means = row_center(W)
    components = W.T @ U[:, :k]
    flip = np.where(
        components[np.abs(components).argmax(axis=0), np.arange(k)] < 0, -1.0, 1.0
    )
    components = components * flip
    # the all-ones offset from using raw W vanishes against centered rows,
    # so score directions come from the centered map
    directions = W_hat.T @ U[:, :k] * flip
    norms = np.linalg.norm(directions, axis=0)
    directions = directions / np.where(norms == 0, 1.0, norms)
    return TraitSpace(
        components=components,
        eigenvalues=sigma[:k].copy(),
        info_ratios=np.cumsum(sigma[:k]) / np.trace(P),
        sample_count=W.shape[0],
        row_means=row_means,
        scores=W_hat @ directions,
        directions=directions,
    )


def information_ratio(eigenvalues, k: int) -> float:
    """Fraction of total variance carried by the top k eigenvalues."""
    eigenvalues = np.asarray(eigenvalues, dtype=np.float64)
    if k < 0 or k > eigenvalues.size:
        raise ValueError(f"k must be in [0, {eigenvalues.size}]")
    total = eigenvalues.sum()
    if total == 0:
        return 0.0
    return float(eigenvalues[:k].sum() / total)


def qq_normality_r2(values) -> float:
    """R^2 of ordered values against normal quantiles at (i - 0.5) / n.

    Values near 1 indicate the sample is consistent with a normal
    distribution. Needs at least 20 non-constant values.
    """
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size < 20:
        raise ValueError(f"need at least 20 values, got {values.size}")
    if np.ptp(values) == 0:
        raise ValueError("constant input: q-q fit is undefined")
    ordered = np.sort(values)
    quantiles = stats.norm.ppf((np.arange(1, values.size + 1) - 0.5) / values.size)
    result = stats.linregress(quantiles, ordered)
    return float(result.rvalue**2)


class RowCenteredPCA(BaseEstimator, TransformerMixin):
    """sklearn-style transformer around the row-centered PCA.

    Parameters
    ----------
    n_components : int or None
        Fixed component count; None selects the smallest k whose
        cumulative information ratio reaches ``info_target`` (capped at
        ``max_components``).
    """

    def __init__(self, n_components=None, info_target: float = 0.9, max_components: int = 16):
        self.n_components = n_components
        self.info_target = info_target
        self.max_components = max_components

    def fit(self, X, y=None):
        X = check_2d(X, "X")
        W_hat, _ = row_center(X)
        P = sample_covariance(W_hat)
        sigma = np.linalg.svd(P, compute_uv=False)
        rank = _psd_rank(sigma)
        if rank == 0:
            raise ValueError("input has zero variance after row centering")
        if self.n_components is not None:
            k = min(self.n_components, rank)
        else:
            ratios = np.cumsum(sigma[:rank]) / sigma.sum()
            k = min(int(np.searchsorted(ratios, self.info_target) + 1), rank, self.max_components)
        space = principal_components(X, P, k)
        self.trait_space_ = space
        self.components_ = space.components
        self.eigenvalues_ = space.eigenvalues
        self.information_ratio_ = space.info_ratios
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        if not hasattr(self, "trait_space_"):
            raise ValueError("RowCenteredPCA is not fitted yet; call fit first")
        X = check_2d(X, "X")
        if X.shape[1] != self.n_features_in_:
            raise ValueError(
                f"X has {X.shape[1]} features, expected {self.n_features_in_}"
            )
        centered = X - X.mean(axis=1, keepdims=True)
        return centered @ self.trait_space_.directions


def collect_concept_features(
    dataset,
    model,
    assignment,
    concept,
    n_samples: int,
    seed: int = 0,
    mode: str = "masked",
    mask_percentile: float = 50.0,
    batch_size: int = 32,
) -> tuple[np.ndarray, list[str]]:
    """Build the trait matrix W for one concept: one row per sampled image.

    A row flattens the concept's member similarity maps; in "masked"
    mode each map is gated by the binary mask where the concept's mean
    map reaches its ``mask_percentile``. Returns (W, sampled image ids).
    """
    if mode not in ("masked", "raw"):
        raise ValueError(f"unknown mode: {mode}")
    concept_ids = assignment.concept_ids()
    named = {assignment.concept_name(c): c for c in concept_ids}
    if concept not in named:
        raise ValueError(f"unknown concept '{concept}'; have {sorted(named)}")
    members = assignment.members(named[concept])

    n = len(dataset)
    rng = np.random.default_rng(seed)
    if n_samples > n:
        warnings.warn(f"requested {n_samples} samples but only {n} available; using all")
        chosen = np.arange(n)
    else:
        chosen = np.sort(rng.choice(n, size=n_samples, replace=False))

    rows, ids = [], []
    with torch.no_grad():
        for start in range(0, len(chosen), batch_size):
            idx = chosen[start : start + batch_size].tolist()
            sims = model.similarity_maps(model.extract_features(dataset.images[idx]))
            maps = sims[:, members].numpy()  # [b, K_s, H, W]
            for b in range(maps.shape[0]):
                sample = maps[b]
                if mode == "masked":
                    mean_map = sample.mean(axis=0)
                    mask = mean_map >= np.percentile(mean_map, mask_percentile)
                    sample = sample * mask
                rows.append(sample.ravel().astype(np.float64))
            ids.extend(dataset.image_ids[i] for i in idx)
    return np.stack(rows), ids


def write_trait_space(path_stem, space: TraitSpace, extra: dict | None = None):
    """traits_<concept>.bin ([dim:u32][k:u32] + float32 components) + JSON."""
    components = np.asarray(space.components, dtype="<f4")
    dim, k = components.shape
    with open(f"{path_stem}.bin", "wb") as fh:
        fh.write(struct.pack("<II", dim, k))
        fh.write(components.tobytes(order="C"))
    payload = {
        "schema": "trait-space/1",
        "feature_dim": dim,
        "k": k,
        "eigenvalues": [float(v) for v in space.eigenvalues],
        "info_ratios": [float(v) for v in space.info_ratios],
        "sample_count": space.sample_count,
    }
    payload.update(extra or {})
    with open(f"{path_stem}.json", "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_trait_components(path) -> np.ndarray:
    with open(path, "rb") as fh:
        dim, k = struct.unpack("<II", fh.read(8))
        data = np.frombuffer(fh.read(4 * dim * k), dtype="<f4")
    if data.size != dim * k:
        raise ValueError(f"truncated trait file: {path}")
    return data.reshape(dim, k).copy()
