"""Input validation helpers shared across the package.

All checks raise ``ValueError`` with a message naming the offending
argument, so callers (and sklearn-style estimators) fail fast and
uniformly.
"""

from __future__ import annotations

import numpy as np
import torch


def check_finite(t, name: str):
    """Raise if ``t`` contains NaN or infinity."""
    if isinstance(t, torch.Tensor):
        ok = bool(torch.isfinite(t).all())
    else:
        ok = bool(np.isfinite(np.asarray(t)).all())
    if not ok:
        raise ValueError(f"{name} contains non-finite values")
    return t


def check_image_batch(images: torch.Tensor, size: int = 224) -> torch.Tensor:
    """Validate a [batch, 3, size, size] image tensor."""
    if not isinstance(images, torch.Tensor):
        images = torch.as_tensor(images)
    if images.ndim != 4 or images.shape[1] != 3:
        raise ValueError(
            f"images must have shape [batch, 3, {size}, {size}], got {tuple(images.shape)}"
        )
    if images.shape[2] != size or images.shape[3] != size:
        raise ValueError(
            f"images must be {size}x{size}, got {images.shape[2]}x{images.shape[3]}"
        )
    check_finite(images, "images")
    return images


def check_feature_map(fmap: torch.Tensor) -> torch.Tensor:
    """Validate a [batch, channels, H, W] feature map."""
    if fmap.ndim != 4:
        raise ValueError(f"feature map must be 4-D [batch, C, H, W], got {fmap.ndim}-D")
    if min(fmap.shape[1:]) < 1:
        raise ValueError(f"feature map has an empty dimension: {tuple(fmap.shape)}")
    check_finite(fmap, "feature map")
    return fmap


def check_basis_bank(vectors: torch.Tensor) -> torch.Tensor:
    """Validate a [classes, vectors_per_class, dim] basis tensor."""
    if vectors.ndim != 3:
        raise ValueError(
            f"basis bank must be 3-D [classes, per_class, dim], got {vectors.ndim}-D"
        )
    check_finite(vectors, "basis bank")
    return vectors


def check_labels(labels: torch.Tensor, num_classes: int) -> torch.Tensor:
    """Validate integer class labels against the class count."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.ndim != 1:
        raise ValueError("labels must be a 1-D integer tensor")
    if labels.numel() and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(
            f"labels must lie in [0, {num_classes}), got range "
            f"[{int(labels.min())}, {int(labels.max())}]"
        )
    return labels


def check_2d(x, name: str = "array") -> np.ndarray:
    """Coerce to a finite 2-D float64 numpy array."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got {x.ndim}-D")
    check_finite(x, name)
    return x
