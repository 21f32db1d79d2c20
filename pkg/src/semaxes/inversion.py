"""Feature inversion by gradient descent with total-variation smoothing,
plus salient-region masks from similarity maps."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch

from .validation import check_finite


@dataclass
class InversionConfig:
    tv_weight: float = 0.01
    step_size: float = 0.05
    iterations: int = 4000
    log_every: int = 100

    def __post_init__(self):
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.tv_weight < 0:
            raise ValueError("tv_weight must be >= 0")


def tv_norm(image: torch.Tensor) -> torch.Tensor:
    """Mean per-pixel gradient magnitude, 1/(CHW) * sum sqrt(dx^2 + dy^2).

    Forward differences with replicated boundary (the last row/column
    difference is zero). Exactly zero for constant images; doubling the
    image contrast doubles the value.
    """
    if image.ndim != 3 or image.shape[1] < 2 or image.shape[2] < 2:
        raise ValueError(f"expected [C, H, W] with H, W >= 2, got {tuple(image.shape)}")
    dx = torch.zeros_like(image)
    dy = torch.zeros_like(image)
    dx[:, :, :-1] = image[:, :, 1:] - image[:, :, :-1]
    dy[:, :-1, :] = image[:, 1:, :] - image[:, :-1, :]
    sq = dx * dx + dy * dy
    # sqrt(0) has an infinite derivative; route exact zeros through the
    # constant-0 branch so gradients stay finite
    magnitude = torch.where(sq > 0, torch.sqrt(sq.clamp(min=1e-24)), torch.zeros_like(sq))
    return magnitude.sum() / image.numel()


def invert_features(
    target: torch.Tensor,
    feature_fn,
    cfg: InversionConfig = InversionConfig(),
    image_shape: tuple | None = None,
) -> tuple[torch.Tensor, list[dict]]:
    """Recover an image whose features match ``target`` by plain gradient
    descent from a zero image.

    Objective: ||feature_fn(z) - target||^2 + tv_weight * tv_norm(z).
    Returns the final iterate and an objective log (every ``log_every``
    iterations). If the objective goes non-finite the last finite
    iterate is returned with an "aborted" entry in the log.
    """
    check_finite(target, "target features")
    shape = tuple(image_shape) if image_shape is not None else tuple(target.shape)
    z = torch.zeros(shape, dtype=target.dtype, requires_grad=True)
    log: list[dict] = []
    last_finite = z.detach().clone()

    for iteration in range(cfg.iterations + 1):
        fidelity = ((feature_fn(z) - target) ** 2).sum()
        smoothness = tv_norm(z) if cfg.tv_weight > 0 else z.new_zeros(())
        objective = fidelity + cfg.tv_weight * smoothness
        if not torch.isfinite(objective):
            log.append({"iteration": iteration, "objective": None, "aborted": True})
            return last_finite, log
        last_finite = z.detach().clone()
        if iteration % cfg.log_every == 0 or iteration == cfg.iterations:
            log.append(
                {
                    "iteration": iteration,
                    "objective": float(objective),
                    "fidelity": float(fidelity),
                    "tv": float(smoothness),
                }
            )
        if iteration == cfg.iterations:
            break
        grad = torch.autograd.grad(objective, z)[0]
        with torch.no_grad():
            z -= cfg.step_size * grad
    return z.detach(), log


def salient_region_mask(
    simmap, threshold_pct: float, out_size: int = 224
) -> np.ndarray:
    """Bilinearly upsample a similarity map and keep its top percentile.

    Returns a boolean [out_size, out_size] mask. The mask shrinks (never
    grows) as the percentile rises and is non-empty for any non-constant
    map; a constant map yields an empty mask with a warning.
    """
    simmap = np.asarray(simmap, dtype=np.float64)
    if simmap.ndim != 2:
        raise ValueError("similarity map must be 2-D")
    if not 0 <= threshold_pct < 100:
        raise ValueError("threshold_pct must lie in [0, 100)")
    if np.ptp(simmap) == 0:
        warnings.warn("constant similarity map: salient mask is empty")
        return np.zeros((out_size, out_size), dtype=bool)
    upsampled = (
        torch.nn.functional.interpolate(
            torch.from_numpy(simmap)[None, None],
            size=(out_size, out_size),
            mode="bilinear",
            align_corners=False,
        )[0, 0]
        .numpy()
    )
    return upsampled >= np.percentile(upsampled, threshold_pct)
