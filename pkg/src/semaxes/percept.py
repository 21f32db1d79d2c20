"""Perceptual-domain sensitivity study: how much each visual attribute
(hue, brightness, contrast, saturation, texture, shape) moves the
concept masks, measured as aggregation-loss differences.

Masks are the projected basis vectors; the perturbed mask set comes from
re-running the projection on perturbed images with the frozen model.
Per sample the delta is the original-mask aggregation term minus the
perturbed-mask aggregation term, so identical masks give exactly zero.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import cv2
import numpy as np
import torch
import torchvision.transforms.functional as TF

from .data import ArrayDataset
from .model import cosine_similarity_maps
from .training import extract_all_features, project_basis_vectors, joint_stage

DOMAINS = ("hue", "brightness", "contrast", "saturation", "texture", "shape")


@dataclass
class PerturbSpec:
    """Perturbation amplitudes per perceptual domain."""

    contrast: float = 0.45
    brightness: float = 0.8
    saturation: float = 0.7
    hue: float = 0.1
    texture_strength: float = 4.0
    shape_roll_fraction: float = 0.1

    def __post_init__(self):
        if not 0 <= self.hue <= 0.5:
            raise ValueError("hue amplitude must lie in [0, 0.5]")
        for name in ("contrast", "brightness", "saturation", "texture_strength"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0 <= self.shape_roll_fraction <= 1:
            raise ValueError("shape_roll_fraction must lie in [0, 1]")


def _jitter_factor(rng: np.random.Generator, amplitude: float) -> float:
    # same convention as torchvision's ColorJitter ranges
    return float(rng.uniform(max(0.0, 1.0 - amplitude), 1.0 + amplitude))


def apply_perturbation(
    image: np.ndarray, domain: str, spec: PerturbSpec = PerturbSpec(), seed: int = 0
) -> np.ndarray:
    """Perturb one visual attribute of an HWC uint8 image.

    Deterministic for a given (spec, seed); a zero amplitude returns the
    input unchanged.
    """
    if domain not in DOMAINS:
        raise ValueError(f"unknown domain '{domain}'; expected one of {DOMAINS}")
    image = np.asarray(image, dtype=np.uint8)
    rng = np.random.default_rng(seed)

    if domain in ("brightness", "contrast", "saturation", "hue"):
        amplitude = getattr(spec, domain)
        if amplitude == 0:
            return image.copy()
        t = torch.from_numpy(image.transpose(2, 0, 1))
        if domain == "brightness":
            t = TF.adjust_brightness(t, _jitter_factor(rng, amplitude))
        elif domain == "contrast":
            t = TF.adjust_contrast(t, _jitter_factor(rng, amplitude))
        elif domain == "saturation":
            t = TF.adjust_saturation(t, _jitter_factor(rng, amplitude))
        else:
            t = TF.adjust_hue(t, float(rng.uniform(-amplitude, amplitude)))
        return t.numpy().transpose(1, 2, 0)

    if domain == "texture":
        if spec.texture_strength == 0:
            return image.copy()
        return cv2.fastNlMeansDenoisingColored(
            image, None, h=spec.texture_strength, hColor=spec.texture_strength
        )

    # shape: sinusoidal cyclic shifts of rows and columns ("wheel
    # fluctuation"), max amplitude = fraction of the image side
    if spec.shape_roll_fraction == 0:
        return image.copy()
    h, w = image.shape[:2]
    amp_x, amp_y = spec.shape_roll_fraction * w, spec.shape_roll_fraction * h
    phase_r, phase_c = rng.uniform(0, 2 * np.pi, size=2)
    out = image.copy()
    for r in range(h):
        shift = int(round(amp_x * np.sin(2 * np.pi * r / h + phase_r)))
        out[r] = np.roll(out[r], shift, axis=0)
    for c in range(w):
        shift = int(round(amp_y * np.sin(2 * np.pi * c / w + phase_c)))
        out[:, c] = np.roll(out[:, c], shift, axis=0)
    return out


def perturb_dataset(dataset: ArrayDataset, domain: str, spec: PerturbSpec, seed: int = 0) -> ArrayDataset:
    """Apply one domain perturbation to every image of a dataset."""
    from .data import NORM_MEAN, NORM_STD, preprocess

    raw = dataset.images.numpy().transpose(0, 2, 3, 1)
    # rint keeps the uint8 -> float -> uint8 round trip exact, so a zero
    # amplitude reproduces the original tensors bitwise
    raw = np.rint(np.clip((raw * NORM_STD + NORM_MEAN) * 255.0, 0, 255)).astype(np.uint8)
    perturbed = np.stack(
        [
            apply_perturbation(raw[i], domain, spec, seed=seed + i)
            for i in range(raw.shape[0])
        ]
    )
    return ArrayDataset(
        images=preprocess(perturbed),
        labels=dataset.labels.clone(),
        image_ids=list(dataset.image_ids),
        class_names=list(dataset.class_names),
    )


def extract_masks(model, dataset: ArrayDataset, retrain: bool = False, cfg=None) -> torch.Tensor:
    """Concept masks for a dataset: the projected basis bank [C, M, D].

    Default is re-extraction (projection with the frozen model); with
    ``retrain`` the joint stage reruns on the given data first.
    """
    work = copy.deepcopy(model)
    if retrain:
        if cfg is None:
            raise ValueError("retrain=True requires a TrainConfig")
        joint_stage(work, dataset, cfg)
    project_basis_vectors(work, dataset)
    return work.basis.detach().clone()


def per_sample_aggregation(fmaps: torch.Tensor, labels: torch.Tensor, masks: torch.Tensor) -> np.ndarray:
    """Per-sample aggregation terms: -max cosine against same-class masks."""
    sims = cosine_similarity_maps(fmaps, masks.reshape(-1, masks.shape[-1]))
    n = sims.shape[0]
    sims = sims.reshape(n, masks.shape[0], masks.shape[1], *sims.shape[2:])
    own = sims[torch.arange(n), labels]
    return (-own.amax(dim=(1, 2, 3))).numpy()


def sensitivity_delta(
    original_masks: torch.Tensor,
    perturbed_masks: torch.Tensor,
    fmaps: torch.Tensor,
    labels: torch.Tensor,
) -> tuple[float, np.ndarray]:
    """Aggregation-loss difference between two mask sets on shared samples.

    Returns (mean delta, per-sample deltas); antisymmetric under
    swapping the mask roles, exactly zero for identical masks.
    """
    if original_masks.shape != perturbed_masks.shape:
        raise ValueError(
            f"mask sets disagree: {tuple(original_masks.shape)} vs "
            f"{tuple(perturbed_masks.shape)}"
        )
    with torch.no_grad():
        original = per_sample_aggregation(fmaps, labels, original_masks)
        perturbed = per_sample_aggregation(fmaps, labels, perturbed_masks)
    deltas = original - perturbed
    return float(deltas.mean()), deltas


def _box_stats(values: np.ndarray) -> dict:
    q1, median, q3 = (float(np.percentile(values, q)) for q in (25, 50, 75))
    iqr = q3 - q1
    lo = float(values[values >= q1 - 1.5 * iqr].min())
    hi = float(values[values <= q3 + 1.5 * iqr].max())
    return {
        "q1": q1,
        "median": median,
        "q3": q3,
        "whisker_low": lo,
        "whisker_high": hi,
        "mean": float(values.mean()),
        "n": int(values.size),
    }


def sensitivity_report(deltas_by_cell: dict[tuple[str, str], np.ndarray]) -> dict:
    """Box-plot statistics per (concept, domain) cell."""
    cells = {}
    for (concept, domain), values in deltas_by_cell.items():
        values = np.asarray(values, dtype=np.float64)
        if values.size < 2:
            raise ValueError(f"cell ({concept}, {domain}) needs at least 2 samples")
        cells[f"{concept}/{domain}"] = _box_stats(values)
    return {"schema": "sensitivity-report/1", "cells": cells}


def run_percept_study(
    model,
    dataset: ArrayDataset,
    concept_members: dict[str, list[tuple[int, int]]],
    spec: PerturbSpec = PerturbSpec(),
    domains=DOMAINS,
    samples_per_category: int = 500,
    seed: int = 0,
    retrain: bool = False,
    cfg=None,
) -> tuple[dict, dict[tuple[str, str], np.ndarray]]:
    """Full study: per-(concept, domain) delta distributions plus report.

    ``concept_members`` maps concept name to its (class, vector) index
    pairs within the bank. Samples are drawn per class up to
    ``samples_per_category``.
    """
    rng = np.random.default_rng(seed)
    chosen: list[int] = []
    for c in range(dataset.num_classes):
        idx = dataset.indices_of_class(c)
        take = min(samples_per_category, len(idx))
        chosen.extend(sorted(rng.choice(idx, size=take, replace=False).tolist()))
    sample = dataset.subset(chosen)
    fmaps = extract_all_features(model, sample)

    original = extract_masks(model, dataset, retrain=retrain, cfg=cfg)
    deltas_by_cell: dict[tuple[str, str], np.ndarray] = {}
    for domain in domains:
        perturbed_data = perturb_dataset(dataset, domain, spec, seed=seed)
        perturbed = extract_masks(model, perturbed_data, retrain=retrain, cfg=cfg)
        for concept, members in concept_members.items():
            rows = [c * model.per_class + m for c, m in members]
            flat_orig = original.reshape(-1, original.shape[-1])
            flat_pert = perturbed.reshape(-1, perturbed.shape[-1])
            omask = flat_orig[rows][None]  # single pseudo-class of concept masks
            pmask = flat_pert[rows][None]
            zeros = torch.zeros(len(sample), dtype=torch.long)
            _, per_sample = sensitivity_delta(omask, pmask, fmaps, zeros)
            deltas_by_cell[(concept, domain)] = per_sample
    return sensitivity_report(deltas_by_cell), deltas_by_cell


def write_report_json(path, report: dict, config_hash: str = ""):
    payload = dict(report)
    payload["config_hash"] = config_hash
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def render_boxplots(path, deltas_by_cell: dict[tuple[str, str], np.ndarray]):
    """One boxplot panel per concept, domains on the x axis."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    concepts = sorted({c for c, _ in deltas_by_cell})
    domains = sorted({d for _, d in deltas_by_cell})
    fig, axes = plt.subplots(1, len(concepts), figsize=(4 * len(concepts), 3.2), squeeze=False)
    for ax, concept in zip(axes[0], concepts):
        data = [deltas_by_cell[(concept, d)] for d in domains]
        ax.boxplot(data, tick_labels=domains)
        ax.set_title(concept)
        ax.tick_params(axis="x", rotation=45)
        ax.set_ylabel("aggregation-loss delta")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
