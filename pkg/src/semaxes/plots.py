"""PNG renderers for explanation artifacts (headless matplotlib)."""

from __future__ import annotations

import numpy as np
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt


def render_similarity_hist(path, scores: dict[str, float], title: str = "global similarity"):
    """Bar chart of head-weighted similarity scores per class."""
    names = sorted(scores)
    values = [scores[n] for n in names]
    fig, ax = plt.subplots(figsize=(max(4, 0.8 * len(names) + 2), 3.2))
    bars = ax.bar(names, values, color="#4878cf")
    best = int(np.argmax(values))
    bars[best].set_color("#d65f5f")
    ax.set_ylabel("weighted cosine similarity")
    ax.set_title(title)
    ax.tick_params(axis="x", rotation=30)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_bubble_ring(path, pcs_by_class: dict[str, dict[str, float]], title: str = "concept scores"):
    """Concepts on a ring, one bubble per (class, concept), area ~ PCS."""
    concepts = sorted({s for table in pcs_by_class.values() for s in table})
    classes = sorted(pcs_by_class)
    if not concepts:
        raise ValueError("no concepts to draw")
    angles = np.linspace(0, 2 * np.pi, len(concepts), endpoint=False)
    radii = np.linspace(1.0, 1.0 + 0.35 * (len(classes) - 1), len(classes))
    colors = plt.cm.tab10(np.linspace(0, 1, max(len(classes), 2)))

    fig, ax = plt.subplots(figsize=(5, 5), subplot_kw={"projection": "polar"})
    for r, cls, color in zip(radii, classes, colors):
        sizes = [1200 * pcs_by_class[cls].get(s, 0.0) + 10 for s in concepts]
        ax.scatter(angles, [r] * len(concepts), s=sizes, alpha=0.6, color=color, label=cls)
    ax.set_xticks(angles)
    ax.set_xticklabels(concepts)
    ax.set_yticks([])
    ax.set_title(title)
    ax.legend(loc="upper right", bbox_to_anchor=(1.25, 1.1), fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def deprocess_image(tensor) -> np.ndarray:
    """Normalized CHW tensor -> displayable HWC uint8 array."""
    x = np.asarray(tensor, dtype=np.float64)
    x = x - x.mean()
    std = x.std()
    if std > 0:
        x = x / std * 0.15
    x = np.clip(x + 0.5, 0, 1)
    return (x.transpose(1, 2, 0) * 255).astype(np.uint8)


def render_image(path, array: np.ndarray, title: str = ""):
    fig, ax = plt.subplots(figsize=(3.2, 3.2))
    ax.imshow(array)
    ax.set_axis_off()
    if title:
        ax.set_title(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_salient_overlay(path, image_hwc: np.ndarray, mask: np.ndarray, title: str = ""):
    """Red overlay of a salient-region mask on top of an image."""
    base = np.asarray(image_hwc, dtype=np.float64)
    if base.max() > 1.0:
        base = base / 255.0
    overlay = base.copy()
    overlay[mask] = 0.45 * base[mask] + 0.55 * np.array([1.0, 0.1, 0.1])
    render_image(path, (overlay * 255).astype(np.uint8), title)
