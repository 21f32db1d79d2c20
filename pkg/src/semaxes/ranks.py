"""SVD rank sensitivity of similarity channels and concept grouping.

Every basis vector acts as a 1x1 convolution filter, so each of the C*M
similarity maps is "a filter's feature map". The SVD rank of that 7x7
map measures how much structure the filter extracts from an image;
averaging ranks over the filters assigned to one concept gives the
concept's sensitivity for that image.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch
from sklearn.cluster import KMeans

from .validation import check_2d

RANK_TOLERANCE = 1e-6


def singular_values(map2d) -> np.ndarray:
    """Singular values of a 2-D map, descending, non-negative."""
    m = check_2d(map2d, "feature map")
    return np.linalg.svd(m, compute_uv=False)


def feature_map_rank(map2d, tol: float = RANK_TOLERANCE) -> int:
    """Count of singular values above tol * sigma_max (0 for the zero map).

    The relative threshold makes the rank invariant under any nonzero
    rescaling of the map.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    sv = singular_values(map2d)
    if sv.size == 0 or sv[0] == 0.0:
        return 0
    return int(np.count_nonzero(sv > tol * sv[0]))


def concept_average_rank(
    per_filter_rank, concept_assignment: dict[int, object]
) -> dict[object, float]:
    """Arithmetic mean of assigned filters' ranks, per concept.

    Concepts with no assigned filters are simply absent from the result
    (a redundant filter set can leave a concept empty).
    """
    ranks = np.asarray(per_filter_rank)
    members: dict[object, list[int]] = {}
    for filter_idx, concept in concept_assignment.items():
        if filter_idx < 0 or filter_idx >= ranks.size:
            raise ValueError(f"filter index {filter_idx} out of range")
        members.setdefault(concept, []).append(filter_idx)
    return {
        concept: float(np.mean([ranks[i] for i in idx])) for concept, idx in members.items()
    }


def sensitivity_scores(per_concept_rank: dict) -> dict:
    """Normalize average ranks to scores summing to 1."""
    if not per_concept_rank:
        raise ValueError("no concepts present")
    total = float(sum(per_concept_rank.values()))
    if total == 0.0:
        warnings.warn("all concept ranks are zero; returning uniform scores")
        u = 1.0 / len(per_concept_rank)
        return {k: u for k in per_concept_rank}
    return {k: float(v) / total for k, v in per_concept_rank.items()}


@dataclass
class ConceptAssignment:
    """Filter index -> concept id, with optional human-readable names."""

    assignment: dict[int, int]
    names: dict[int, str] = field(default_factory=dict)
    redundant_filters: list[int] = field(default_factory=list)

    def concept_name(self, concept_id: int) -> str:
        return self.names.get(concept_id, f"concept_{concept_id}")

    def named_assignment(self) -> dict[int, str]:
        return {f: self.concept_name(c) for f, c in self.assignment.items()}

    def members(self, concept_id: int) -> list[int]:
        return sorted(f for f, c in self.assignment.items() if c == concept_id)

    def concept_ids(self) -> list[int]:
        return sorted(set(self.assignment.values()))

    def to_dict(self) -> dict:
        return {
            "schema": "concept-assignment/1",
            "assignment": {str(k): v for k, v in self.assignment.items()},
            "names": {str(k): v for k, v in self.names.items()},
            "redundant_filters": self.redundant_filters,
        }

    @staticmethod
    def from_dict(d: dict) -> "ConceptAssignment":
        return ConceptAssignment(
            assignment={int(k): v for k, v in d["assignment"].items()},
            names={int(k): v for k, v in d.get("names", {}).items()},
            redundant_filters=list(d.get("redundant_filters", [])),
        )


def assign_concepts(
    bank: torch.Tensor,
    cluster_count: int,
    seed: int = 0,
    names: dict[int, str] | None = None,
    redundant_filters: list[int] | None = None,
) -> ConceptAssignment:
    """Group the bank's filters into concepts by cosine similarity.

    Vectors are unit-normalized and clustered with seeded k-means, so
    duplicated filters always land together. Call after projection, when
    each vector equals its maximally-activating patch feature. Filters
    flagged redundant are left out of the clustering.
    """
    vectors = bank.detach().reshape(-1, bank.shape[-1]).numpy().astype(np.float64)
    redundant = sorted(set(redundant_filters or []))
    keep = [i for i in range(vectors.shape[0]) if i not in redundant]
    if cluster_count > len(keep):
        raise ValueError(
            f"cluster_count {cluster_count} exceeds usable filter count {len(keep)}"
        )
    norms = np.linalg.norm(vectors[keep], axis=1, keepdims=True)
    unit = vectors[keep] / np.where(norms == 0, 1.0, norms)
    km = KMeans(n_clusters=cluster_count, random_state=seed, n_init=10)
    labels = km.fit_predict(unit)
    assignment = {f: int(l) for f, l in zip(keep, labels)}
    return ConceptAssignment(
        assignment=assignment, names=dict(names or {}), redundant_filters=redundant
    )


def find_redundant_filters(
    model, images: torch.Tensor, tol: float = RANK_TOLERANCE, batch_size: int = 32
) -> list[int]:
    """Filters whose similarity maps are rank 0 across an entire probe set."""
    alive = None
    with torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            sims = model.similarity_maps(model.extract_features(images[start : start + batch_size]))
            arr = sims.numpy()
            batch_alive = np.array(
                [
                    any(feature_map_rank(arr[b, f], tol) > 0 for b in range(arr.shape[0]))
                    for f in range(arr.shape[1])
                ]
            )
            alive = batch_alive if alive is None else (alive | batch_alive)
    return [int(f) for f in np.nonzero(~alive)[0]]


@dataclass
class RankProfile:
    """Per-filter ranks plus per-concept averages for one image."""

    image_id: str
    per_filter_rank: np.ndarray
    per_concept_rank: dict[str, float]
    scores: dict[str, float]
    concept_filters: dict[str, list[int]]
    rank_tolerance: float = RANK_TOLERANCE

    def to_dict(self) -> dict:
        return {
            "schema": "rank-profile/1",
            "image_id": self.image_id,
            "per_filter_rank": [int(r) for r in self.per_filter_rank],
            "rank_tolerance": self.rank_tolerance,
            "concepts": {
                name: {
                    "filters": self.concept_filters[name],
                    "average_rank": self.per_concept_rank[name],
                    "score": self.scores[name],
                }
                for name in sorted(self.per_concept_rank)
            },
        }

    def write_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def rank_profile(
    model,
    image: torch.Tensor,
    assignment: ConceptAssignment,
    image_id: str = "",
    tol: float = RANK_TOLERANCE,
) -> RankProfile:
    """Rank every similarity channel of one image and aggregate by concept."""
    if image.ndim == 3:
        image = image.unsqueeze(0)
    with torch.no_grad():
        sims = model.similarity_maps(model.extract_features(image))[0].numpy()
    per_filter = np.array([feature_map_rank(sims[f], tol) for f in range(sims.shape[0])])
    named = {
        f: assignment.concept_name(c) for f, c in assignment.assignment.items()
    }
    per_concept = concept_average_rank(per_filter, named)
    return RankProfile(
        image_id=image_id,
        per_filter_rank=per_filter,
        per_concept_rank=per_concept,
        scores=sensitivity_scores(per_concept),
        concept_filters={
            assignment.concept_name(c): assignment.members(c)
            for c in assignment.concept_ids()
        },
        rank_tolerance=tol,
    )


def pcs_weights(scores: dict) -> dict:
    """Sensitivity weights used in PC scoring: normalized score * concept count.

    Keeps the typical weight near 1 so PCS values stay comparable to the
    underlying semantic probabilities.
    """
    k = len(scores)
    return {name: s * k for name, s in scores.items()}
