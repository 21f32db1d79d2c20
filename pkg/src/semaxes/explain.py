"""Semantic probabilities, concept scores, decision rules and report
assembly.

The evidence unit is the principal-component score (PCS): the semantic
probability of a concept activation inside the training distribution,
weighted by the concept's rank sensitivity. Band thresholds on the PCS
differences pick the verdict template and the per-concept wording.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import torch
from skimage.color import rgb2hsv
from skimage.metrics import structural_similarity

from .model import global_max_pool
from .ranks import ConceptAssignment

# half-open bands [lo, hi); values at exactly a boundary fall upward
VERDICT_BANDS = ((0.1, "unsure_pair"), (0.35, "unsure_because"), (0.5, "probably"))
TOP_VERDICT = "sure"
SEMANTEME_BANDS = ((0.1, "confusing"), (0.35, "something_like"), (0.5, "perhaps"))
TOP_SEMANTEME = "obviously"
POSITION_THRESHOLD = 0.5

HSV_WEIGHTS = {"h": 0.2, "s": 0.3, "v": 0.5}


@dataclass
class ConceptDistribution:
    """Normal fit of one concept's weighted average activations."""

    mean: float
    std: float
    a_min: float
    a_max: float
    sample_count: int = 0

    def __post_init__(self):
        if not self.std > 0:
            raise ValueError(f"std must be positive, got {self.std}")
        if not self.a_min < self.a_max:
            raise ValueError("a_min must be strictly below a_max")

    def cdf(self, x: float) -> float:
        return 0.5 * (1.0 + math.erf((x - self.mean) / (self.std * math.sqrt(2.0))))

    def to_dict(self) -> dict:
        return {
            "mean": self.mean,
            "std": self.std,
            "a_min": self.a_min,
            "a_max": self.a_max,
            "sample_count": self.sample_count,
        }

    @staticmethod
    def from_dict(d: dict) -> "ConceptDistribution":
        return ConceptDistribution(
            mean=d["mean"], std=d["std"], a_min=d["a_min"], a_max=d["a_max"],
            sample_count=d.get("sample_count", 0),
        )


def fit_concept_distribution(activations) -> ConceptDistribution:
    """Sample mean/std plus observed extremes of an activation population."""
    values = np.asarray(activations, dtype=np.float64).ravel()
    if values.size < 20:
        raise ValueError(f"need at least 20 samples, got {values.size}")
    if np.ptp(values) == 0:
        raise ValueError("constant activations: distribution fit is undefined")
    return ConceptDistribution(
        mean=float(values.mean()),
        std=float(values.std(ddof=1)),
        a_min=float(values.min()),
        a_max=float(values.max()),
        sample_count=int(values.size),
    )


def semantic_probability(a_s: float, dist: ConceptDistribution) -> float:
    """Normalized normal-cdf position of a_s between the observed extremes.

    Exactly 0 at a_min and 1 at a_max; monotone in a_s; clamped to [0, 1]
    outside the observed range.
    """
    lo, hi = dist.cdf(dist.a_min), dist.cdf(dist.a_max)
    p = (dist.cdf(a_s) - lo) / (hi - lo)
    return min(1.0, max(0.0, p))


def pcs(p_s: float, weight: float) -> float:
    """Sensitivity-weighted semantic probability; may exceed 1."""
    if not 0.0 <= p_s <= 1.0:
        raise ValueError(f"semantic probability must lie in [0, 1], got {p_s}")
    if weight < 0:
        raise ValueError(f"weight must be >= 0, got {weight}")
    return p_s * weight


@dataclass
class Deltas:
    delta_max_pcs: float
    pcs_max: float
    delta_pcs: dict[str, float]


def compute_deltas(
    pcs_by_class: dict[str, dict[str, float]], predicted: str, runner_up: str
) -> Deltas:
    """PCS differences between the predicted and runner-up classes.

    A concept missing from one class contributes 0 for that class.
    pcs_max is the maximum over every (class, concept) cell.
    """
    if len(pcs_by_class) < 2:
        raise ValueError("need PCS tables for at least two classes")
    for name in (predicted, runner_up):
        if name not in pcs_by_class:
            raise ValueError(f"class '{name}' missing from the PCS table")
    pred, run = pcs_by_class[predicted], pcs_by_class[runner_up]
    concepts = sorted(set(pred) | set(run))
    if not concepts:
        raise ValueError("no concepts present in the PCS table")
    delta = {s: pred.get(s, 0.0) - run.get(s, 0.0) for s in concepts}
    pcs_max = max(v for table in pcs_by_class.values() for v in table.values())
    return Deltas(
        delta_max_pcs=max(delta.values()),
        pcs_max=pcs_max,
        delta_pcs=delta,
    )


def _band(value: float, bands, top: str) -> str:
    for hi, name in bands:
        if value < hi:
            return name
    return top


def verdict_band(delta_max_pcs: float) -> str:
    return _band(delta_max_pcs, VERDICT_BANDS, TOP_VERDICT)


def semanteme_band(delta_pcs: float) -> str:
    return _band(delta_pcs, SEMANTEME_BANDS, TOP_SEMANTEME)


def position_word(pcs_max: float) -> str:
    return "vivid" if pcs_max >= POSITION_THRESHOLD else "be"


def load_templates(path=None) -> dict:
    """Sentence templates; defaults to the bundled templates.json."""
    if path is None:
        text = resources.files("semaxes").joinpath("templates.json").read_text()
    else:
        text = Path(path).read_text()
    return json.loads(text)


def generate_explanation(
    deltas: Deltas,
    predicted_pcs: dict[str, float],
    predicted: str,
    runner_up: str,
    templates: dict | None = None,
) -> dict:
    """Instantiate the verdict and per-concept phrases.

    Concepts appear in descending order of the predicted class's PCS.
    Returns {"band", "verdict", "phrases", "text"}.
    """
    templates = templates or load_templates()
    band = verdict_band(deltas.delta_max_pcs)
    position = position_word(deltas.pcs_max)
    ordered = sorted(predicted_pcs, key=lambda s: (-predicted_pcs[s], s))
    phrases = [
        templates["concept"][position][semanteme_band(deltas.delta_pcs.get(s, 0.0))].format(
            concept=s, a=predicted
        )
        for s in ordered
    ]
    if band == "unsure_pair" or not phrases:
        verdict = templates["verdict"]["unsure_pair"].format(a=predicted, b=runner_up)
        text = verdict
    else:
        verdict = templates["verdict"][band].format(a=predicted, first=phrases[0])
        connectives = templates.get("connectives", ["Meanwhile, ", "In addition, "])
        parts = [verdict]
        for i, phrase in enumerate(phrases[1:]):
            joiner = connectives[min(i, len(connectives) - 1)]
            parts.append(joiner + phrase)
        text = " ".join(parts)
    return {"band": band, "verdict": verdict, "phrases": phrases, "text": text}


def global_similarity_histogram(model, image: torch.Tensor) -> dict[str, float]:
    """Head-weighted sums of pooled cosine similarities, per class."""
    if image.ndim == 3:
        image = image.unsqueeze(0)
    with torch.no_grad():
        scores = global_max_pool(model.similarity_maps(model.extract_features(image)))
        values = (scores @ model.head.T)[0]
    return {name: float(values[c]) for c, name in enumerate(model.class_names)}


def hsv_similarity(patch_a: np.ndarray, patch_b: np.ndarray) -> float:
    """Structural similarity of two equally sized RGB regions in HSV space.

    Channel SSIMs are combined with weights H=0.2, S=0.3, V=0.5; the
    result lies in [-1, 1] and equals 1.0 for identical regions.
    """
    a = np.asarray(patch_a)
    b = np.asarray(patch_b)
    if a.shape != b.shape:
        raise ValueError(f"region shapes differ: {a.shape} vs {b.shape}")
    if a.ndim != 3 or a.shape[2] != 3:
        raise ValueError("regions must be [H, W, 3] RGB arrays")
    if min(a.shape[0], a.shape[1]) < 3:
        raise ValueError("regions must be at least 3x3")
    if a.dtype == np.uint8:
        a = a.astype(np.float64) / 255.0
        b = np.asarray(patch_b).astype(np.float64) / 255.0
    hsv_a, hsv_b = rgb2hsv(a), rgb2hsv(b)
    side = min(a.shape[0], a.shape[1])
    win = min(7, side if side % 2 == 1 else side - 1)
    total = 0.0
    for idx, channel in enumerate("hsv"):
        total += HSV_WEIGHTS[channel] * structural_similarity(
            hsv_a[:, :, idx], hsv_b[:, :, idx], data_range=1.0, win_size=win
        )
    return float(total)


# ---------------------------------------------------------------------------
# activation collection and report assembly
# ---------------------------------------------------------------------------


def concept_activation(
    sim_maps: np.ndarray, members: list[int], mask_percentile: float = 50.0, mode: str = "masked"
) -> float:
    """Weighted average activation of one concept's member channels.

    "masked" gates each member map by its own salient part (values at or
    above the map's percentile); "raw" averages the whole maps.
    """
    if not members:
        raise ValueError("concept has no member filters")
    values = []
    for f in members:
        m = sim_maps[f]
        if mode == "masked" and np.ptp(m) > 0:
            gate = m >= np.percentile(m, mask_percentile)
            values.append(float(m[gate].mean()))
        else:
            values.append(float(m.mean()))
    return float(np.mean(values))


def class_concept_members(
    assignment: ConceptAssignment, class_index: int, per_class: int
) -> dict[str, list[int]]:
    """Concept name -> member filters that belong to one class's block."""
    lo, hi = class_index * per_class, (class_index + 1) * per_class
    out: dict[str, list[int]] = {}
    for concept_id in assignment.concept_ids():
        members = [f for f in assignment.members(concept_id) if lo <= f < hi]
        if members:
            out[assignment.concept_name(concept_id)] = members
    return out


def fit_class_concept_distributions(
    model,
    dataset,
    assignment: ConceptAssignment,
    mask_percentile: float = 50.0,
    mode: str = "masked",
    batch_size: int = 32,
) -> dict[str, dict[str, ConceptDistribution]]:
    """Per (class, concept) normal fits of A_s over that class's images."""
    out: dict[str, dict[str, ConceptDistribution]] = {}
    per_class = model.per_class
    for c, class_name in enumerate(model.class_names):
        members_by_concept = class_concept_members(assignment, c, per_class)
        if not members_by_concept:
            continue
        idx = dataset.indices_of_class(c)
        activations: dict[str, list[float]] = {s: [] for s in members_by_concept}
        with torch.no_grad():
            for start in range(0, len(idx), batch_size):
                batch = idx[start : start + batch_size]
                sims = model.similarity_maps(
                    model.extract_features(dataset.images[batch])
                ).numpy()
                for b in range(sims.shape[0]):
                    for concept, members in members_by_concept.items():
                        activations[concept].append(
                            concept_activation(sims[b], members, mask_percentile, mode)
                        )
        out[class_name] = {}
        for concept, values in activations.items():
            try:
                out[class_name][concept] = fit_concept_distribution(values)
            except ValueError as err:
                warnings.warn(f"skipping {class_name}/{concept}: {err}")
    return out


def distributions_to_dict(dists) -> dict:
    return {
        "schema": "concept-distributions/1",
        "classes": {
            cls: {concept: d.to_dict() for concept, d in table.items()}
            for cls, table in dists.items()
        },
    }


def distributions_from_dict(payload) -> dict:
    return {
        cls: {
            concept: ConceptDistribution.from_dict(d) for concept, d in table.items()
        }
        for cls, table in payload["classes"].items()
    }


@dataclass
class ExplanationReport:
    """Everything the explanation pipeline derives for one query image."""

    image_id: str
    predicted_class: str
    runner_up_class: str
    probabilities: dict[str, float]
    global_similarity: dict[str, float]
    concept_weights: dict[str, float]
    pcs_by_class: dict[str, dict[str, float]]
    semantic_probabilities: dict[str, dict[str, float]]
    delta_max_pcs: float
    pcs_max: float
    delta_pcs: dict[str, float]
    verdict_band: str
    verdict: str
    phrases: list[str] = field(default_factory=list)
    text: str = ""
    hsv_scores: dict[str, float] = field(default_factory=dict)
    config_hash: str = ""

    def to_dict(self) -> dict:
        return {
            "schema": "explanation-report/1",
            "image_id": self.image_id,
            "predicted_class": self.predicted_class,
            "runner_up_class": self.runner_up_class,
            "probabilities": self.probabilities,
            "global_similarity": self.global_similarity,
            "concept_weights": self.concept_weights,
            "pcs_by_class": self.pcs_by_class,
            "semantic_probabilities": self.semantic_probabilities,
            "deltas": {
                "delta_max_pcs": self.delta_max_pcs,
                "pcs_max": self.pcs_max,
                "delta_pcs": self.delta_pcs,
            },
            "verdict_band": self.verdict_band,
            "verdict": self.verdict,
            "phrases": self.phrases,
            "text": self.text,
            "hsv_scores": self.hsv_scores,
            "config_hash": self.config_hash,
        }

    @staticmethod
    def from_dict(d: dict) -> "ExplanationReport":
        return ExplanationReport(
            image_id=d["image_id"],
            predicted_class=d["predicted_class"],
            runner_up_class=d["runner_up_class"],
            probabilities=d["probabilities"],
            global_similarity=d["global_similarity"],
            concept_weights=d["concept_weights"],
            pcs_by_class=d["pcs_by_class"],
            semantic_probabilities=d["semantic_probabilities"],
            delta_max_pcs=d["deltas"]["delta_max_pcs"],
            pcs_max=d["deltas"]["pcs_max"],
            delta_pcs=d["deltas"]["delta_pcs"],
            verdict_band=d["verdict_band"],
            verdict=d["verdict"],
            phrases=d["phrases"],
            text=d["text"],
            hsv_scores=d.get("hsv_scores", {}),
            config_hash=d.get("config_hash", ""),
        )

    def write_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @staticmethod
    def read_json(path) -> "ExplanationReport":
        with open(path) as fh:
            return ExplanationReport.from_dict(json.load(fh))


def build_report(
    model,
    image: torch.Tensor,
    assignment: ConceptAssignment,
    distributions: dict[str, dict[str, ConceptDistribution]],
    weights: dict[str, float],
    image_id: str = "",
    mask_percentile: float = 50.0,
    mode: str = "masked",
    templates: dict | None = None,
    config_hash: str = "",
) -> ExplanationReport:
    """Run the full explanation pipeline for one image."""
    if image.ndim == 3:
        image = image.unsqueeze(0)
    with torch.no_grad():
        fmap = model.extract_features(image)
        sims = model.similarity_maps(fmap)
        probs = (global_max_pool(sims) @ model.head.T).softmax(dim=1)[0]
        sims = sims[0].numpy()
    order = torch.argsort(probs, descending=True)
    predicted = model.class_names[int(order[0])]
    runner_up = model.class_names[int(order[1])]

    pcs_by_class: dict[str, dict[str, float]] = {}
    p_by_class: dict[str, dict[str, float]] = {}
    for c, class_name in enumerate(model.class_names):
        table = distributions.get(class_name, {})
        members_by_concept = class_concept_members(assignment, c, model.per_class)
        pcs_by_class[class_name] = {}
        p_by_class[class_name] = {}
        for concept, members in members_by_concept.items():
            if concept not in table:
                continue
            a_s = concept_activation(sims, members, mask_percentile, mode)
            p_s = semantic_probability(a_s, table[concept])
            p_by_class[class_name][concept] = p_s
            pcs_by_class[class_name][concept] = pcs(p_s, weights.get(concept, 1.0))

    deltas = compute_deltas(pcs_by_class, predicted, runner_up)
    sentence = generate_explanation(
        deltas, pcs_by_class[predicted], predicted, runner_up, templates
    )
    return ExplanationReport(
        image_id=image_id,
        predicted_class=predicted,
        runner_up_class=runner_up,
        probabilities={
            name: float(probs[c]) for c, name in enumerate(model.class_names)
        },
        global_similarity=global_similarity_histogram(model, image),
        concept_weights=dict(weights),
        pcs_by_class=pcs_by_class,
        semantic_probabilities=p_by_class,
        delta_max_pcs=deltas.delta_max_pcs,
        pcs_max=deltas.pcs_max,
        delta_pcs=deltas.delta_pcs,
        verdict_band=sentence["band"],
        verdict=sentence["verdict"],
        phrases=sentence["phrases"],
        text=sentence["text"],
        config_hash=config_hash,
    )
