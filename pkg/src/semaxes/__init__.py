"""semaxes: per-class orthogonal concept bases for CNNs, with rank
sensitivity, row-centered PCA common traits, feature inversion and
rule-based explanation reports."""

from .config import RunConfig, load_config
from .data import ArrayDataset, DatasetManifest, ingest_dataset, load_dataset, synthetic_dataset
from .estimators import ProtoConceptClassifier
from .explain import (
    ConceptDistribution,
    ExplanationReport,
    build_report,
    compute_deltas,
    fit_concept_distribution,
    generate_explanation,
    global_similarity_histogram,
    hsv_similarity,
    pcs,
    semantic_probability,
)
from .inversion import InversionConfig, invert_features, salient_region_mask, tv_norm
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
from .model import (
    BasisBank,
    ProtoConceptNet,
    classify,
    cosine_similarity_maps,
    global_max_pool,
    init_classifier,
    load_checkpoint,
    save_checkpoint,
)
from .percept import DOMAINS, PerturbSpec, apply_perturbation, sensitivity_delta, sensitivity_report
from .ranks import (
    ConceptAssignment,
    RankProfile,
    assign_concepts,
    concept_average_rank,
    feature_map_rank,
    rank_profile,
    sensitivity_scores,
    singular_values,
)
from .traits import (
    RowCenteredPCA,
    TraitSpace,
    collect_concept_features,
    information_ratio,
    principal_components,
    qq_normality_r2,
    row_center,
    sample_covariance,
)
from .training import (
    TrainConfig,
    TrainingLog,
    fc_convex_stage,
    joint_stage,
    project_basis_vectors,
    train,
    warmup_stage,
)

__version__ = "0.1.0"
