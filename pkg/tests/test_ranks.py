import json

import numpy as np
import pytest
import torch

from semaxes.ranks import (
    ConceptAssignment,
    RankProfile,
    assign_concepts,
    concept_average_rank,
    feature_map_rank,
    find_redundant_filters,
    pcs_weights,
    rank_profile,
    sensitivity_scores,
    singular_values,
)

from oracles import gaussian_elimination_rank


class TestSingularValues:
    def test_zero_matrix(self):
        assert np.allclose(singular_values(np.zeros((7, 7))), 0.0)

    def test_identity(self):
        assert np.allclose(singular_values(np.eye(7)), 1.0)

    def test_descending_nonnegative(self):
        rng = np.random.default_rng(0)
        sv = singular_values(rng.normal(size=(7, 7)))
        assert np.all(sv >= 0)
        assert np.all(np.diff(sv) <= 0)

    def test_squares_match_eigenvalues(self):
        rng = np.random.default_rng(1)
        m = rng.normal(size=(7, 7))
        sv = singular_values(m)
        eig = np.sort(np.linalg.eigvalsh(m.T @ m))[::-1]
        assert np.allclose(sv**2, eig, atol=1e-6)

    def test_reconstruction(self):
        rng = np.random.default_rng(2)
        m = rng.normal(size=(7, 7))
        u, s, vt = np.linalg.svd(m)
        rebuilt = sum(s[i] * np.outer(u[:, i], vt[i]) for i in range(7))
        assert np.linalg.norm(rebuilt - m) < 1e-5
        assert np.allclose(s, singular_values(m))


class TestFeatureMapRank:
    def test_zero_matrix(self):
        assert feature_map_rank(np.zeros((7, 7))) == 0

    def test_constructed_rank_two(self):
        rng = np.random.default_rng(3)
        u1, u2 = rng.normal(size=(2, 7))
        v1, v2 = rng.normal(size=(2, 7))
        m = np.outer(u1, v1) + np.outer(u2, v2)
        assert feature_map_rank(m) == 2
        assert gaussian_elimination_rank(m) == 2

    def test_identity(self):
        assert feature_map_rank(np.eye(7)) == 7

    def test_scale_invariance_exact(self):
        rng = np.random.default_rng(4)
        m = rng.normal(size=(5, 3)) @ rng.normal(size=(3, 6))
        base = feature_map_rank(m)
        for c in (2.0, 0.125, -3.7, 1e6, 1e-6):
            assert feature_map_rank(c * m) == base

    def test_bounded_by_min_dim(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            h, w = rng.integers(1, 9, size=2)
            assert feature_map_rank(rng.normal(size=(h, w))) <= min(h, w)

    def test_tol_validation(self):
        with pytest.raises(ValueError):
            feature_map_rank(np.eye(3), tol=0.0)


class TestConceptAverageRank:
    def test_single_filter(self):
        assert concept_average_rank([5], {0: "eye"}) == {"eye": 5.0}

    def test_two_filters(self):
        assert concept_average_rank([4, 6], {0: "eye", 1: "eye"}) == {"eye": 5.0}

    def test_hand_summation(self):
        ranks = [1, 2, 3, 4, 5, 6, 7, 0]
        assignment = {0: "a", 1: "a", 2: "b", 3: "b", 4: "b", 5: "c", 6: "c", 7: "c"}
        result = concept_average_rank(ranks, assignment)
        assert result == {"a": 1.5, "b": 4.0, "c": 13.0 / 3.0}

    def test_unassigned_concept_absent(self):
        result = concept_average_rank([3, 4], {0: "eye", 1: "eye"})
        assert "leg" not in result

    def test_out_of_range_filter(self):
        with pytest.raises(ValueError):
            concept_average_rank([3], {5: "eye"})


class TestSensitivityScores:
    def test_single_concept(self):
        assert sensitivity_scores({"eye": 4.0}) == {"eye": 1.0}

    def test_arithmetic(self):
        scores = sensitivity_scores({"eye": 6.0, "leg": 2.0})
        assert scores == {"eye": 0.75, "leg": 0.25}

    def test_sum_to_one(self):
        rng = np.random.default_rng(6)
        ranks = {f"c{i}": float(rng.uniform(0.1, 7)) for i in range(9)}
        assert sum(sensitivity_scores(ranks).values()) == pytest.approx(1.0, abs=1e-9)

    def test_all_zero_uniform_with_warning(self):
        with pytest.warns(UserWarning, match="uniform"):
            scores = sensitivity_scores({"a": 0.0, "b": 0.0})
        assert scores == {"a": 0.5, "b": 0.5}

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            sensitivity_scores({})

    def test_pcs_weights_mean_one(self):
        weights = pcs_weights({"a": 0.75, "b": 0.25})
        assert weights == {"a": 1.5, "b": 0.5}
        assert np.mean(list(weights.values())) == pytest.approx(1.0)


class TestAssignConcepts:
    def test_duplicates_share_cluster(self):
        v = torch.tensor([1.0, 0.0, 0.0])
        bank = torch.stack([v, v, torch.tensor([0.0, 1.0, 0.0]), torch.tensor([0.0, 0.9, 0.1])])
        result = assign_concepts(bank.reshape(2, 2, 3), cluster_count=2, seed=0)
        assert result.assignment[0] == result.assignment[1]
        assert result.assignment[2] == result.assignment[3]
        assert result.assignment[0] != result.assignment[2]

    def test_singletons_when_k_equals_n(self):
        torch.manual_seed(0)
        bank = torch.randn(2, 2, 6)
        result = assign_concepts(bank, cluster_count=4, seed=0)
        assert sorted(result.assignment.values()) == [0, 1, 2, 3]

    def test_planted_groups_recovered(self):
        rng = np.random.default_rng(7)
        centers = np.eye(3)
        vectors = []
        for c in range(3):
            for _ in range(4):
                vectors.append(centers[c] + rng.normal(0, 0.05, 3))
        bank = torch.tensor(np.array(vectors), dtype=torch.float32).reshape(3, 4, 3)
        result = assign_concepts(bank, cluster_count=3, seed=0)
        groups = [
            {result.assignment[i] for i in range(c * 4, (c + 1) * 4)} for c in range(3)
        ]
        assert all(len(g) == 1 for g in groups)
        assert len({g.pop() for g in groups}) == 3

    def test_cluster_count_validation(self):
        with pytest.raises(ValueError, match="cluster_count"):
            assign_concepts(torch.randn(1, 2, 3), cluster_count=5)

    def test_deterministic(self):
        torch.manual_seed(1)
        bank = torch.randn(2, 4, 5)
        a = assign_concepts(bank, cluster_count=3, seed=42).assignment
        b = assign_concepts(bank, cluster_count=3, seed=42).assignment
        assert a == b

    def test_names_and_roundtrip(self):
        torch.manual_seed(2)
        bank = torch.randn(2, 2, 4)
        result = assign_concepts(bank, cluster_count=2, seed=0, names={0: "eye", 1: "leg"})
        assert set(result.named_assignment().values()) <= {"eye", "leg"}
        rebuilt = ConceptAssignment.from_dict(result.to_dict())
        assert rebuilt.assignment == result.assignment
        assert rebuilt.names == result.names


class _FakeModel:
    """Stub exposing the two methods the redundancy scan uses."""

    def __init__(self, maps):
        self.maps = maps  # [n, F, H, W]

    def extract_features(self, images):
        return images

    def similarity_maps(self, fmap):
        return self.maps[: fmap.shape[0]]


class TestRedundantFilters:
    def test_rank_zero_channels_found(self):
        torch.manual_seed(3)
        maps = torch.rand(2, 4, 5, 5)
        maps[:, 1] = 0.0  # dead channel
        maps[:, 3] = 0.0
        fake = _FakeModel(maps)
        redundant = find_redundant_filters(fake, torch.zeros(2, 1, 5, 5))
        assert redundant == [1, 3]


class TestRankProfile:
    def test_deterministic_for_identical_inputs(self, trained_tiny):
        model, _, dataset, _ = trained_tiny
        assignment = assign_concepts(model.basis, cluster_count=2, seed=0)
        p1 = rank_profile(model, dataset.images[0], assignment, image_id="a")
        p2 = rank_profile(model, dataset.images[0], assignment, image_id="a")
        assert np.array_equal(p1.per_filter_rank, p2.per_filter_rank)
        assert p1.per_concept_rank == p2.per_concept_rank

    def test_means_match_independent_summation(self, trained_tiny):
        model, _, dataset, _ = trained_tiny
        assignment = assign_concepts(model.basis, cluster_count=2, seed=0)
        profile = rank_profile(model, dataset.images[1], assignment)
        for concept_id in assignment.concept_ids():
            name = assignment.concept_name(concept_id)
            members = assignment.members(concept_id)
            expected = sum(int(profile.per_filter_rank[f]) for f in members) / len(members)
            assert profile.per_concept_rank[name] == pytest.approx(expected)

    def test_json_payload(self, trained_tiny, tmp_path):
        model, _, dataset, _ = trained_tiny
        assignment = assign_concepts(model.basis, cluster_count=2, seed=0)
        profile = rank_profile(model, dataset.images[0], assignment, image_id="img0")
        profile.write_json(tmp_path / "profile.json")
        payload = json.loads((tmp_path / "profile.json").read_text())
        assert payload["image_id"] == "img0"
        assert len(payload["per_filter_rank"]) == model.num_classes * model.per_class
        assert set(payload["concepts"]) == set(profile.per_concept_rank)
