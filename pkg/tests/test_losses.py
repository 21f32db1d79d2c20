import math

import numpy as np
import pytest
import torch

from semaxes.losses import (
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
from semaxes.model import classify, cosine_similarity_maps, global_max_pool, init_classifier

from conftest import random_instance
from oracles import (
    aggregation_oracle,
    cross_entropy_oracle,
    orthogonality_oracle,
    separation_oracle,
    subspace_separation_oracle,
)


class TestPerturbBasis:
    def test_sigma_zero_identity(self):
        bank = torch.randn(2, 3, 4)
        assert perturb_basis(bank, PerturbationConfig(sigma=0.0), seed=1) is bank

    def test_fixed_seed_repeats(self):
        bank = torch.randn(2, 3, 4)
        a = perturb_basis(bank, PerturbationConfig(sigma=0.01), seed=9)
        b = perturb_basis(bank, PerturbationConfig(sigma=0.01), seed=9)
        assert torch.equal(a, b)

    def test_monte_carlo_std(self):
        bank = torch.zeros(5, 40, 50, dtype=torch.float64)  # 10^4 entries
        perturbed = perturb_basis(bank, PerturbationConfig(sigma=0.01), seed=0)
        assert float(perturbed.std()) == pytest.approx(0.01, rel=0.10)

    def test_negative_sigma_rejected(self):
        with pytest.raises(ValueError):
            PerturbationConfig(sigma=-0.1)


class TestAggregationLoss:
    def test_patch_equals_vector(self):
        v = torch.tensor([[0.2, 0.5, 0.3]], dtype=torch.float64)
        bank = torch.stack([v, torch.tensor([[1.0, -1.0, 0.0]], dtype=torch.float64)])
        fmap = v[0].reshape(1, 3, 1, 1)
        value = aggregation_loss(fmap, torch.tensor([0]), bank)
        assert float(value) == pytest.approx(-1.0, abs=1e-12)

    def test_orthogonal_patch(self):
        bank = torch.zeros(2, 1, 2, dtype=torch.float64)
        bank[0, 0] = torch.tensor([1.0, 0.0])
        bank[1, 0] = torch.tensor([1.0, 0.0])
        fmap = torch.tensor([0.0, 1.0], dtype=torch.float64).reshape(1, 2, 1, 1)
        assert float(aggregation_loss(fmap, torch.tensor([0]), bank)) == pytest.approx(0.0)

    def test_matches_bruteforce(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            fmaps, labels, bank = random_instance(rng)
            ours = float(aggregation_loss(fmaps, labels, bank))
            assert ours == pytest.approx(
                aggregation_oracle(fmaps.numpy(), labels.numpy(), bank.numpy()), abs=1e-6
            )

    def test_label_out_of_range(self):
        fmaps = torch.rand(1, 2, 2, 2)
        bank = torch.randn(2, 1, 2)
        with pytest.raises(ValueError, match="labels"):
            aggregation_loss(fmaps, torch.tensor([5]), bank)


class TestSeparationLoss:
    def test_min_selects_smallest(self):
        # wrong-class vector equals the patch (cos 1), another is orthogonal
        bank = torch.zeros(2, 2, 2, dtype=torch.float64)
        bank[0, 0] = torch.tensor([1.0, 0.0])
        bank[0, 1] = torch.tensor([1.0, 0.0])
        bank[1, 0] = torch.tensor([1.0, 0.0])  # equals patch
        bank[1, 1] = torch.tensor([0.0, 1.0])  # orthogonal to patch
        fmap = torch.tensor([1.0, 0.0], dtype=torch.float64).reshape(1, 2, 1, 1)
        value = separation_loss(fmap, torch.tensor([0]), bank)
        assert float(value) == pytest.approx(0.0, abs=1e-12)

    def test_all_orthogonal(self):
        bank = torch.zeros(2, 1, 3, dtype=torch.float64)
        bank[0, 0] = torch.tensor([1.0, 0.0, 0.0])
        bank[1, 0] = torch.tensor([0.0, 1.0, 0.0])
        fmap = torch.tensor([0.0, 0.0, 2.0], dtype=torch.float64).reshape(1, 3, 1, 1)
        assert float(separation_loss(fmap, torch.tensor([0]), bank)) == pytest.approx(0.0)

    def test_matches_bruteforce(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            fmaps, labels, bank = random_instance(rng, num_classes=3, per_class=3)
            ours = float(separation_loss(fmaps, labels, bank))
            assert ours == pytest.approx(
                separation_oracle(fmaps.numpy(), labels.numpy(), bank.numpy()), abs=1e-6
            )

    def test_single_class_rejected(self):
        with pytest.raises(ValueError, match="two classes"):
            separation_loss(torch.rand(1, 2, 2, 2), torch.tensor([0]), torch.randn(1, 2, 2))


class TestOrthogonalityLoss:
    def test_identity_bank(self):
        bank = torch.eye(4).reshape(1, 4, 4)
        assert float(orthogonality_loss(bank)) == pytest.approx(0.0)

    def test_identical_unit_rows(self):
        v = torch.tensor([1.0, 0.0, 0.0])
        bank = torch.stack([v, v]).reshape(1, 2, 3)
        assert float(orthogonality_loss(bank)) == pytest.approx(2.0)

    def test_matches_bruteforce(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            bank = torch.tensor(rng.normal(size=(3, 4, 5)))
            assert float(orthogonality_loss(bank)) == pytest.approx(
                orthogonality_oracle(bank.numpy()), rel=1e-9
            )

    def test_zero_iff_orthonormal(self):
        rng = np.random.default_rng(3)
        q, _ = np.linalg.qr(rng.normal(size=(6, 4)))
        bank = torch.tensor(q.T).reshape(1, 4, 6)
        assert float(orthogonality_loss(bank)) == pytest.approx(0.0, abs=1e-12)
        assert float(orthogonality_loss(bank * 1.1)) > 0.1


class TestSubspaceSeparationLoss:
    def test_identical_classes(self):
        a = torch.randn(1, 3, 5, dtype=torch.float64)
        bank = torch.cat([a, a])
        assert float(subspace_separation_loss(bank)) == pytest.approx(0.0)

    def test_axis_aligned_pair(self):
        bank = torch.zeros(2, 1, 2, dtype=torch.float64)
        bank[0, 0, 0] = 1.0
        bank[1, 0, 1] = 1.0
        assert float(subspace_separation_loss(bank)) == pytest.approx(-1.0)

    def test_matches_pair_oracle(self):
        rng = np.random.default_rng(4)
        for _ in range(10):
            bank = torch.tensor(rng.normal(size=(3, 2, 4)))
            assert float(subspace_separation_loss(bank)) == pytest.approx(
                subspace_separation_oracle(bank.numpy()), rel=1e-9
            )

    def test_single_class_rejected(self):
        with pytest.raises(ValueError):
            subspace_separation_loss(torch.randn(1, 2, 3))


class TestCrossEntropyLoss:
    def test_perfect_prediction(self):
        probs = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
        onehot = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
        assert float(cross_entropy_loss(probs, onehot)) == pytest.approx(0.0)

    def test_uniform_two_class(self):
        probs = torch.full((1, 2), 0.5, dtype=torch.float64)
        onehot = torch.tensor([[0.0, 1.0]], dtype=torch.float64)
        assert float(cross_entropy_loss(probs, onehot)) == pytest.approx(math.log(2), abs=1e-12)

    def test_matches_direct_sum(self):
        rng = np.random.default_rng(5)
        raw = rng.uniform(0.05, 1, size=(3, 4))
        probs = raw / raw.sum(axis=1, keepdims=True)
        onehot = np.eye(4)[rng.integers(0, 4, size=3)]
        ours = float(cross_entropy_loss(torch.tensor(probs), torch.tensor(onehot)))
        assert ours == pytest.approx(cross_entropy_oracle(probs, onehot), rel=1e-12)

    def test_degenerate_row_is_finite(self):
        probs = torch.tensor([[0.0, 1.0]], dtype=torch.float64)
        onehot = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
        value = float(cross_entropy_loss(probs, onehot))
        assert math.isfinite(value) and value == pytest.approx(-math.log(1e-12))


class TestTotalLoss:
    def test_all_zero(self):
        z = torch.tensor(0.0)
        assert float(total_loss(z, z, z, z, z, LossWeights())) == 0.0

    def test_ce_only(self):
        z = torch.tensor(0.0)
        assert float(total_loss(torch.tensor(1.0), z, z, z, z, LossWeights())) == 1.0

    def test_weighted_arithmetic(self):
        terms = [torch.tensor(v, dtype=torch.float64) for v in (0.5, 2.0, -1.0, -0.3, -0.8)]
        value = float(total_loss(*terms, LossWeights()))
        assert value == pytest.approx(1.8840001, abs=1e-9)


class TestLossProperties:
    def test_cosine_losses_scale_invariant(self):
        rng = np.random.default_rng(6)
        fmaps, labels, bank = random_instance(rng)
        for c in (0.5, 7.0):
            assert float(aggregation_loss(fmaps * c, labels, bank)) == pytest.approx(
                float(aggregation_loss(fmaps, labels, bank)), abs=1e-6
            )
            assert float(separation_loss(fmaps * c, labels, bank)) == pytest.approx(
                float(separation_loss(fmaps, labels, bank)), abs=1e-6
            )

    @pytest.mark.parametrize("loss_name", ["aggregation", "separation", "orthogonality", "subspace", "ce"])
    def test_gradients_match_finite_differences(self, loss_name):
        rng = np.random.default_rng(7)
        fmaps, labels, bank = random_instance(rng, n=2, num_classes=2, per_class=2, dim=4, side=2)
        head = init_classifier(2, 2).to(torch.float64)
        onehot = torch.nn.functional.one_hot(labels, 2).to(torch.float64)

        def value(b: torch.Tensor) -> torch.Tensor:
            if loss_name == "aggregation":
                return aggregation_loss(fmaps, labels, b)
            if loss_name == "separation":
                return separation_loss(fmaps, labels, b)
            if loss_name == "orthogonality":
                return orthogonality_loss(b)
            if loss_name == "subspace":
                return subspace_separation_loss(b)
            probs = classify(global_max_pool(cosine_similarity_maps(fmaps, b)), head)
            return cross_entropy_loss(probs, onehot)

        b = bank.clone().requires_grad_(True)
        analytic = torch.autograd.grad(value(b), b)[0].numpy()

        step = 1e-4
        flat = bank.numpy().copy()
        fd = np.zeros_like(flat)
        it = np.nditer(flat, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = flat[idx]
            flat[idx] = orig + step
            hi = float(value(torch.tensor(flat)))
            flat[idx] = orig - step
            lo = float(value(torch.tensor(flat)))
            flat[idx] = orig
            fd[idx] = (hi - lo) / (2 * step)
        denom = max(np.abs(fd).max(), 1e-8)
        assert np.abs(analytic - fd).max() / denom < 1e-3
