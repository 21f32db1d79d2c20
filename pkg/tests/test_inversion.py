import numpy as np
import pytest
import torch

from semaxes.inversion import InversionConfig, invert_features, salient_region_mask, tv_norm


class TestTVNorm:
    def test_constant_image_exactly_zero(self):
        assert float(tv_norm(torch.full((3, 5, 5), 0.7))) == 0.0

    def test_vertical_step_edge(self):
        # 1x4x4, columns 0-1 at 0 and 2-3 at h: one forward difference of h
        # per row, so the norm is h*H / (C*H*W)
        h = 0.6
        img = torch.zeros(1, 4, 4)
        img[:, :, 2:] = h
        expected = h * 4 / (1 * 4 * 4)
        assert float(tv_norm(img)) == pytest.approx(expected, rel=1e-6)

    def test_contrast_doubling_doubles_norm(self):
        torch.manual_seed(0)
        img = torch.rand(3, 6, 6)
        assert float(tv_norm(2 * img)) == pytest.approx(2 * float(tv_norm(img)), rel=1e-6)

    def test_translation_invariance_interior(self):
        # content supported away from the boundary; shifting it preserves
        # the norm exactly
        img = torch.zeros(1, 8, 8)
        img[0, 2:4, 2:4] = 1.0
        shifted = torch.zeros(1, 8, 8)
        shifted[0, 4:6, 3:5] = 1.0
        assert float(tv_norm(img)) == pytest.approx(float(tv_norm(shifted)), rel=1e-9)

    def test_gradient_finite_with_flat_regions(self):
        img = torch.zeros(2, 4, 4, requires_grad=True)
        with torch.no_grad():
            img[0, 1, 1] = 0.5
        grad = torch.autograd.grad(tv_norm(img), img)[0]
        assert torch.isfinite(grad).all()

    def test_shape_validation(self):
        with pytest.raises(ValueError):
            tv_norm(torch.zeros(3, 1, 5))


class TestInvertFeatures:
    def test_identity_recovery(self):
        torch.manual_seed(1)
        target = torch.rand(3, 8, 8)
        cfg = InversionConfig(tv_weight=0.0, step_size=0.05, iterations=400, log_every=100)
        image, log = invert_features(target, lambda z: z, cfg)
        assert float((image - target).abs().max()) < 1e-3
        assert log[0]["iteration"] == 0 and log[-1]["iteration"] == 400

    def test_zero_target_is_fixed_point(self):
        cfg = InversionConfig(tv_weight=0.5, step_size=0.05, iterations=50)
        target = torch.zeros(2, 4, 4)
        image, log = invert_features(target, lambda z: z, cfg)
        assert log[0]["objective"] == 0.0
        assert torch.all(image == 0)

    def test_objective_decreases_through_conv_layer(self):
        torch.manual_seed(2)
        conv = torch.nn.Conv2d(3, 4, kernel_size=3, padding=1)
        target = torch.randn(4, 6, 6)
        cfg = InversionConfig(tv_weight=0.01, step_size=0.05, iterations=60, log_every=20)
        _, log = invert_features(target, lambda z: conv(z[None])[0], cfg, image_shape=(3, 6, 6))
        assert log[-1]["objective"] <= log[0]["objective"]

    def test_deterministic(self):
        torch.manual_seed(3)
        target = torch.rand(2, 5, 5)
        cfg = InversionConfig(tv_weight=0.02, step_size=0.05, iterations=40)
        a, _ = invert_features(target, lambda z: z, cfg)
        b, _ = invert_features(target, lambda z: z, cfg)
        assert torch.equal(a, b)

    def test_divergence_returns_last_finite(self):
        target = torch.ones(1, 3, 3)
        cfg = InversionConfig(tv_weight=0.0, step_size=50.0, iterations=500, log_every=100)
        image, log = invert_features(target, lambda z: z, cfg)
        assert torch.isfinite(image).all()
        assert log[-1].get("aborted") is True

    def test_non_finite_target_rejected(self):
        with pytest.raises(ValueError, match="non-finite"):
            invert_features(torch.tensor([[float("nan")]]), lambda z: z)


class TestSalientRegionMask:
    def test_single_hot_cell_high_percentile(self):
        simmap = np.zeros((7, 7))
        simmap[3, 4] = 0.9
        mask = salient_region_mask(simmap, 95)
        assert mask.shape == (224, 224)
        assert mask.any()
        # the hot cell's upsampled neighborhood is selected
        assert mask[3 * 32, 4 * 32]

    def test_zero_percentile_full_mask(self):
        rng = np.random.default_rng(4)
        mask = salient_region_mask(rng.uniform(size=(7, 7)), 0)
        assert mask.all()

    def test_area_monotone_in_percentile(self):
        rng = np.random.default_rng(5)
        simmap = rng.uniform(size=(7, 7))
        areas = [salient_region_mask(simmap, p).sum() for p in (10, 30, 50, 70, 90)]
        assert all(a >= b for a, b in zip(areas, areas[1:]))

    def test_mask_nesting(self):
        rng = np.random.default_rng(6)
        simmap = rng.uniform(size=(7, 7))
        low = salient_region_mask(simmap, 20)
        high = salient_region_mask(simmap, 80)
        assert np.all(low[high])  # high-threshold mask is a subset

    def test_constant_map_empty_with_warning(self):
        with pytest.warns(UserWarning, match="constant"):
            mask = salient_region_mask(np.full((7, 7), 0.3), 50)
        assert not mask.any()

    def test_percentile_validation(self):
        with pytest.raises(ValueError):
            salient_region_mask(np.zeros((7, 7)), 100.0)
