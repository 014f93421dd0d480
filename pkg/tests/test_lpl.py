import numpy as np
import pytest
import torch

from lpl_lab.errors import ConfigError, NumericalError
from lpl_lab.lpl import (LatentPerceptualLoss, depth_weights, lpl_loss, per_sample_lpl,
                         standardize_shared, total_loss)
from lpl_lab.outliers import mask_pyramid
from oracles import lpl_gradient_check


def hand_pair():
    phi_hat = torch.tensor([[[[1.0, 3.0], [1.0, 3.0]]]])
    phi = torch.full((1, 1, 2, 2), 2.0)
    return phi, phi_hat


class TestDepthWeights:
    def test_inverse_upscale(self):
        assert depth_weights([16, 32, 64, 64]) == [1.0, 0.5, 0.25, 0.25]

    def test_uniform_and_single(self):
        assert depth_weights([16, 32, 64, 64], "uniform") == [1.0] * 4
        assert depth_weights([16]) == [1.0]
        assert depth_weights([16], "uniform") == [1.0]

    def test_literal_exponent(self):
        assert depth_weights([16, 32, 64, 64], "literal_exponent") == [0.5, 0.25, 2**-4, 2**-4]

    def test_errors(self):
        with pytest.raises(ConfigError):
            depth_weights([32, 16])
        with pytest.raises(ConfigError):
            depth_weights([16], "bogus")


class TestStandardize:
    def test_hand_example(self):
        phi, phi_hat = hand_pair()
        a, b = standardize_shared(phi, phi_hat)
        np.testing.assert_array_equal(a.numpy(), np.zeros((1, 1, 2, 2)))
        np.testing.assert_array_equal(b.numpy(), [[[[-1.0, 1.0], [-1.0, 1.0]]]])

    def test_identical_inputs(self, rng):
        x = torch.from_numpy(rng.standard_normal((2, 3, 5, 5)))
        a, b = standardize_shared(x, x.clone())
        assert torch.equal(a, b)

    def test_constant_channel_floored(self):
        x = torch.full((1, 1, 4, 4), 7.0)
        a, b = standardize_shared(x + 1.0, x)
        assert torch.isfinite(a).all() and torch.isfinite(b).all()
        np.testing.assert_allclose(a.numpy(), 1e6)

    def test_masked_statistics(self):
        phi_hat = torch.tensor([[[[1.0, 3.0], [1.0, 500.0]]]])
        mask = torch.tensor([[[[1.0, 1.0], [1.0, 0.0]]]])
        _, b = standardize_shared(phi_hat, phi_hat, mask)
        mu = 5.0 / 3.0
        sd = np.sqrt(((1 - mu) ** 2 * 2 + (3 - mu) ** 2) / 3)
        np.testing.assert_allclose(b[0, 0, 0, 1].item(), (3 - mu) / sd, rtol=1e-6)

    def test_empty_channel_counted(self, rng):
        x = torch.from_numpy(rng.standard_normal((2, 3, 4, 4)))
        mask = torch.ones_like(x)
        mask[1, 2] = 0
        diag = {}
        per_sample, _ = per_sample_lpl([x + 1], [x], [mask], [1.0], diagnostics=diag)
        assert diag["empty_channels"] == 1
        assert torch.isfinite(per_sample).all()

    def test_shape_mismatch(self):
        with pytest.raises(ConfigError):
            standardize_shared(torch.zeros(1, 1, 2, 2), torch.zeros(1, 1, 3, 3))


class TestLoss:
    def test_hand_value(self):
        phi, phi_hat = hand_pair()
        assert lpl_loss([phi], [phi_hat], weights=[1.0]).item() == 1.0

    def test_gate_off_is_zero(self):
        phi, phi_hat = hand_pair()
        assert lpl_loss([phi], [phi_hat], gate_flags=[False]).item() == 0.0

    def test_gated_samples_count_in_mean(self):
        phi, phi_hat = hand_pair()
        phi2, phi_hat2 = torch.cat([phi, phi]), torch.cat([phi_hat, phi_hat])
        assert lpl_loss([phi2], [phi_hat2], gate_flags=[True, False]).item() == 0.5

    def test_zero_at_truth(self, ae, small_latents):
        pyr, _ = ae.decode_with_taps(small_latents[:4])
        pyr2, _ = ae.decode_with_taps(small_latents[:4].clone())
        masks = mask_pyramid(pyr2)
        for policy in ("prose_inverse_upscale", "uniform", "literal_exponent"):
            w = depth_weights(pyr.resolutions, policy)
            assert lpl_loss(pyr, pyr2, masks, w).item() == 0.0

    def test_total_loss(self):
        assert total_loss(2.0, 0.5, 0.0) == 2.0
        assert total_loss(2.0, 0.0, 3.0) == 2.0
        assert total_loss(2.0, 0.5, 3.0) == 3.5

    def test_per_layer_sums_to_total(self, ae, small_latents):
        z = small_latents[:3]
        pyr, _ = ae.decode_with_taps(z)
        pyr_hat, _ = ae.decode_with_taps(z + 0.3)
        loss, per_layer = lpl_loss(pyr, pyr_hat, return_per_layer=True)
        np.testing.assert_allclose(per_layer.sum().item(), loss.item(), rtol=1e-6)

    def test_non_finite_names_layer(self, rng):
        x = torch.from_numpy(rng.standard_normal((1, 2, 4, 4)))
        bad = x.clone()
        bad[0, 1, 0, 0] = float("nan")
        with pytest.raises(NumericalError, match="layer 2, channel 1"):
            lpl_loss([x, x], [x, bad])


class TestGradients:
    @pytest.mark.parametrize("detach", [False, True])
    def test_finite_difference(self, ae, detach):
        assert lpl_gradient_check(ae, seed=1, detach_stats=detach) < 1e-3

    def test_single_precision(self, ae):
        gen = torch.Generator().manual_seed(0)
        z0 = torch.randn(1, 4, 16, 16, generator=gen)
        z = (z0 + 0.5 * torch.randn(z0.shape, generator=gen)).requires_grad_(True)
        with torch.no_grad():
            phi, _ = ae.decode_with_taps(z0)
            masks = mask_pyramid(ae.decode_with_taps(z)[0]).masks
        loss = lpl_loss(phi, ae.decode_with_taps(z)[0], masks, detach_stats=False)
        (g,) = torch.autograd.grad(loss, z)
        idx = [5, 300, 777]
        for c in idx:
            zp, zm = z.detach().clone(), z.detach().clone()
            zp.view(-1)[c] += 1e-2
            zm.view(-1)[c] -= 1e-2
            with torch.no_grad():
                fp = lpl_loss(phi, ae.decode_with_taps(zp)[0], masks, detach_stats=False)
                fm = lpl_loss(phi, ae.decode_with_taps(zm)[0], masks, detach_stats=False)
            fd = (fp - fm).item() / 2e-2
            assert abs(fd - g.view(-1)[c].item()) <= 1e-2 * max(abs(fd), 1e-4)

    def test_gate_zeroes_gradient(self, ae, small_latents):
        z0 = small_latents[:4]
        z_hat = (z0 + 0.4).requires_grad_(True)
        crit = LatentPerceptualLoss(ae)
        loss, info = crit(z0, z_hat, torch.tensor([True, False, True, False]))
        loss.backward()
        assert info["gated_fraction"] == 0.5
        assert torch.count_nonzero(z_hat.grad[1]) == 0
        assert torch.count_nonzero(z_hat.grad[3]) == 0
        assert torch.count_nonzero(z_hat.grad[0]) > 0

    def test_all_gated_off(self, ae, small_latents):
        z_hat = small_latents[:2].clone().requires_grad_(True)
        loss, info = LatentPerceptualLoss(ae)(small_latents[:2], z_hat, [False, False])
        loss.backward()
        assert loss.item() == 0.0
        assert torch.count_nonzero(z_hat.grad) == 0
        assert info["per_layer"] == [0.0] * 4


class TestMaskEffectiveness:
    def _pyramids(self, ae, small_latents):
        z0 = small_latents[:2]
        with torch.no_grad():
            phi, _ = ae.decode_with_taps(z0)
            phi_hat, _ = ae.decode_with_taps(z0 + 0.3)
        spiked = [f.clone() for f in phi_hat.features]
        scale = spiked[1][0, 5].std()
        spiked[1][0, 5, 11, 17] += 1000.0 * scale
        return phi, phi_hat.features, spiked

    def test_masked_spike_has_no_effect(self, ae, small_latents):
        phi, clean, spiked = self._pyramids(ae, small_latents)
        masks = mask_pyramid(spiked)
        assert masks.masks[1][0, 5, 11, 17] == 0
        a = lpl_loss(phi, clean, masks).item()
        b = lpl_loss(phi, spiked, masks).item()
        assert abs(a - b) < 1e-6

    def test_unmasked_spike_changes_loss(self, ae, small_latents):
        phi, clean, spiked = self._pyramids(ae, small_latents)
        a = lpl_loss(phi, clean).item()
        b = lpl_loss(phi, spiked).item()
        assert b != a and abs(b - a) > 0


class TestModule:
    def test_matches_functional(self, ae, small_latents):
        z0 = small_latents[:3]
        z_hat = z0 + 0.2
        loss, info = LatentPerceptualLoss(ae)(z0, z_hat)
        with torch.no_grad():
            phi, _ = ae.decode_with_taps(z0)
            phi_hat, _ = ae.decode_with_taps(z_hat)
        ref = lpl_loss(phi, phi_hat, mask_pyramid(phi_hat))
        np.testing.assert_allclose(loss.item(), ref.item(), rtol=1e-6)
        np.testing.assert_allclose(sum(info["per_layer"]), ref.item(), rtol=1e-5)

    def test_num_taps(self, ae, small_latents):
        _, info = LatentPerceptualLoss(ae, num_taps=2)(small_latents[:2], small_latents[:2] + 0.1)
        assert len(info["per_layer"]) == 2
        with pytest.raises(ConfigError):
            LatentPerceptualLoss(ae, num_taps=5)
        with pytest.raises(ConfigError):
            LatentPerceptualLoss(ae, weight_policy="x")
