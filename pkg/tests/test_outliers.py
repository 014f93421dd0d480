import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from lpl_lab.errors import ConfigError
from lpl_lab.outliers import (detect_outliers, kth_indices, layer_down_factors, mask_pyramid,
                              rescale_kernels, save_mask_png)
from oracles import oracle_mask


def spiked_map(rng, size=32, value=None):
    f = rng.standard_normal((size, size))
    i, j = rng.integers(size, size=2)
    f[i, j] = value if value is not None else rng.choice([-1, 1]) * rng.uniform(100, 1000)
    return f, (i, j)


class TestKernelRules:
    def test_rescale_examples(self):
        assert rescale_kernels(1) == (5, 3)
        assert rescale_kernels(2) == (3, 1)  # 3 -> 3, 2 -> 1 (closing)
        assert rescale_kernels(4) == (3, 1)  # 2 -> 3 (opening), 1
        assert rescale_kernels(8) == (1, 1)

    def test_kth_indices(self):
        assert kth_indices(100, 0.02) == (2, 98)
        assert kth_indices(10, 0.02) == (1, 9)
        assert kth_indices(1024, 0.02) == (20, 1003)

    def test_kernel_too_large(self):
        with pytest.raises(ConfigError):
            detect_outliers(torch.zeros(4, 4), 1)

    @pytest.mark.parametrize("quant", [0.0, 0.5, -0.1])
    def test_bad_quant(self, quant):
        with pytest.raises(ConfigError):
            detect_outliers(torch.zeros(8, 8), 1, quant=quant)

    def test_even_kernel_rejected(self):
        with pytest.raises(ConfigError):
            detect_outliers(torch.zeros(8, 8), 1, opening=4)

    def test_down_factors(self):
        assert layer_down_factors([16, 32, 64, 64]) == [4.0, 2.0, 1.0, 1.0]
        assert layer_down_factors([32, 64, 128, 128], 128, 64) == [2.0, 1.0, 0.5, 0.5]


class TestAgainstOracle:
    @pytest.mark.parametrize("down_f", [1, 2, 4])
    def test_random_maps(self, rng, down_f):
        for _ in range(10):
            f, _ = spiked_map(rng)
            f[rng.integers(32), :3] = 50.0
            mask, _ = detect_outliers(torch.from_numpy(f), down_f)
            np.testing.assert_array_equal(mask.numpy(), oracle_mask(f, down_f))

    def test_batched_equals_per_map(self, rng):
        f = rng.standard_normal((2, 3, 16, 16))
        f[0, 1, 4, 4] = 300
        mask, masked = detect_outliers(torch.from_numpy(f), 2)
        for b in range(2):
            for c in range(3):
                np.testing.assert_array_equal(mask[b, c].numpy(), oracle_mask(f[b, c], 2))
        np.testing.assert_array_equal(masked.numpy(), f * mask.numpy())

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1), down_f=st.sampled_from([1, 2, 4]),
           size=st.integers(6, 20))
    def test_property_matches_oracle(self, seed, down_f, size):
        rng = np.random.default_rng(seed)
        f = rng.standard_normal((size, size)) * rng.uniform(0.1, 10)
        f[rng.random((size, size)) < 0.03] *= 200
        mask, _ = detect_outliers(torch.from_numpy(f), down_f)
        np.testing.assert_array_equal(mask.numpy(), oracle_mask(f, down_f))


class TestSpikes:
    def test_spike_masked_down2(self, rng):
        for _ in range(100):
            f, (i, j) = spiked_map(rng)
            mask, _ = detect_outliers(torch.from_numpy(f), 2)
            m = mask.numpy()
            assert m[i, j] == 0
            inliers = np.ones_like(m, dtype=bool)
            inliers[i, j] = False
            assert m[inliers].mean() >= 0.95

    def test_single_spike_closed_at_down1(self, rng):
        # with the full 3-wide closing window a lone hole is refilled before the opening pass
        f, (i, j) = spiked_map(rng, value=1000.0)
        mask, _ = detect_outliers(torch.from_numpy(f), 1)
        np.testing.assert_array_equal(mask.numpy(), oracle_mask(f, 1))
        assert mask[i, j] == 1

    def test_blob_masked_down1(self, rng):
        f = rng.standard_normal((32, 32))
        f[10:13, 20:23] = 1000.0
        mask, _ = detect_outliers(torch.from_numpy(f), 1)
        assert mask[10:13, 20:23].sum() == 0

    def test_monotone_in_magnitude(self, rng):
        f, (i, j) = spiked_map(rng, value=100.0)
        for v in (100.0, 300.0, 1e4, 1e8):
            f[i, j] = v
            assert detect_outliers(torch.from_numpy(f), 2)[0][i, j] == 0

    def test_clean_map_mostly_kept(self, rng):
        for down_f in (1, 2):
            for _ in range(20):
                f = rng.standard_normal((32, 32))
                assert detect_outliers(torch.from_numpy(f), down_f)[0].mean() >= 0.9

    def test_constant_map(self):
        f = torch.full((32, 32), 3.25)
        mask, masked = detect_outliers(f, 1)
        assert bool((mask == 1).all())
        assert torch.equal(masked, f)

    def test_all_ones_mask_bitwise(self, rng):
        f = torch.from_numpy(rng.standard_normal((16, 16)) * 0.01)
        mask, masked = detect_outliers(f, 1)
        assert bool((mask == 1).all())
        assert torch.equal(masked, f)


class TestPyramid:
    def test_mask_pyramid_shapes(self, ae, small_latents):
        pyr, _ = ae.decode_with_taps(small_latents[:2])
        masks = mask_pyramid(pyr)
        assert [m.shape for m in masks.masks] == [f.shape for f in pyr.features]
        assert masks.down_f == [4.0, 2.0, 1.0, 1.0]
        assert all(0.0 <= k <= 1.0 for k in masks.kept_fraction())
        for m in masks.masks:
            assert set(torch.unique(m).tolist()) <= {0.0, 1.0}

    def test_png_dump(self, ae, small_latents, tmp_path):
        pyr, _ = ae.decode_with_taps(small_latents[:1])
        path = save_mask_png(mask_pyramid(pyr), tmp_path / "m.png")
        assert path.stat().st_size > 0
