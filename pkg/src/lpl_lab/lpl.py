"""Latent perceptual loss on frozen-decoder features.

For a clean latent ``z0`` and a recovered latent ``z0_hat`` both are decoded
through the frozen decoder, and per tap ``l`` the loss adds::

    w_l * mean_{c, h, w} [ rho * (phi' - phi_hat') ** 2 ]

where ``phi'`` and ``phi_hat'`` are standardised with per-channel statistics
taken from ``phi_hat`` over the positions kept by the outlier mask ``rho``.
Samples whose noise-to-signal ratio exceeds the threshold contribute 0, and
the batch value is the mean over all samples, gated or not.
"""

from __future__ import annotations

import torch

from .errors import ConfigError, NumericalError
from .outliers import layer_down_factors, mask_pyramid

WEIGHT_POLICIES = ("prose_inverse_upscale", "uniform", "literal_exponent")


def depth_weights(resolutions, policy: str = "prose_inverse_upscale") -> list[float]:
    """Per-tap weights.

    ``prose_inverse_upscale`` halves the weight per resolution doubling
    (``r_1 / r_l``); ``literal_exponent`` evaluates ``2 ** (-r_l / r_1)``.
    """
    r1 = resolutions[0]
    if any(r < r1 for r in resolutions):
        raise ConfigError("the first tap must have the lowest resolution")
    if policy == "prose_inverse_upscale":
        return [r1 / r for r in resolutions]
    if policy == "uniform":
        return [1.0] * len(resolutions)
    if policy == "literal_exponent":
        return [2.0 ** (-r / r1) for r in resolutions]
    raise ConfigError(f"unknown weight policy {policy!r}")


def standardize_shared(phi, phi_hat, mask=None, std_floor: float = 1e-6,
                       detach_stats: bool = True, diagnostics: dict | None = None):
    """Standardise both maps with the (masked) statistics of ``phi_hat``.

    Shapes are ``(B, C, H, W)``; statistics are per sample and per channel,
    using the population variance. A channel whose mask is empty gets zero
    mean and unit scale and is counted in ``diagnostics['empty_channels']``.
    """
    if phi.shape != phi_hat.shape:
        raise ConfigError(f"feature shapes differ: {tuple(phi.shape)} vs {tuple(phi_hat.shape)}")
    ref = phi_hat.detach() if detach_stats else phi_hat
    if mask is None:
        mu = ref.mean((-2, -1), keepdim=True)
        var = ((ref - mu) ** 2).mean((-2, -1), keepdim=True)
    else:
        count = mask.sum((-2, -1), keepdim=True)
        empty = count == 0
        if diagnostics is not None:
            diagnostics["empty_channels"] = diagnostics.get("empty_channels", 0) + int(empty.sum())
        denom = count.clamp_min(1)
        mu = (ref * mask).sum((-2, -1), keepdim=True) / denom
        var = (((ref - mu) * mask) ** 2).sum((-2, -1), keepdim=True) / denom
        var = torch.where(empty, torch.ones_like(var), var)
    scale = var.clamp_min(std_floor ** 2).sqrt()
    return (phi - mu) / scale, (phi_hat - mu) / scale


def _check_finite(feats, which):
    for l, f in enumerate(feats):
        bad = ~torch.isfinite(f)
        if bad.any():
            channel = int(bad.nonzero()[0, 1])
            raise NumericalError(f"non-finite {which} features at layer {l + 1}, channel {channel}")


def per_sample_lpl(phi, phi_hat, masks=None, weights=None, std_floor: float = 1e-6,
                   detach_stats: bool = True, diagnostics: dict | None = None):
    """Return ``(per_sample [B], per_layer [B, L])`` loss terms."""
    phi = list(getattr(phi, "features", phi))
    phi_hat = list(getattr(phi_hat, "features", phi_hat))
    if len(phi) != len(phi_hat):
        raise ConfigError("pyramids have different depths")
    _check_finite(phi, "target")
    _check_finite(phi_hat, "predicted")
    if masks is not None:
        masks = list(getattr(masks, "masks", masks))
    if weights is None:
        weights = depth_weights([f.shape[-1] for f in phi])
    terms = []
    for l, (a, b) in enumerate(zip(phi, phi_hat)):
        m = None if masks is None else masks[l]
        a_n, b_n = standardize_shared(a, b, m, std_floor, detach_stats, diagnostics)
        diff = a_n - b_n if m is None else m * (a_n - b_n)
        terms.append(weights[l] * (diff ** 2).mean((1, 2, 3)))
    per_layer = torch.stack(terms, dim=1)
    return per_layer.sum(1), per_layer


def lpl_loss(phi, phi_hat, masks=None, weights=None, gate_flags=None,
             std_floor: float = 1e-6, detach_stats: bool = True, return_per_layer: bool = False):
    """Batch LPL value: mean over samples, gated-off samples counting as 0."""
    per_sample, per_layer = per_sample_lpl(phi, phi_hat, masks, weights, std_floor, detach_stats)
    if gate_flags is not None:
        g = torch.as_tensor(gate_flags, dtype=torch.bool, device=per_sample.device)
        per_sample = torch.where(g, per_sample, torch.zeros_like(per_sample))
        per_layer = torch.where(g[:, None], per_layer, torch.zeros_like(per_layer))
    loss = per_sample.mean()
    return (loss, per_layer.mean(0)) if return_per_layer else loss


def total_loss(l_diff, l_lpl, w_lpl: float):
    return l_diff + w_lpl * l_lpl


class LatentPerceptualLoss:
    """Decode-and-compare helper bound to a frozen autoencoder.

    Only gated samples are decoded. The clean branch runs without gradient.
    """

    def __init__(self, ae, weight_policy: str = "prose_inverse_upscale", num_taps: int = 4,
                 use_mask: bool = True, quant: float = 0.02, opening: int = 5, closing: int = 3,
                 std_floor: float = 1e-6, detach_stats: bool = True,
                 image_resolution: int | None = None, base_resolution: int | None = None):
        if weight_policy not in WEIGHT_POLICIES:
            raise ConfigError(f"unknown weight policy {weight_policy!r}")
        if not 1 <= num_taps <= len(ae.decoder.blocks):
            raise ConfigError(f"num_taps must be in 1..{len(ae.decoder.blocks)}")
        self.ae = ae
        self.weight_policy = weight_policy
        self.num_taps = num_taps
        self.use_mask = use_mask
        self.quant, self.opening, self.closing = quant, opening, closing
        self.std_floor = std_floor
        self.detach_stats = detach_stats
        self.image_resolution = image_resolution
        self.base_resolution = base_resolution
        self.last_masks = None

    def _taps(self, z):
        pyr, _ = self.ae.decode_with_taps(z, num_taps=self.num_taps)
        return pyr

    def __call__(self, z0, z0_hat, gate_flags=None):
        """Return ``(loss, info)`` with ``info['per_layer']`` a length-``num_taps`` list."""
        batch = z0_hat.shape[0]
        if gate_flags is None:
            idx = torch.arange(batch)
        else:
            idx = torch.as_tensor(gate_flags, dtype=torch.bool).nonzero().flatten()
        info = {"gated_fraction": len(idx) / batch, "empty_channels": 0}
        if len(idx) == 0:
            info["per_layer"] = [0.0] * self.num_taps
            return (z0_hat * 0).sum(), info
        with torch.no_grad():
            phi = self._taps(z0[idx])
        phi_hat = self._taps(z0_hat[idx])
        masks = None
        if self.use_mask:
            down = layer_down_factors(phi_hat.resolutions, self.image_resolution,
                                      self.base_resolution)
            masks = mask_pyramid(phi_hat, self.opening, self.closing, self.quant, down)
            self.last_masks = masks
        weights = depth_weights(phi_hat.resolutions, self.weight_policy)
        per_sample, per_layer = per_sample_lpl(phi, phi_hat, masks, weights, self.std_floor,
                                               self.detach_stats, info)
        info["per_layer"] = [float(v) / batch for v in per_layer.detach().sum(0)]
        return per_sample.sum() / batch, info
