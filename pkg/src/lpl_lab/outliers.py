"""Outlier masking for decoder feature maps.

Decoder activations of pretrained autoencoders occasionally contain small
patches whose magnitude is orders of magnitude above the rest of the map.
``detect_outliers`` flags them with a quantile threshold widened by twice the
map's standard deviation, then cleans the binary keep-mask with two sliding
window passes: a window maximum (``closing`` kernel), which fills small
holes, followed by a window minimum written as a negated maximum
(``opening`` kernel), which grows the remaining holes back. Windows are
truncated at the borders.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError


@dataclass
class OutlierMask:
    """Per-layer keep-maps (1 = keep) aligned with a feature pyramid."""

    masks: list[torch.Tensor]
    quant: float
    opening: int
    closing: int
    down_f: list[float]

    def kept_fraction(self) -> list[float]:
        return [float(m.float().mean()) for m in self.masks]


def rescale_kernels(down_f: float, opening: int = 5, closing: int = 3) -> tuple[int, int]:
    opening = int(math.ceil(opening / down_f))
    closing = int(math.ceil(closing / down_f))
    if opening == 2:
        opening = 3
    if closing == 2:
        closing = 1
    return opening, closing


def kth_indices(n: int, quant: float) -> tuple[int, int]:
    """1-based order-statistic indices for the lower and upper quantile."""
    k1 = min(max(int(n * quant), 1), n)
    k2 = min(max(int(n * (1.0 - quant)), 1), n)
    return k1, k2


def _window_max(mask: torch.Tensor, k: int) -> torch.Tensor:
    """Separable k x k sliding maximum; -inf padding truncates windows at the border.

    Same result as ``max_pool2d(mask, k, 1, (k - 1) // 2)``, several times
    faster on CPU because it avoids computing argmax indices.
    """
    if k == 1:
        return mask
    r = (k - 1) // 2
    h, w = mask.shape[-2:]
    padded = F.pad(mask, (r, r, r, r), value=float("-inf"))
    rows = padded[..., 0:h, :]
    for i in range(1, k):
        rows = torch.maximum(rows, padded[..., i:i + h, :])
    out = rows[..., 0:w]
    for j in range(1, k):
        out = torch.maximum(out, rows[..., j:j + w])
    return out


@torch.no_grad()
def detect_outliers(features: torch.Tensor, down_f: float = 1, opening: int = 5,
                    closing: int = 3, quant: float = 0.02):
    """Mask the outliers of every 2-D map in ``features``.

    ``features`` has shape ``(..., H, W)``; each trailing ``H x W`` slice is
    treated independently. Returns ``(mask, features * mask)`` where the mask
    has the dtype of ``features`` and values in {0, 1}.
    """
    if not 0.0 < quant < 0.5:
        raise ConfigError(f"quant must lie in (0, 0.5), got {quant}")
    if features.ndim < 2:
        raise ConfigError("detect_outliers expects maps of shape (..., H, W)")
    opening, closing = rescale_kernels(down_f, opening, closing)
    h, w = features.shape[-2:]
    for name, k in (("opening", opening), ("closing", closing)):
        if k > min(h, w):
            raise ConfigError(f"{name} kernel {k} larger than the {h}x{w} map")
        if k % 2 == 0:
            raise ConfigError(f"{name} kernel {k} is even; window would shift the map")

    lead = features.shape[:-2]
    maps = features.reshape(-1, 1, h, w)
    flat = maps.reshape(maps.shape[0], -1)
    k1, k2 = kth_indices(flat.shape[-1], quant)
    n = flat.shape[-1]
    # k-th smallest values; topk is faster than kthvalue here and returns the same statistic
    q1 = flat.topk(k1, dim=-1, largest=False).values[:, -1, None, None, None]
    q2 = flat.topk(n - k2 + 1, dim=-1, largest=True).values[:, -1, None, None, None]
    margin = 2.0 * flat.std(-1)[:, None, None, None]
    keep = ((q1 - margin <= maps) & (maps <= q2 + margin)).to(features.dtype)

    keep = _window_max(keep, closing)
    keep = -_window_max(-keep, opening)
    keep = keep.reshape(*lead, h, w)
    return keep, features * keep


def layer_down_factors(resolutions, image_resolution: int | None = None,
                       base_resolution: int | None = None) -> list[float]:
    """Kernel down-scaling factor per tap: 1 at the finest tap, 2 one octave below, ...

    When the images are larger than ``base_resolution`` the factors shrink by
    the same ratio so the kernels cover the same fraction of the image.
    """
    finest = max(resolutions)
    ratio = 1.0
    if image_resolution and base_resolution:
        ratio = base_resolution / image_resolution
    return [finest / r * ratio for r in resolutions]


def mask_pyramid(pyramid, opening: int = 5, closing: int = 3, quant: float = 0.02,
                 down_f=None) -> OutlierMask:
    """Compute keep-maps for every layer of a feature pyramid (no gradient)."""
    feats = pyramid.features if hasattr(pyramid, "features") else list(pyramid)
    if down_f is None:
        down_f = layer_down_factors([f.shape[-1] for f in feats])
    masks = [detect_outliers(f.detach(), d, opening, closing, quant)[0]
             for f, d in zip(feats, down_f)]
    return OutlierMask(masks, quant, opening, closing, list(down_f))


def save_mask_png(mask: OutlierMask, path, sample: int = 0, max_channels: int = 16) -> Path:
    """Tile the first channels of every layer's keep-map into one grayscale PNG."""
    from PIL import Image

    rows = []
    width = max(m.shape[-1] for m in mask.masks) * max_channels
    for m in mask.masks:
        tiles = m[sample, :max_channels].cpu().numpy()
        scale = max(m.shape[-1] for m in mask.masks) // tiles.shape[-1]
        tiles = np.kron(tiles, np.ones((1, scale, scale)))
        row = np.concatenate(list(tiles), axis=1)
        row = np.pad(row, ((0, 1), (0, width - row.shape[1])), constant_values=0.5)
        rows.append(row)
    img = (np.concatenate(rows, axis=0) * 255).astype(np.uint8)
    path = Path(path)
    Image.fromarray(img).save(path)
    return path
