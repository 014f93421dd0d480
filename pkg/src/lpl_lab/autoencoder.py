"""Small deterministic convolutional autoencoder with decoder feature taps.

Images of size ``H x H x 3`` map to ``H/4 x H/4 x 4`` latents. The decoder is
split into four tap blocks whose post-activation outputs form the feature
pyramid used by the perceptual loss::

    latent (r) -> block1 (r, 64) -> block2 (2r, 64) -> block3 (4r, 32)
               -> block4 (4r, 32) -> conv -> tanh -> image
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, NumericalError

log = logging.getLogger(__name__)

DOWNSAMPLE = 4


@dataclass
class FeaturePyramid:
    features: list[torch.Tensor]

    @property
    def resolutions(self) -> list[int]:
        return [f.shape[-1] for f in self.features]

    @property
    def channels(self) -> list[int]:
        return [f.shape[1] for f in self.features]

    def __len__(self):
        return len(self.features)

    def __getitem__(self, idx):
        return self.features[idx]

    def select(self, index) -> "FeaturePyramid":
        return FeaturePyramid([f[index] for f in self.features])


class Encoder(nn.Module):
    def __init__(self, widths=(32, 64), latent_channels=4):
        super().__init__()
        w1, w2 = widths
        self.net = nn.Sequential(
            nn.Conv2d(3, w1, 3, padding=1), nn.SiLU(),
            nn.Conv2d(w1, w1, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(w1, w2, 3, padding=1), nn.SiLU(),
            nn.Conv2d(w2, w2, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(w2, latent_channels, 3, padding=1),
        )

    def forward(self, x):
        return self.net(x)


class Decoder(nn.Module):
    """Four tap blocks; ``upsample`` marks the blocks that double the resolution."""

    upsample = (False, True, True, False)

    def __init__(self, widths=(64, 64, 32, 32), latent_channels=4):
        super().__init__()
        blocks = []
        c_in = latent_channels
        for i, c in enumerate(widths):
            layers = [nn.Conv2d(c_in, c, 3, padding=1), nn.SiLU()]
            if i == 0:
                layers += [nn.Conv2d(c, c, 3, padding=1), nn.SiLU()]
            blocks.append(nn.Sequential(*layers))
            c_in = c
        self.blocks = nn.ModuleList(blocks)
        self.out = nn.Conv2d(c_in, 3, 3, padding=1)

    def forward(self, z, taps: bool = False, num_taps: int | None = None):
        feats = []
        h = z
        for up, block in zip(self.upsample, self.blocks):
            if up:
                h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = block(h)
            feats.append(h)
            if taps and num_taps is not None and len(feats) == num_taps:
                return feats, None
        img = torch.tanh(self.out(h))
        return (feats, img) if taps else img


class Autoencoder(nn.Module):
    def __init__(self, enc_widths=(32, 64), dec_widths=(64, 64, 32, 32), latent_channels=4):
        super().__init__()
        self.encoder = Encoder(enc_widths, latent_channels)
        self.decoder = Decoder(dec_widths, latent_channels)
        self.latent_channels = latent_channels
        self.register_buffer("latent_scale", torch.ones((), dtype=torch.float32))
        self.frozen = False

    def freeze(self):
        self.frozen = True
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)
        return self

    def _check_image(self, x):
        if x.ndim != 4 or x.shape[1] != 3 or x.shape[-1] % DOWNSAMPLE or x.shape[-2] % DOWNSAMPLE:
            raise ConfigError(f"expected images (N, 3, H, W) with H, W divisible by "
                              f"{DOWNSAMPLE}, got {tuple(x.shape)}")

    def _check_latent(self, z):
        if z.ndim != 4 or z.shape[1] != self.latent_channels:
            raise ConfigError(f"expected latents (N, {self.latent_channels}, r, r), "
                              f"got {tuple(z.shape)}")

    def encode(self, x):
        self._check_image(x)
        return self.encoder(x) * self.latent_scale.to(x.dtype)

    def decode(self, z):
        self._check_latent(z)
        return self.decoder(z / self.latent_scale.to(z.dtype))

    def decode_with_taps(self, z, num_taps: int | None = None):
        """Decode and return ``(FeaturePyramid, image)``.

        With ``num_taps`` set, decoding stops after that many blocks and the
        image is ``None``.
        """
        self._check_latent(z)
        feats, img = self.decoder(z / self.latent_scale.to(z.dtype), taps=True,
                                  num_taps=num_taps)
        return FeaturePyramid(feats), img

    def forward(self, x):
        return self.decode(self.encode(x))


def parameter_checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


@torch.no_grad()
def encode_batched(ae: Autoencoder, images, batch: int = 256) -> torch.Tensor:
    x = torch.as_tensor(images)
    out = [ae.encode(x[i:i + batch]) for i in range(0, len(x), batch)]
    return torch.cat(out)


@torch.no_grad()
def decode_batched(ae: Autoencoder, latents, batch: int = 256) -> torch.Tensor:
    out = [ae.decode(latents[i:i + batch]) for i in range(0, len(latents), batch)]
    return torch.cat(out)


def images_to_tensor(images: np.ndarray) -> torch.Tensor:
    """(N, H, W, 3) float array in [-1, 1] -> (N, 3, H, W) float32 tensor."""
    return torch.from_numpy(np.ascontiguousarray(images.transpose(0, 3, 1, 2))).float()


def tensor_to_images(x: torch.Tensor) -> np.ndarray:
    return x.detach().cpu().numpy().transpose(0, 2, 3, 1)


def train_autoencoder(images: np.ndarray, steps: int = 10000, batch: int = 32,
                      lr: float = 2e-3, latent_reg: float = 1e-6, holdout: float = 0.1,
                      seed: int = 0, enc_widths=(32, 64), dec_widths=(64, 64, 32, 32),
                      latent_channels: int = 4, log_every: int = 500, history=None):
    """Train on ``images`` (N, H, W, 3) and return ``(frozen model, report)``.

    The loss is pixel MSE plus ``latent_reg * mean(z**2)``. After training the
    latent scale is set so corpus latents have unit standard deviation.
    """
    if images.shape[1] % DOWNSAMPLE:
        raise ConfigError(f"resolution {images.shape[1]} not divisible by {DOWNSAMPLE}")
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    x_all = images_to_tensor(images)
    n_hold = int(round(len(x_all) * holdout))
    perm = torch.randperm(len(x_all), generator=gen)
    x_hold, x_train = x_all[perm[:n_hold]], x_all[perm[n_hold:]]

    ae = Autoencoder(enc_widths, dec_widths, latent_channels)
    opt = torch.optim.Adam(ae.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda s: 0.5 * (1 + math.cos(math.pi * min(s / max(steps, 1), 1.0))))
    for step in range(1, steps + 1):
        idx = torch.randint(len(x_train), (min(batch, len(x_train)),), generator=gen)
        x = x_train[idx]
        z = ae.encoder(x)
        rec = ae.decoder(z)
        loss = F.mse_loss(rec, x) + latent_reg * (z ** 2).mean()
        if not torch.isfinite(loss):
            raise NumericalError(f"autoencoder loss became non-finite at step {step}: "
                                 f"latent std {float(z.std()):.3g}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
        if history is not None:
            history.append(float(loss.detach()))
        if log_every and step % log_every == 0:
            log.info("ae step %d loss %.5f", step, float(loss.detach()))

    ae.freeze()
    with torch.no_grad():
        z_all = encode_batched(ae, x_all)
        ae.latent_scale.fill_(1.0 / float(z_all.std()))
        report = {
            "train_mse": _mse(ae, x_train),
            "holdout_mse": _mse(ae, x_hold) if n_hold else float("nan"),
            "latent_std": float(encode_batched(ae, x_all).std()),
            "latent_scale": float(ae.latent_scale),
            "steps": steps,
        }
    return ae, report


def _mse(ae, x, batch=256):
    total = 0.0
    for i in range(0, len(x), batch):
        xb = x[i:i + batch]
        total += float(((ae(xb) - xb) ** 2).sum())
    return total / x.numel()
