"""Deterministic samplers with classifier-free guidance.

DDPM models (``eps`` and ``v``) are sampled with DDIM at eta = 0 over an
evenly spaced subset of the training steps; flow models are integrated with
explicit Euler from ``t = 1`` down to ``t = 0``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import diffusion as dc
from .errors import ConfigError


@dataclass
class SampleRequest:
    count: int = 64
    labels: list[int] | None = None
    guidance: float = 1.5
    steps: int = 50
    seed: int = 0
    use_ema: bool = True
    batch: int = 64
    latent_shape: tuple[int, int, int] = (4, 16, 16)

    def __post_init__(self):
        if self.count < 1:
            raise ConfigError("count must be >= 1")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.guidance < 0:
            raise ConfigError("guidance must be >= 0")
        if self.batch < 1:
            raise ConfigError("batch must be >= 1")
        if self.labels is not None and len(self.labels) != self.count:
            raise ConfigError(f"got {len(self.labels)} labels for {self.count} samples")

    def class_labels(self, num_classes: int) -> torch.Tensor:
        """Explicit labels, or the classes cycled in order."""
        if self.labels is not None:
            return torch.as_tensor(self.labels, dtype=torch.long)
        return torch.arange(self.count) % num_classes

    def initial_noise(self) -> torch.Tensor:
        gen = torch.Generator().manual_seed(self.seed)
        return torch.randn((self.count, *self.latent_shape), generator=gen)


def guided_prediction(model, z_t, t_model, condition, guidance: float):
    """``pred_null + guidance * (pred_cond - pred_null)``.

    ``guidance == 1`` evaluates only the conditional branch and ``guidance == 0``
    only the null branch, so those paths never see the other branch.
    """
    null = torch.full_like(condition, model.null_class)
    if guidance == 1.0:
        return model(z_t, t_model, condition)
    if guidance == 0.0:
        return model(z_t, t_model, null)
    pred_cond = model(z_t, t_model, condition)
    pred_null = model(z_t, t_model, null)
    return pred_null + guidance * (pred_cond - pred_null)


def ddim_timesteps(T: int, steps: int) -> np.ndarray:
    """Descending, evenly spaced integer steps from ``T`` down to 1."""
    if steps > T:
        raise ConfigError(f"steps ({steps}) exceeds the schedule length T={T}")
    if steps == 1:
        return np.array([T])
    ts = np.round(np.linspace(1, T, steps)).astype(np.int64)
    return ts[::-1].copy()


def _batches(request: SampleRequest, z, labels):
    for lo in range(0, request.count, request.batch):
        yield z[lo:lo + request.batch], labels[lo:lo + request.batch]


@torch.no_grad()
def ddim_sample(model, schedule: dc.NoiseSchedule, kind: str, request: SampleRequest,
                z_T: torch.Tensor | None = None) -> torch.Tensor:
    """Deterministic DDIM; the last step jumps straight to the clean estimate."""
    if not schedule.discrete:
        raise ConfigError("DDIM needs a discrete DDPM schedule")
    if kind not in ("eps", "v"):
        raise ConfigError(f"DDIM samples eps or v models, not {kind!r}")
    ts = ddim_timesteps(schedule.T, request.steps)
    z = request.initial_noise() if z_T is None else z_T
    labels = request.class_labels(getattr(model, "num_classes", 1))
    out = []
    for zb, yb in _batches(request, z, labels):
        for i, t in enumerate(ts):
            tb = torch.full((zb.shape[0],), int(t), dtype=torch.long)
            pred = guided_prediction(model, zb, dc.model_time(kind, tb), yb, request.guidance)
            x0 = dc.recover_x0(kind, zb, pred, tb, schedule)
            if i == len(ts) - 1:
                zb = x0
                break
            alpha, sigma = schedule.alpha_sigma(tb)
            a, s = dc.broadcast_like(alpha, zb), dc.broadcast_like(sigma, zb)
            eps_hat = (zb - a * x0) / s
            a_next, s_next = schedule.alpha_sigma(torch.full_like(tb, int(ts[i + 1])))
            zb = dc.broadcast_like(a_next, zb) * x0 + dc.broadcast_like(s_next, zb) * eps_hat
        out.append(zb)
    return torch.cat(out)


@torch.no_grad()
def euler_sample(model, request: SampleRequest, z1: torch.Tensor | None = None) -> torch.Tensor:
    """Explicit Euler on the velocity field with ``steps`` uniform steps of ``1/steps``."""
    z = request.initial_noise() if z1 is None else z1
    labels = request.class_labels(getattr(model, "num_classes", 1))
    dt = 1.0 / request.steps
    out = []
    for zb, yb in _batches(request, z, labels):
        for i in range(request.steps):
            t = torch.full((zb.shape[0],), 1.0 - i * dt, dtype=torch.float64)
            v = guided_prediction(model, zb, dc.model_time("flow", t), yb, request.guidance)
            zb = zb - dt * v
        out.append(zb)
    return torch.cat(out)


def sample_latents(model, schedule: dc.NoiseSchedule, kind: str,
                   request: SampleRequest) -> torch.Tensor:
    if kind == "flow":
        return euler_sample(model, request)
    return ddim_sample(model, schedule, kind, request)


@dataclass
class SamplesManifest:
    seed: int
    guidance: float
    steps: int
    count: int
    use_ema: bool
    checkpoint_id: str
    framework: str
    labels: list[int] = field(default_factory=list)

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(asdict(self), indent=2))
        return path
