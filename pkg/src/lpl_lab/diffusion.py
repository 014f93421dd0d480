"""Noise schedules, the forward process and clean-latent recovery.

Every framework is written as ``z_t = alpha_t * z_0 + sigma_t * eps``:

===========  =================  ====================  ==============================
framework    alpha_t            sigma_t               z_0 estimate
===========  =================  ====================  ==============================
eps (DDPM)   sqrt(abar_t)       sqrt(1 - abar_t)      (z_t - sigma_t * pred) / alpha_t
v (DDPM)     sqrt(abar_t)       sqrt(1 - abar_t)      alpha_t * z_t - sigma_t * pred
flow (OT)    1 - t              t                     z_t - sigma_t * pred
===========  =================  ====================  ==============================

Discrete timesteps are 1-based (``t = 1..T``); flow time lives in ``[0, 1]``.
The functions here accept numpy arrays or torch tensors and keep the type of
their latent inputs.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError, NumericalError

FRAMEWORKS = ("eps", "v", "flow")
SCHEDULE_KINDS = ("ddpm_discrete", "flow_ot")


@dataclass(frozen=True)
class NoiseSchedule:
    kind: str
    T: int
    betas: np.ndarray | None = None
    alphas_cumprod: np.ndarray | None = None
    zero_terminal: bool = False

    @property
    def discrete(self) -> bool:
        return self.kind == "ddpm_discrete"

    def alpha_sigma(self, t):
        """Return ``(alpha_t, sigma_t)`` with the same container type as ``t``."""
        if isinstance(t, torch.Tensor):
            if self.discrete:
                table = torch.as_tensor(self.alphas_cumprod, dtype=torch.float64)
                abar = table[t.long() - 1]
                return abar.sqrt(), (1.0 - abar).sqrt()
            t64 = t.to(torch.float64)
            return 1.0 - t64, t64
        t = np.asarray(t)
        if self.discrete:
            abar = self.alphas_cumprod[t.astype(np.int64) - 1]
            return np.sqrt(abar), np.sqrt(1.0 - abar)
        t = t.astype(np.float64)
        return 1.0 - t, t

    def table(self) -> dict[str, np.ndarray]:
        """Per-timestep columns for inspection (discrete) or a 1001-point grid (flow)."""
        if self.discrete:
            t = np.arange(1, self.T + 1)
            betas = self.betas
            abar = self.alphas_cumprod
        else:
            t = np.linspace(0.0, 1.0, 1001)
            betas = np.full_like(t, np.nan)
            abar = np.full_like(t, np.nan)
        alpha, sigma = self.alpha_sigma(t)
        return {"t": t, "beta": betas, "alpha_bar": abar, "alpha": alpha,
                "sigma": sigma, "nsr": nsr(self, t)}


def make_ddpm_schedule(T: int = 1000, beta_start: float = 0.00085,
                       beta_end: float = 0.012) -> NoiseSchedule:
    """Quadratic schedule: betas interpolate linearly in sqrt-space."""
    if T < 2:
        raise ConfigError(f"T must be >= 2, got {T}")
    if not 0.0 < beta_start < beta_end < 1.0:
        raise ConfigError(
            f"need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}")
    frac = np.arange(T, dtype=np.float64) / (T - 1)
    betas = (np.sqrt(beta_start) + frac * (np.sqrt(beta_end) - np.sqrt(beta_start))) ** 2
    # pin the endpoints; the sqrt/square round trip can be off by one ulp
    betas[0], betas[-1] = beta_start, beta_end
    return NoiseSchedule("ddpm_discrete", T, betas, np.cumprod(1.0 - betas))


def make_flow_schedule() -> NoiseSchedule:
    return NoiseSchedule("flow_ot", 1, zero_terminal=True)


def enforce_zero_terminal_snr(schedule: NoiseSchedule) -> NoiseSchedule:
    """Rescale sqrt(abar) affinely so the last step is pure noise.

    sqrt(abar_1) is kept fixed and sqrt(abar_T) is moved to exactly 0; betas
    are re-derived from the rescaled cumulative product.
    """
    if not schedule.discrete:
        raise ConfigError("zero terminal SNR rescaling applies to discrete DDPM schedules")
    root = np.sqrt(schedule.alphas_cumprod)
    first, last = root[0], root[-1]
    if first == last:
        raise ConfigError("degenerate schedule: sqrt(abar_1) == sqrt(abar_T)")
    root = (root - last) * (first / (first - last))
    abar = root ** 2
    alphas = np.empty_like(abar)
    alphas[0] = abar[0]
    alphas[1:] = abar[1:] / abar[:-1]
    return replace(schedule, betas=1.0 - alphas, alphas_cumprod=abar, zero_terminal=True)


def build_schedule(framework: str, T: int = 1000, beta_start: float = 0.00085,
                   beta_end: float = 0.012, zero_terminal: bool | None = None) -> NoiseSchedule:
    """Schedule for a framework; ``zero_terminal=None`` enables it for ``v`` only."""
    if framework not in FRAMEWORKS:
        raise ConfigError(f"unknown framework {framework!r}")
    if framework == "flow":
        return make_flow_schedule()
    if zero_terminal is None:
        zero_terminal = framework == "v"
    if zero_terminal and framework == "eps":
        raise ConfigError("eps-prediction cannot recover z_0 at a zero-SNR terminal step")
    schedule = make_ddpm_schedule(T, beta_start, beta_end)
    return enforce_zero_terminal_snr(schedule) if zero_terminal else schedule


def nsr(schedule: NoiseSchedule, t):
    """Noise-to-signal ratio sigma_t / alpha_t (``inf`` where alpha_t = 0)."""
    alpha, sigma = schedule.alpha_sigma(t)
    if isinstance(alpha, torch.Tensor):
        return torch.where(alpha > 0, sigma / alpha.clamp_min(1e-300),
                           torch.full_like(alpha, float("inf")))
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(alpha > 0, sigma / np.where(alpha > 0, alpha, 1.0), np.inf)


def gate(schedule: NoiseSchedule, t, tau_sigma: float):
    """True where the perceptual loss is active, i.e. ``nsr <= tau_sigma``."""
    return nsr(schedule, t) <= tau_sigma


def scale_threshold(tau_base: float, base_resolution: int, resolution: int) -> float:
    if base_resolution <= 0 or resolution <= 0:
        raise ConfigError("resolutions must be positive")
    return tau_base * (resolution / base_resolution)


def broadcast_like(coef, like):
    """Broadcast a per-sample coefficient against a batch of latents."""
    if isinstance(like, torch.Tensor):
        coef = torch.as_tensor(coef, dtype=like.dtype, device=like.device)
        return coef.reshape(coef.shape + (1,) * (like.ndim - coef.ndim))
    coef = np.asarray(coef, dtype=np.result_type(like, np.float64))
    return coef.reshape(coef.shape + (1,) * (np.ndim(like) - coef.ndim))


def add_noise(z0, eps, t, schedule: NoiseSchedule):
    alpha, sigma = schedule.alpha_sigma(t)
    return broadcast_like(alpha, z0) * z0 + broadcast_like(sigma, z0) * eps


def training_target(kind: str, z0, eps, t, schedule: NoiseSchedule):
    if kind == "eps":
        return eps
    if kind == "v":
        alpha, sigma = schedule.alpha_sigma(t)
        return broadcast_like(alpha, z0) * eps - broadcast_like(sigma, z0) * z0
    if kind == "flow":
        return eps - z0
    raise ConfigError(f"unknown framework {kind!r}")


def recover_x0(kind: str, z_t, prediction, t, schedule: NoiseSchedule):
    """Invert a denoiser prediction back to an estimate of the clean latent."""
    alpha, sigma = schedule.alpha_sigma(t)
    a, s = broadcast_like(alpha, z_t), broadcast_like(sigma, z_t)
    if kind == "eps":
        if bool((alpha == 0).any()) if isinstance(alpha, torch.Tensor) else np.any(alpha == 0):
            raise NumericalError("eps recovery is undefined where alpha_t = 0")
        return (z_t - s * prediction) / a
    if kind == "v":
        return a * z_t - s * prediction
    if kind == "flow":
        return z_t - s * prediction
    raise ConfigError(f"unknown framework {kind!r}")


def model_time(kind: str, t: torch.Tensor) -> torch.Tensor:
    """Value fed to the denoiser's time embedding: the step index, or 1000 * t for flow."""
    return t.float() * 1000.0 if kind == "flow" else t.float()


def diffusion_loss(prediction, target):
    return ((prediction - target) ** 2).mean()


def per_sample_loss(prediction, target):
    diff = (prediction - target) ** 2
    return diff.reshape(diff.shape[0], -1).mean(1)


def x0_loss_factor(schedule: NoiseSchedule, t):
    """(alpha_t / sigma_t)^2, the factor turning an x0-space MSE into the eps-space MSE."""
    alpha, sigma = schedule.alpha_sigma(t)
    return (alpha / sigma) ** 2


def posterior_params(schedule: NoiseSchedule, z0, z_t, t):
    """Mean and variance of q(z_{t-1} | z_t, z_0) for integer ``t >= 2``."""
    if not schedule.discrete:
        raise ConfigError("posterior parameters need a discrete schedule")
    t = np.asarray(t)
    if np.any(t < 2) or np.any(t > schedule.T):
        raise ConfigError("posterior parameters are defined for 2 <= t <= T")
    beta = schedule.betas[t - 1]
    abar = schedule.alphas_cumprod[t - 1]
    abar_prev = schedule.alphas_cumprod[t - 2]
    c0 = np.sqrt(abar_prev) * beta / (1.0 - abar)
    ct = np.sqrt(1.0 - beta) * (1.0 - abar_prev) / (1.0 - abar)
    mean = broadcast_like(c0, z0) * z0 + broadcast_like(ct, z_t) * z_t
    var = (1.0 - abar_prev) * beta / (1.0 - abar)
    return mean, var


def timestep_reweighting(gated, w_lpl: float, variance_ratio: float):
    """Loss weight ``1 + w_lpl * variance_ratio`` on gated timesteps, 1 elsewhere."""
    if variance_ratio < 0:
        raise ConfigError("variance_ratio must be >= 0")
    if isinstance(gated, torch.Tensor):
        return 1.0 + w_lpl * variance_ratio * gated.to(torch.float32)
    return 1.0 + w_lpl * variance_ratio * np.asarray(gated, dtype=np.float64)


def export_schedule_csv(schedule: NoiseSchedule, path) -> Path:
    path = Path(path)
    cols = schedule.table()
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "beta", "alpha_bar", "alpha", "sigma", "nsr"])
        for row in zip(cols["t"], cols["beta"], cols["alpha_bar"], cols["alpha"],
                       cols["sigma"], cols["nsr"]):
            writer.writerow([repr(float(v)) if i else (int(v) if schedule.discrete else float(v))
                             for i, v in enumerate(row)])
    return path
