"""Distribution metrics and spectral analysis for image sets.

Features come from the frozen autoencoder's encoder (average-pooled to a
64-d vector), so Fréchet values are comparable between runs that share an
autoencoder and meaningless in absolute terms.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from scipy.spatial.distance import cdist

from .autoencoder import Autoencoder, encode_batched, images_to_tensor
from .errors import ConfigError, NumericalError

log = logging.getLogger(__name__)

LUMA = np.array([0.299, 0.587, 0.114])
LOG_FLOOR = 1e-10
BANDS = ("low", "mid", "high")


@dataclass
class FeatureSet:
    features: np.ndarray
    tag: str = ""

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim == 1:
            self.features = self.features[:, None]
        if self.features.ndim != 2 or len(self.features) == 0:
            raise ConfigError(f"features must be a nonempty (N, F) array, "
                              f"got shape {self.features.shape}")
        if not np.isfinite(self.features).all():
            raise NumericalError(f"feature set {self.tag!r} has non-finite entries")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@torch.no_grad()
def embed_for_metrics(images: np.ndarray, ae: Autoencoder, tag: str = "",
                      pool: int = 4) -> FeatureSet:
    """Encoder latents average-pooled to ``pool x pool`` cells and flattened."""
    images = np.asarray(images)
    if images.ndim != 4 or images.shape[-1] != 3:
        raise ConfigError(f"expected NHWC RGB images, got shape {images.shape}")
    z = encode_batched(ae, images_to_tensor(images))
    pooled = F.adaptive_avg_pool2d(z, pool)
    return FeatureSet(pooled.flatten(1).double().numpy(), tag)


def frechet_distance(a: FeatureSet, b: FeatureSet, jitter: float = 1e-6) -> float:
    """``|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))``.

    The cross term is evaluated as ``Tr((S_a^(1/2) S_b S_a^(1/2))^(1/2))``, which
    only needs symmetric eigendecompositions.
    """
    if a.dim != b.dim:
        raise ConfigError(f"feature dimensions differ: {a.dim} vs {b.dim}")
    for fs in (a, b):
        if fs.n < fs.dim + 1:
            log.warning("feature set %r has %d samples for %d dims; covariance is singular",
                        fs.tag, fs.n, fs.dim)
    mu_a, mu_b = a.features.mean(0), b.features.mean(0)
    eye = np.eye(a.dim)
    s_a = np.atleast_2d(np.cov(a.features, rowvar=False)) + jitter * eye
    s_b = np.atleast_2d(np.cov(b.features, rowvar=False)) + jitter * eye

    vals_a, vecs_a = np.linalg.eigh(s_a)
    tol = -1e-10 * max(1.0, np.abs(vals_a).max())
    if vals_a.min() < tol:
        raise NumericalError(f"covariance of {a.tag!r} is not PSD (min eig {vals_a.min():.3e})")
    root_a = (vecs_a * np.sqrt(np.clip(vals_a, 0, None))) @ vecs_a.T
    inner = root_a @ s_b @ root_a
    vals = np.linalg.eigvalsh((inner + inner.T) / 2)
    if vals.min() < -1e-10 * max(1.0, np.abs(vals).max()):
        raise NumericalError(f"cross covariance is not PSD (min eig {vals.min():.3e})")
    cross = np.sqrt(np.clip(vals, 0, None)).sum()
    diff = mu_a - mu_b
    return float(diff @ diff + np.trace(s_a) + np.trace(s_b) - 2.0 * cross)


def knn_radii(x: np.ndarray, k: int) -> np.ndarray:
    """Distance from each point to its k-th nearest neighbour in the same set."""
    d = cdist(x, x)
    return np.partition(d, k, axis=1)[:, k]


def prdc(real: FeatureSet, fake: FeatureSet, k: int = 5) -> dict[str, float]:
    """Precision, recall, density and coverage on k-NN balls (boundary counts as inside)."""
    if real.dim != fake.dim:
        raise ConfigError(f"feature dimensions differ: {real.dim} vs {fake.dim}")
    if real.n <= k or fake.n <= k:
        raise ConfigError(f"need more than k={k} points in each set")
    r_real = knn_radii(real.features, k)
    r_fake = knn_radii(fake.features, k)
    d = cdist(real.features, fake.features)  # (n_real, n_fake)
    inside_real = d <= r_real[:, None]
    return {
        "precision": float(inside_real.any(axis=0).mean()),
        "recall": float((d <= r_fake[None, :]).any(axis=1).mean()),
        "density": float(inside_real.sum() / (k * fake.n)),
        "coverage": float(inside_real.any(axis=1).mean()),
    }


# -- spectra ------------------------------------------------------------------
def to_luma(images: np.ndarray) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 4 and images.shape[-1] == 3:
        return images @ LUMA
    if images.ndim == 3:
        return images
    raise ConfigError(f"expected (N,H,W,3) or (N,H,W) images, got shape {images.shape}")


def power_grid(images: np.ndarray) -> np.ndarray:
    """Mean ``|FFT|^2`` over the set, unshifted, before the log."""
    gray = to_luma(images)
    return (np.abs(np.fft.fft2(gray, axes=(-2, -1))) ** 2).mean(0)


def radius_grid(h: int, w: int) -> np.ndarray:
    fy = np.fft.fftfreq(h) * h
    fx = np.fft.fftfreq(w) * w
    return np.rint(np.hypot(fy[:, None], fx[None, :])).astype(np.int64)


@dataclass
class SpectrumProfile:
    profile: np.ndarray
    log_grid: np.ndarray

    @property
    def nyquist(self) -> float:
        return min(self.log_grid.shape) / 2


def radial_power_spectrum(images: np.ndarray) -> SpectrumProfile:
    """Log mean power, averaged over integer-radius annuli ``0..min(H,W)/2 - 1``."""
    grid = np.log(power_grid(images) + LOG_FLOOR)
    h, w = grid.shape
    n_bins = min(h, w) // 2
    radius = radius_grid(h, w).ravel()
    keep = radius < n_bins
    sums = np.bincount(radius[keep], weights=grid.ravel()[keep], minlength=n_bins)
    counts = np.bincount(radius[keep], minlength=n_bins)
    return SpectrumProfile(sums / counts, grid)


def band_of(radius: np.ndarray, nyquist: float) -> np.ndarray:
    radius = np.asarray(radius, dtype=np.float64)
    return np.where(radius < 0.15 * nyquist, "low",
                    np.where(radius > 0.5 * nyquist, "high", "mid"))


def band_errors(profile: SpectrumProfile, reference: SpectrumProfile) -> dict[str, float]:
    """Mean absolute radial log-power error per frequency band."""
    if profile.log_grid.shape != reference.log_grid.shape:
        raise ConfigError(f"resolution mismatch: {profile.log_grid.shape} "
                          f"vs {reference.log_grid.shape}")
    err = np.abs(profile.profile - reference.profile)
    bands = band_of(np.arange(len(err)), profile.nyquist)
    return {b: float(err[bands == b].mean()) for b in BANDS}


@dataclass
class SpectrumComparison:
    difference: np.ndarray
    bands_a: dict = field(default_factory=dict)
    bands_b: dict = field(default_factory=dict)


def spectrum_difference(set_a: np.ndarray, set_b: np.ndarray,
                        reference: np.ndarray | None = None) -> SpectrumComparison:
    """``log_power(a) - log_power(b)`` on the 2-D grid, plus band errors vs ``reference``."""
    spec_a, spec_b = radial_power_spectrum(set_a), radial_power_spectrum(set_b)
    if spec_a.log_grid.shape != spec_b.log_grid.shape:
        raise ConfigError(f"resolution mismatch: {spec_a.log_grid.shape} "
                          f"vs {spec_b.log_grid.shape}")
    out = SpectrumComparison(spec_a.log_grid - spec_b.log_grid)
    if reference is not None:
        ref = radial_power_spectrum(reference)
        out.bands_a = band_errors(spec_a, ref)
        out.bands_b = band_errors(spec_b, ref)
    return out


def write_spectra_csv(path, profiles: dict[str, SpectrumProfile]) -> Path:
    path = Path(path)
    names = list(profiles)
    n = len(next(iter(profiles.values())).profile)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["radius", *names])
        for r in range(n):
            writer.writerow([r, *(repr(float(profiles[k].profile[r])) for k in names)])
    return path


def evaluate_sets(real_images: np.ndarray, fake_images: np.ndarray, ae: Autoencoder,
                  k: int = 5) -> dict:
    """Every metric for one generated set against the real corpus."""
    real = embed_for_metrics(real_images, ae, "real")
    fake = embed_for_metrics(fake_images, ae, "generated")
    spec_real = radial_power_spectrum(real_images)
    spec_fake = radial_power_spectrum(fake_images)
    return {
        "frechet": frechet_distance(real, fake),
        **prdc(real, fake, k),
        "band_errors": band_errors(spec_fake, spec_real),
        "num_real": real.n,
        "num_generated": fake.n,
    }


def write_report(path, report: dict) -> Path:
    path = Path(path)
    path.write_text(json.dumps(report, indent=2, sort_keys=True))
    return path
