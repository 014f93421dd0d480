"""Verification probes for the autoencoder and the linear-decoder argument.

* ``verify_projection_penalty`` checks that, for a linear decoder ``x = A z``,
  the KL between two Gaussians pushed through ``A`` reduces to a quadratic form
  in ``A (mu_1 - mu_2)`` plus a mean-independent constant, and that the
  quadratic form is bounded by the largest eigenvalue of ``(A A^T)^-1``.
* ``interp_roundtrip_probe`` resamples down and back up, in pixel or latent
  space, and reports the damage in both spaces.
* ``perturbation_probe`` adds noise to a region of the latent grid and maps
  the resulting pixel error.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .autoencoder import Autoencoder, images_to_tensor
from .errors import ConfigError, NumericalError

INTERP_METHODS = ("nearest", "bilinear", "bicubic")
SPACES = ("pixel", "latent")


# -- linear decoder algebra ---------------------------------------------------
@dataclass
class LinearDecoderModel:
    A: np.ndarray

    @classmethod
    def sample(cls, image_dim: int, latent_dim: int, seed: int = 0,
               max_cond: float = 1e6, max_tries: int = 100) -> "LinearDecoderModel":
        """Standard normal ``A`` of shape (image_dim, latent_dim) with ``A A^T`` invertible."""
        if image_dim > latent_dim:
            raise ConfigError("full row rank needs image_dim <= latent_dim")
        rng = np.random.default_rng(seed)
        for _ in range(max_tries):
            A = rng.standard_normal((image_dim, latent_dim))
            if np.linalg.cond(A @ A.T) < max_cond:
                return cls(A)
        raise NumericalError(f"no well-conditioned A found in {max_tries} draws")

    @property
    def gram(self) -> np.ndarray:
        return self.A @ self.A.T

    def check_rank(self):
        if np.linalg.matrix_rank(self.A) < self.A.shape[0]:
            raise NumericalError("A is rank deficient; A A^T is not invertible")


def _chol(cov: np.ndarray, name: str) -> np.ndarray:
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise NumericalError(f"covariance {name} is not positive definite") from None


def gaussian_kl(mu1, cov1, mu2, cov2) -> float:
    """KL(N(mu1, cov1) || N(mu2, cov2)) from log-determinants, trace and Mahalanobis terms."""
    mu1, mu2 = np.atleast_1d(mu1).astype(np.float64), np.atleast_1d(mu2).astype(np.float64)
    cov1, cov2 = np.atleast_2d(cov1).astype(np.float64), np.atleast_2d(cov2).astype(np.float64)
    k = mu1.shape[0]
    L1, L2 = _chol(cov1, "1"), _chol(cov2, "2")
    logdet1 = 2.0 * np.log(np.diag(L1)).sum()
    logdet2 = 2.0 * np.log(np.diag(L2)).sum()
    solved = np.linalg.solve(L2, L1)  # L2^-1 L1
    trace = (solved ** 2).sum()
    m = np.linalg.solve(L2, mu2 - mu1)
    return float(0.5 * (trace + m @ m - k + logdet2 - logdet1))


@dataclass
class PenaltyReport:
    kl: float
    quadratic: float
    constant: float
    bound: float
    identity_error: float
    identity_ok: bool
    bound_ok: bool
    tight_gap: float


def verify_projection_penalty(A, mu1, mu2, beta_tilde: float, sigma2: float,
                              identity_tol: float = 1e-8,
                              bound_slack: float = 1e-10) -> PenaltyReport:
    """Compare the generic KL of the pushed-forward Gaussians with the quadratic form.

    The pushed-forward pair is ``N(A mu1, beta_tilde A A^T)`` and
    ``N(A mu2, sigma2 A A^T)``; ``mu1``/``mu2`` live in latent space.
    """
    A = np.asarray(A, dtype=np.float64)
    if A.shape[0] > 64 or A.shape[1] > 64:
        raise ConfigError("probe dimensions are limited to 64")
    if beta_tilde <= 0 or sigma2 <= 0:
        raise ConfigError("variances must be positive")
    LinearDecoderModel(A).check_rank()
    m = A.shape[0]
    gram = A @ A.T
    d = A @ (np.asarray(mu1, dtype=np.float64) - np.asarray(mu2, dtype=np.float64))
    kl = gaussian_kl(A @ mu1, beta_tilde * gram, A @ mu2, sigma2 * gram)

    quadratic = 0.5 / sigma2 * float(d @ np.linalg.solve(gram, d))
    constant = 0.5 * m * (beta_tilde / sigma2 - 1.0 + np.log(sigma2 / beta_tilde))
    lam_max = 1.0 / np.linalg.eigvalsh(gram).min()
    bound = 0.5 / sigma2 * lam_max * float(d @ d)
    err = abs(kl - (quadratic + constant))
    return PenaltyReport(float(kl), float(quadratic), float(constant), float(bound), float(err),
                         bool(err <= identity_tol), bool(quadratic <= bound + bound_slack),
                         float(bound - quadratic))


def penalty_sweep(instances: int = 100, seed: int = 0, max_dim: int = 64) -> dict:
    """Random linear decoders, means and variances; counts identity and bound failures."""
    ss = np.random.SeedSequence(seed)
    rows = []
    for child in ss.spawn(instances):
        rng = np.random.default_rng(child)
        m = int(rng.integers(1, max_dim // 2 + 1))
        n = int(rng.integers(m + 1, max_dim + 1))
        A = LinearDecoderModel.sample(m, n, int(rng.integers(2**31))).A
        mu1, mu2 = rng.standard_normal(n), rng.standard_normal(n)
        beta_tilde, sigma2 = rng.uniform(0.05, 1.0, size=2)
        rep = verify_projection_penalty(A, mu1, mu2, beta_tilde, sigma2)
        rows.append({"image_dim": m, "latent_dim": n, **asdict(rep)})
    return {
        "instances": instances,
        "identity_passes": sum(r["identity_ok"] for r in rows),
        "bound_violations": sum(not r["bound_ok"] for r in rows),
        "max_identity_error": max(r["identity_error"] for r in rows),
        "rows": rows,
    }


# -- latent structure probes --------------------------------------------------
def _resample(x: torch.Tensor, size: int, method: str) -> torch.Tensor:
    if x.shape[-1] == size and x.shape[-2] == size:
        return x
    kwargs = {} if method == "nearest" else {"align_corners": False}
    return F.interpolate(x, size=(size, size), mode=method, **kwargs)


def roundtrip(x: torch.Tensor, s: float, method: str) -> torch.Tensor:
    """Resize to ``round(size / s)`` and back to ``size`` with the same method."""
    size = x.shape[-1]
    small = max(1, int(round(size / s)))
    return _resample(_resample(x, small, method), size, method)


@torch.no_grad()
def interp_roundtrip_probe(ae: Autoencoder, images: np.ndarray, s: float,
                           methods=INTERP_METHODS, space: str = "latent"):
    """Per-image latent and pixel MSE after a down/up resampling round trip.

    Pixel errors are measured against the autoencoder's own reconstruction
    ``decode(encode(x))`` for the latent space, and against ``x`` itself for
    the pixel space, so ``s = 1`` gives exactly zero in both.
    Returns ``(rows, reconstructions)`` with reconstructions keyed by method.
    """
    if not s >= 1:
        raise ConfigError(f"scale factor s must be >= 1, got {s}")
    if space not in SPACES:
        raise ConfigError(f"space must be one of {SPACES}, got {space!r}")
    for method in methods:
        if method not in INTERP_METHODS:
            raise ConfigError(f"unknown interpolation method {method!r}")
    x = images_to_tensor(np.asarray(images))
    z = ae.encode(x)
    x_ref = ae.decode(z) if space == "latent" else x
    rows, recons = [], {}
    for method in methods:
        if space == "latent":
            z_rt = roundtrip(z, s, method)
            x_rt = ae.decode(z_rt)
        else:
            x_rt = roundtrip(x, s, method)
            z_rt = ae.encode(x_rt)
        lat = ((z_rt - z) ** 2).flatten(1).mean(1)
        pix = ((x_rt - x_ref) ** 2).flatten(1).mean(1)
        recons[method] = x_rt
        for i in range(x.shape[0]):
            rows.append({"image": i, "method": method, "space": space, "s": float(s),
                         "latent_mse": float(lat[i]), "pixel_mse": float(pix[i])})
    return rows, recons


@dataclass
class PerturbationResult:
    error_map: np.ndarray
    error_norm: float
    scale: float


@torch.no_grad()
def perturbation_probe(ae: Autoencoder, image: np.ndarray, region_mask: np.ndarray,
                       scale: float | None = None, seed: int = 0) -> PerturbationResult:
    """Add ``N(0, scale)`` noise on the masked latent cells and map the pixel error.

    ``scale`` is a variance and defaults to half the variance of the latent.
    """
    region_mask = np.asarray(region_mask, dtype=bool)
    if not region_mask.any():
        raise ConfigError("region mask is empty")
    x = images_to_tensor(np.asarray(image)[None])
    z = ae.encode(x)
    if region_mask.shape != tuple(z.shape[-2:]):
        raise ConfigError(f"mask shape {region_mask.shape} does not match latent grid "
                          f"{tuple(z.shape[-2:])}")
    if scale is None:
        scale = 0.5 * float(z.var())
    if scale < 0:
        raise ConfigError("scale must be >= 0")
    gen = torch.Generator().manual_seed(seed)
    noise = torch.randn(z.shape, generator=gen) * (scale ** 0.5)
    mask = torch.as_tensor(region_mask, dtype=z.dtype)
    base = ae.decode(z)
    moved = ae.decode(z + noise * mask)
    diff = (moved - base)[0]
    return PerturbationResult(diff.abs().mean(0).numpy(), float(diff.norm()), scale)


@torch.no_grad()
def linearization_report(ae: Autoencoder, image: np.ndarray, magnitudes=(1e-3, 1e-2, 1e-1, 1.0),
                         seed: int = 0, fd_step: float = 1e-4) -> list[dict]:
    """How far ``decode`` is from its first-order expansion along a random direction.

    The Jacobian-vector product is a central finite difference in float64.
    Informational only: no threshold is applied.
    """
    ae64 = copy.deepcopy(ae).double()
    z = ae64.encode(images_to_tensor(np.asarray(image)[None]).double())
    gen = torch.Generator().manual_seed(seed)
    u = torch.randn(z.shape, generator=gen, dtype=torch.float64)
    u = u / u.norm()
    jvp = (ae64.decode(z + fd_step * u) - ae64.decode(z - fd_step * u)) / (2 * fd_step)
    base = ae64.decode(z)
    out = []
    for eps in magnitudes:
        resid = ae64.decode(z + eps * u) - base - eps * jvp
        change = ae64.decode(z + eps * u) - base
        out.append({"magnitude": float(eps), "residual_norm": float(resid.norm()),
                    "change_norm": float(change.norm()),
                    "relative_residual": float(resid.norm() / change.norm().clamp_min(1e-300))})
    return out
