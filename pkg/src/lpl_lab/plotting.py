"""Figures written by the CLI. Everything renders off-screen to files."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 110,
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def image_grid(images: np.ndarray, path, ncols: int = 8, title: str | None = None) -> Path:
    """Tile NHWC images in [-1, 1]."""
    images = np.clip((np.asarray(images) + 1.0) / 2.0, 0.0, 1.0)
    n = len(images)
    ncols = min(ncols, n)
    nrows = -(-n // ncols)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(nrows, ncols, figsize=(1.2 * ncols, 1.2 * nrows + 0.3),
                                 squeeze=False)
        for ax in axes.ravel():
            ax.axis("off")
        for ax, img in zip(axes.ravel(), images):
            ax.imshow(img, interpolation="nearest")
        if title:
            fig.suptitle(title)
        return _save(fig, path)


def loss_curves(rows: list[dict], path, keys=("loss_diff", "loss_lpl", "loss_total"),
                smooth: int = 50) -> Path:
    steps = np.array([r["step"] for r in rows])
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6, 3.5))
        for key in keys:
            vals = np.array([r[key] for r in rows], dtype=float)
            if not np.any(vals):
                continue
            w = max(1, min(smooth, len(vals)))
            smoothed = np.convolve(vals, np.ones(w) / w, mode="valid")
            ax.plot(steps[w - 1:], smoothed, label=key)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.set_yscale("log")
        ax.legend()
        return _save(fig, path)


def radial_profiles(profiles: dict[str, np.ndarray], path, nyquist: float | None = None) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for name, prof in profiles.items():
            ax.plot(np.arange(len(prof)), prof, label=name)
        if nyquist is not None:
            for frac in (0.15, 0.5):
                ax.axvline(frac * nyquist, color="0.6", lw=0.8, ls="--")
        ax.set_xlabel("radius (cycles per image)")
        ax.set_ylabel("log power")
        ax.legend()
        return _save(fig, path)


def difference_heatmap(grid: np.ndarray, path, title: str = "log-power difference") -> Path:
    """Centered (fft-shifted) heatmap with a symmetric color range."""
    shifted = np.fft.fftshift(grid)
    lim = float(np.abs(shifted).max()) or 1.0
    h, w = shifted.shape
    extent = (-w // 2 - 0.5, w - w // 2 - 0.5, h - h // 2 - 0.5, -h // 2 - 0.5)
    with plt.rc_context({**STYLE, "axes.grid": False}):
        fig, ax = plt.subplots(figsize=(4.2, 3.6))
        im = ax.imshow(shifted, cmap="RdBu_r", vmin=-lim, vmax=lim, extent=extent)
        fig.colorbar(im, ax=ax, shrink=0.85)
        ax.set_title(title)
        ax.set_xlabel("f_x")
        ax.set_ylabel("f_y")
        return _save(fig, path)


def error_maps(maps: list[np.ndarray], titles: list[str], path) -> Path:
    n = len(maps)
    vmax = max(float(m.max()) for m in maps) or 1.0
    with plt.rc_context({**STYLE, "axes.grid": False}):
        fig, axes = plt.subplots(1, n, figsize=(2.2 * n, 2.4), squeeze=False)
        for ax, m, t in zip(axes[0], maps, titles):
            im = ax.imshow(m, cmap="magma", vmin=0, vmax=vmax)
            ax.set_title(t)
            ax.axis("off")
        fig.colorbar(im, ax=list(axes[0]), shrink=0.8)
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(path)
        plt.close(fig)
        return path


def roundtrip_grid(rows: dict[str, np.ndarray], path, max_images: int = 6) -> Path:
    """One row per reconstruction kind, one column per image."""
    names = list(rows)
    n = min(max_images, len(next(iter(rows.values()))))
    with plt.rc_context({**STYLE, "axes.grid": False}):
        fig, axes = plt.subplots(len(names), n, figsize=(1.3 * n + 1.0, 1.3 * len(names)),
                                 squeeze=False)
        for i, name in enumerate(names):
            imgs = np.clip((rows[name][:n] + 1) / 2, 0, 1)
            for j in range(n):
                axes[i, j].imshow(imgs[j], interpolation="nearest")
                axes[i, j].set_xticks([])
                axes[i, j].set_yticks([])
            axes[i, 0].set_ylabel(name, rotation=0, ha="right", va="center")
        return _save(fig, path)


def sweep_plot(values, metrics: dict[str, list[float]], param: str, path) -> Path:
    keys = list(metrics)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(keys), figsize=(3.0 * len(keys), 3.0), squeeze=False)
        for ax, key in zip(axes[0], keys):
            ax.plot(values, metrics[key], marker="o")
            ax.set_xlabel(param)
            ax.set_title(key)
        return _save(fig, path)


def nfe_plot(steps, series: dict[str, list[float]], path, metric: str = "frechet") -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        for name, vals in series.items():
            ax.plot(steps, vals, marker="o", label=name)
        ax.set_xscale("log")
        ax.set_xlabel("sampling steps")
        ax.set_ylabel(metric)
        ax.legend()
        return _save(fig, path)
