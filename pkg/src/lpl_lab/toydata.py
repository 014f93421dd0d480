"""Synthetic textured-shape corpus and image-folder ingestion.

Each image is a smooth two-colour background gradient with one shape whose
fill carries a sinusoidal texture. Shapes are rasterised with 4x4
supersampling and their edges softened by a small Gaussian, so that
high-frequency energy comes from the texture, not from the edges. The
background gradient is one period of a cosine along an integer wave vector,
which keeps it free of wrap-around discontinuities in the FFT. Randomness
for image ``i`` is derived from ``(seed, i)`` alone, so serial and pooled
generation agree bit for bit.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, IngestionError, MissingInputError
from .runtime import worker_count

SHAPES = ("circle", "square", "triangle", "stripes")
AE_FACTOR = 4
SUPERSAMPLE = 4
EDGE_SIGMA = 1.75  # pixels
BACKGROUND_WAVES = ((1, 0), (0, 1), (1, 1), (1, -1))


@dataclass
class DataSpec:
    count: int = 2048
    resolution: int = 64
    classes: int = 4
    texture_freq_range: tuple[float, float] = (6.0, 20.0)
    texture_amplitude: float = 0.25
    seed: int = 0

    def validate(self):
        if self.count < 1:
            raise ConfigError("count must be positive")
        if self.resolution < AE_FACTOR or self.resolution % AE_FACTOR:
            raise ConfigError(f"resolution {self.resolution} is not a multiple of {AE_FACTOR}")
        if not 1 <= self.classes <= len(SHAPES):
            raise ConfigError(f"classes must be in 1..{len(SHAPES)}")
        lo, hi = self.texture_freq_range
        if not 0 <= lo <= hi <= self.resolution / 2:
            raise ConfigError(f"texture_freq_range {self.texture_freq_range} must satisfy "
                              f"0 <= lo <= hi <= {self.resolution / 2} (Nyquist)")
        if self.texture_amplitude < 0:
            raise ConfigError("texture_amplitude must be >= 0")
        return self


@dataclass
class ImageSet:
    images: np.ndarray  # (N, H, W, 3) float32 in [-1, 1]
    labels: np.ndarray  # (N,) int64
    resolution: int
    seed: int = 0
    spec: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.images)


def _coverage(kind: str, res: int, rng: np.random.Generator) -> np.ndarray:
    n = res * SUPERSAMPLE
    coords = (np.arange(n) + 0.5) / SUPERSAMPLE
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    cx, cy = rng.uniform(0.35, 0.65, 2) * res
    size = rng.uniform(0.18, 0.3) * res
    theta = rng.uniform(0, np.pi)
    dx, dy = xx - cx, yy - cy
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    if kind == "circle":
        inside = u ** 2 + v ** 2 <= size ** 2
    elif kind == "square":
        inside = (np.abs(u) <= size * 0.85) & (np.abs(v) <= size * 0.85)
    elif kind == "triangle":
        # equilateral triangle with circumradius `size`
        angles = np.array([0.5, 0.5 + 2 / 3, 0.5 + 4 / 3]) * np.pi
        px, py = size * np.cos(angles), size * np.sin(angles)
        inside = np.ones_like(u, dtype=bool)
        for i in range(3):
            x0, y0, x1, y1 = px[i], py[i], px[(i + 1) % 3], py[(i + 1) % 3]
            inside &= (x1 - x0) * (v - y0) - (y1 - y0) * (u - x0) >= 0
    elif kind == "stripes":
        bar = size * 0.22
        inside = (np.abs(v) <= size) & (np.abs((u + size) % (2 * bar * 2) - 2 * bar) <= bar)
        inside &= np.abs(u) <= size
    else:
        raise ConfigError(f"unknown shape {kind!r}")
    cov = inside.astype(np.float64).reshape(res, SUPERSAMPLE, res, SUPERSAMPLE)
    return cov.mean(axis=(1, 3))


def _render(spec: DataSpec, index: int) -> tuple[np.ndarray, int]:
    rng = np.random.default_rng([spec.seed, index])
    res = spec.resolution
    label = int(rng.integers(spec.classes))

    c0, c1, fg = rng.uniform(-0.55, 0.55, (3, 3))
    kx, ky = BACKGROUND_WAVES[rng.integers(len(BACKGROUND_WAVES))]
    phi = rng.uniform(0, 2 * np.pi)
    grid = (np.arange(res) + 0.5) / res
    yy, xx = np.meshgrid(grid, grid, indexing="ij")
    ramp = 0.5 + 0.5 * np.cos(2 * np.pi * (kx * xx + ky * yy) + phi)
    background = c0 + (c1 - c0) * ramp[..., None]

    lo, hi = spec.texture_freq_range
    freq = rng.uniform(lo, hi)
    psi, phase = rng.uniform(0, 2 * np.pi, 2)
    wave = np.sin(2 * np.pi * freq * (xx * np.cos(psi) + yy * np.sin(psi)) + phase)
    fill = fg + spec.texture_amplitude * wave[..., None]

    cov = gaussian_filter(_coverage(SHAPES[label], res, rng), EDGE_SIGMA, mode="wrap")
    cov = cov[..., None]
    img = background * (1.0 - cov) + fill * cov
    return np.clip(img, -1.0, 1.0).astype(np.float32), label


def generate_textured_dataset(spec: DataSpec) -> ImageSet:
    spec.validate()
    workers = worker_count()
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            out = list(pool.map(lambda i: _render(spec, i), range(spec.count)))
    else:
        out = [_render(spec, i) for i in range(spec.count)]
    images = np.stack([o[0] for o in out])
    labels = np.array([o[1] for o in out], dtype=np.int64)
    return ImageSet(images, labels, spec.resolution, spec.seed, asdict(spec))


def _to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round((img + 1.0) * 127.5).clip(0, 255).astype(np.uint8)


def save_image_set(imgset: ImageSet, directory) -> Path:
    """Write one PNG per image plus ``manifest.json`` (labels and spec echo)."""
    from PIL import Image

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = []
    for i, img in enumerate(imgset.images):
        name = f"img_{i:05d}.png"
        Image.fromarray(_to_uint8(img)).save(directory / name)
        files.append(name)
    manifest = {"count": len(imgset), "resolution": imgset.resolution, "seed": imgset.seed,
                "labels": [int(v) for v in imgset.labels], "files": files, "spec": imgset.spec}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return directory


def _load_png(path: Path, resolution: int) -> np.ndarray:
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            w, h = im.size
            side = min(w, h)
            left, top = (w - side) // 2, (h - side) // 2
            im = im.crop((left, top, left + side, top + side))
            if side != resolution:
                im = im.resize((resolution, resolution), Image.Resampling.BICUBIC)
            arr = np.asarray(im, dtype=np.float32)
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise IngestionError(f"cannot decode image {path}: {exc}") from exc
    return arr / 127.5 - 1.0


def load_image_folder(path, resolution: int) -> ImageSet:
    """Centre-crop, resize and rescale every image in ``path``; labels are all 0."""
    path = Path(path)
    if not path.is_dir():
        raise MissingInputError(f"image folder {path} does not exist")
    files = sorted(p for p in path.iterdir()
                   if p.is_file() and not p.name.startswith(".") and p.name != "manifest.json")
    if not files:
        raise IngestionError(f"image folder {path} is empty")
    images = np.stack([_load_png(p, resolution) for p in files])
    return ImageSet(images, np.zeros(len(files), dtype=np.int64), resolution)


def load_dataset_dir(path) -> ImageSet:
    """Reload a directory written by :func:`save_image_set`, labels included."""
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise MissingInputError(f"{manifest_path} not found")
    manifest = json.loads(manifest_path.read_text())
    res = manifest["resolution"]
    images = np.stack([_load_png(path / f, res) for f in manifest["files"]])
    return ImageSet(images, np.asarray(manifest["labels"], dtype=np.int64), res,
                    manifest.get("seed", 0), manifest.get("spec", {}))
