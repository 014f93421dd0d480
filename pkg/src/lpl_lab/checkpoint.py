"""Single-file tensor container.

Layout::

    [8 bytes]  header length N, unsigned little-endian
    [N bytes]  UTF-8 JSON: {name: {"dtype": "f32"|"f64", "shape": [...], "byte_offset": k}}
    [rest]     row-major little-endian tensor data; byte_offset is relative
               to the start of this section

Entries are laid out contiguously in header order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError, IntegrityError, MissingInputError

_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_CODES = {np.dtype("float32"): "f32", np.dtype("float64"): "f64"}


def _as_numpy(value) -> np.ndarray:
    if isinstance(value, torch.Tensor):
        value = value.detach().cpu().numpy()
    arr = np.asarray(value)
    if arr.dtype not in _CODES:
        raise ConfigError(f"unsupported dtype {arr.dtype}; only float32/float64 are stored")
    return arr


def save_checkpoint(path, tensors: dict) -> Path:
    """Write ``tensors`` (name -> array or tensor) to ``path``."""
    header, blobs, offset = {}, [], 0
    for name, value in tensors.items():
        if not isinstance(name, str) or not name:
            raise ConfigError(f"invalid tensor name {name!r}")
        arr = _as_numpy(value)
        code = _CODES[arr.dtype]
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes(order="C")
        header[name] = {"dtype": code, "shape": list(arr.shape), "byte_offset": offset}
        blobs.append(raw)
        offset += len(raw)
    head = json.dumps(header, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("wb") as fh:
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for raw in blobs:
            fh.write(raw)
    tmp.replace(path)
    return path


def read_header(path) -> tuple[dict, int, int]:
    """Return ``(header, data_start, file_size)`` after validating the layout."""
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"checkpoint {path} not found")
    size = path.stat().st_size
    with path.open("rb") as fh:
        prefix = fh.read(8)
        if len(prefix) < 8:
            raise IntegrityError(f"{path}: truncated length prefix at offset {len(prefix)}")
        (n,) = struct.unpack("<Q", prefix)
        if 8 + n > size:
            raise IntegrityError(f"{path}: header of {n} bytes runs past end of file "
                                 f"at offset {size}")
        raw = fh.read(n)
    try:
        header = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"{path}: corrupt header at offset 8: {exc}") from None
    if not isinstance(header, dict):
        raise IntegrityError(f"{path}: header at offset 8 is not a mapping")
    expected = 0
    for name, entry in header.items():
        try:
            dtype = _DTYPES[entry["dtype"]]
            shape = [int(s) for s in entry["shape"]]
            offset = int(entry["byte_offset"])
        except (KeyError, TypeError, ValueError):
            raise IntegrityError(f"{path}: malformed header entry {name!r}") from None
        if offset != expected:
            raise IntegrityError(f"{path}: entry {name!r} at byte_offset {offset}, "
                                 f"expected {expected} (overlap or gap)")
        expected += int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    data_start = 8 + n
    if data_start + expected > size:
        raise IntegrityError(f"{path}: truncated data; need {expected} bytes after offset "
                             f"{data_start}, file ends at offset {size}")
    if data_start + expected < size:
        raise IntegrityError(f"{path}: {size - data_start - expected} trailing bytes "
                             f"after offset {data_start + expected}")
    return header, data_start, size


def load_checkpoint(path, prefix: str | None = None) -> dict[str, np.ndarray]:
    """Load every tensor, or only those whose name starts with ``prefix``.

    A prefix written as ``"ema.*"`` is accepted as shorthand for ``"ema."``.
    """
    header, data_start, _ = read_header(path)
    if prefix is not None and prefix.endswith("*"):
        prefix = prefix[:-1]
    out = {}
    with Path(path).open("rb") as fh:
        for name, entry in header.items():
            if prefix is not None and not name.startswith(prefix):
                continue
            dtype = _DTYPES[entry["dtype"]]
            shape = tuple(entry["shape"])
            count = int(np.prod(shape, dtype=np.int64))
            fh.seek(data_start + entry["byte_offset"])
            raw = fh.read(count * dtype.itemsize)
            out[name] = np.frombuffer(raw, dtype=dtype, count=count).reshape(shape).astype(
                dtype.newbyteorder("="), copy=True)
    return out


def module_tensors(module: torch.nn.Module, prefix: str) -> dict[str, torch.Tensor]:
    return {f"{prefix}{k}": v for k, v in module.state_dict().items()}


def load_module(module: torch.nn.Module, tensors: dict, prefix: str, strict: bool = True):
    state = {k[len(prefix):]: torch.from_numpy(np.array(v)) for k, v in tensors.items()
             if k.startswith(prefix)}
    if not state:
        raise IntegrityError(f"checkpoint holds no tensors with prefix {prefix!r}")
    module.load_state_dict(state, strict=strict)
    return module
