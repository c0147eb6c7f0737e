"""Images and label maps that carry their physical voxel spacing.

Resampling follows the voxel-center convention: output voxel ``k`` along an
axis sits at physical position ``(k + 0.5) * t`` and is looked up at the
source coordinate ``(k + 0.5) * t / s - 0.5`` (in source voxel units), where
``s`` and ``t`` are the source and target spacings. Samples outside the grid
clamp to the edge voxel.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np


class VolumeFormatError(ValueError):
    """Base class for load errors."""


class MissingSidecarError(VolumeFormatError):
    pass


class ByteCountError(VolumeFormatError):
    pass


class SpacingError(VolumeFormatError):
    pass


def _as_spacing(spacing: Sequence[float], ndim: int | None = None) -> tuple[float, ...]:
    spacing = tuple(float(s) for s in np.atleast_1d(spacing))
    if ndim is not None and len(spacing) != ndim:
        raise ValueError(f"expected {ndim} spacing components, got {len(spacing)}")
    if not all(np.isfinite(s) and s > 0 for s in spacing):
        raise ValueError(f"spacing components must be positive, got {spacing}")
    return spacing


@dataclass(frozen=True)
class Volume:
    """Single-channel image with per-axis spacing in mm."""

    data: np.ndarray
    spacing: tuple[float, ...]

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim not in (1, 2, 3):
            raise ValueError(f"volumes must have 1 to 3 axes, got {data.ndim}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _as_spacing(self.spacing, data.ndim))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def extent(self) -> np.ndarray:
        """Physical size in mm per axis."""
        return np.asarray(self.shape) * np.asarray(self.spacing)


@dataclass(frozen=True)
class LabelMap:
    """Integer label image with per-axis spacing in mm."""

    data: np.ndarray
    spacing: tuple[float, ...]
    num_classes: int

    def __post_init__(self):
        data = np.asarray(self.data)
        if not np.issubdtype(data.dtype, np.integer):
            raise TypeError(f"label data must be integer, got {data.dtype}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if data.size and (data.min() < 0 or data.max() >= self.num_classes):
            raise ValueError(
                f"labels must lie in [0, {self.num_classes}), got range "
                f"[{data.min()}, {data.max()}]"
            )
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _as_spacing(self.spacing, data.ndim))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim


@dataclass(frozen=True)
class PadRecord:
    pad_before: tuple[int, ...]
    pad_after: tuple[int, ...]


def output_shape(shape, spacing, target) -> tuple[int, ...]:
    """round(size * s / t) per axis, at least 1."""
    return tuple(
        max(1, int(np.floor(n * s / t + 0.5))) for n, s, t in zip(shape, spacing, target)
    )


def _source_coords(n_out: int, s: float, t: float) -> np.ndarray:
    return (np.arange(n_out) + 0.5) * (t / s) - 0.5


def resample_image(vol: Volume, target: Sequence[float]) -> Volume:
    """Multilinear resampling of ``vol`` to spacing ``target``."""
    target = _as_spacing(target, vol.ndim)
    if target == vol.spacing:
        return Volume(vol.data.copy(), target)
    return resample_window(vol, target, (0,) * vol.ndim, output_shape(vol.shape, vol.spacing, target))


def resample_window(vol: Volume, target: Sequence[float], start: Sequence[int],
                    size: Sequence[int]) -> Volume:
    """Voxels ``start:start+size`` of ``resample_image(vol, target)``.

    Computes only the requested window, so cropping a patch out of a fine
    volume does not pay for resampling all of it. Indices beyond the full
    output grid are allowed and clamp like any out-of-bounds sample.
    """
    target = _as_spacing(target, vol.ndim)
    data = np.asarray(vol.data, dtype=np.float64 if vol.data.dtype == np.float64 else np.float32)
    for axis, (n_in, s, t, k0, n_out) in enumerate(zip(vol.shape, vol.spacing, target, start, size)):
        x = np.clip(_source_coords(k0 + n_out, s, t)[k0:], 0, n_in - 1)
        i0 = np.floor(x).astype(np.intp)
        i1 = np.minimum(i0 + 1, n_in - 1)
        frac = (x - i0).astype(data.dtype)
        bshape = [1] * data.ndim
        bshape[axis] = n_out
        frac = frac.reshape(bshape)
        lo = np.take(data, i0, axis=axis)
        hi = np.take(data, i1, axis=axis)
        data = lo + frac * (hi - lo)
    return Volume(data, target)


def nearest_indices(n_in: int, n_out: int, s: float, t: float, start: int = 0) -> np.ndarray:
    """Source index nearest to each output voxel center (ties go up)."""
    x = _source_coords(start + n_out, s, t)[start:]
    return np.clip(np.floor(x + 0.5), 0, n_in - 1).astype(np.intp)


def resample_labels(lab: LabelMap, target: Sequence[float],
                    shape: Sequence[int] | None = None) -> LabelMap:
    """Nearest-neighbour resampling of a label map to spacing ``target``.

    ``shape`` overrides the output grid size, e.g. to pull a prediction back
    onto an image grid whose size was rounded differently.
    """
    target = _as_spacing(target, lab.ndim)
    if shape is None:
        shape = output_shape(lab.shape, lab.spacing, target)
    return resample_labels_window(lab, target, (0,) * lab.ndim, shape)


def resample_labels_window(lab: LabelMap, target: Sequence[float], start: Sequence[int],
                           size: Sequence[int]) -> LabelMap:
    target = _as_spacing(target, lab.ndim)
    idx = [
        nearest_indices(n_in, n_out, s, t, k0)
        for n_in, n_out, s, t, k0 in zip(lab.shape, size, lab.spacing, target, start)
    ]
    return LabelMap(lab.data[np.ix_(*idx)], target, lab.num_classes)


def pad_to_multiple(x, m: int, *, label: bool | None = None):
    """Pad each axis of ``x`` up to a multiple of ``m``.

    Images are edge-replicated, label maps padded with background (0).
    ``x`` may be a :class:`Volume`, a :class:`LabelMap` or a bare array
    (``label`` selects the fill mode for arrays). Returns ``(padded, record)``.
    """
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    data = x.data if isinstance(x, (Volume, LabelMap)) else np.asarray(x)
    if label is None:
        label = isinstance(x, LabelMap)
    target = [-(-n // m) * m for n in data.shape]
    before = tuple((t - n) // 2 for n, t in zip(data.shape, target))
    after = tuple(t - n - b for n, t, b in zip(data.shape, target, before))
    widths = list(zip(before, after))
    if label:
        padded = np.pad(data, widths, mode="constant", constant_values=0)
    else:
        padded = np.pad(data, widths, mode="edge")
    record = PadRecord(before, after)
    if isinstance(x, Volume):
        return Volume(padded, x.spacing), record
    if isinstance(x, LabelMap):
        return LabelMap(padded, x.spacing, x.num_classes), record
    return padded, record


def crop_back(x, record: PadRecord, axes_offset: int | None = None):
    """Undo :func:`pad_to_multiple`.

    Works on volumes, label maps, numpy arrays and torch tensors. For arrays
    with leading batch/channel axes the padded axes are taken to be the last
    ``len(record.pad_before)`` ones.
    """
    data = x.data if isinstance(x, (Volume, LabelMap)) else x
    d = len(record.pad_before)
    lead = data.ndim - d if axes_offset is None else axes_offset
    index = [slice(None)] * lead + [
        slice(b, n - a) for b, a, n in zip(record.pad_before, record.pad_after, data.shape[lead:])
    ]
    out = data[tuple(index)]
    if isinstance(x, Volume):
        return Volume(np.ascontiguousarray(out), x.spacing)
    if isinstance(x, LabelMap):
        return LabelMap(np.ascontiguousarray(out), x.spacing, x.num_classes)
    return out


# file I/O


def _paths(path) -> tuple[Path, Path]:
    path = Path(path)
    base = path.with_suffix("") if path.suffix in (".raw", ".json") else path
    return base.with_suffix(".raw"), base.with_suffix(".json")


def _save(path, data: np.ndarray, spacing, dtype: str, num_classes=None) -> Path:
    raw, sidecar = _paths(path)
    raw.parent.mkdir(parents=True, exist_ok=True)
    arr = np.ascontiguousarray(data, dtype=np.dtype(dtype).newbyteorder("<"))
    raw.write_bytes(arr.tobytes(order="C"))
    meta = {"shape": list(arr.shape), "spacing_mm": list(spacing), "dtype": dtype}
    if num_classes is not None:
        meta["num_classes"] = int(num_classes)
    sidecar.write_text(json.dumps(meta))
    return raw


def save_volume(path, vol: Volume) -> Path:
    """Write ``<base>.raw`` (float32, little-endian, C order) plus ``<base>.json``."""
    return _save(path, vol.data, vol.spacing, "float32")


def save_labels(path, lab: LabelMap) -> Path:
    if lab.num_classes > 256:
        raise ValueError("uint8 label files hold at most 256 classes")
    return _save(path, lab.data, lab.spacing, "uint8", lab.num_classes)


def _load(path, expect_dtype: str, mmap: bool = False):
    raw, sidecar = _paths(path)
    if not sidecar.exists():
        raise MissingSidecarError(f"missing sidecar {sidecar}")
    meta = json.loads(sidecar.read_text())
    if meta.get("dtype") != expect_dtype:
        raise VolumeFormatError(f"{sidecar}: expected dtype {expect_dtype}, got {meta.get('dtype')}")
    shape = tuple(int(n) for n in meta["shape"])
    spacing = [float(s) for s in meta["spacing_mm"]]
    if len(spacing) != len(shape) or not all(s > 0 for s in spacing):
        raise SpacingError(f"{sidecar}: invalid spacing {spacing} for shape {shape}")
    dtype = np.dtype(expect_dtype).newbyteorder("<")
    expected = int(np.prod(shape)) * dtype.itemsize
    found = raw.stat().st_size if raw.exists() else 0
    if found != expected:
        raise ByteCountError(f"{raw}: expected {expected} bytes for shape {shape}, found {found}")
    if mmap and dtype.isnative:
        return np.memmap(raw, dtype=dtype, mode="r", shape=shape), spacing, meta
    data = np.frombuffer(raw.read_bytes(), dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    return data, spacing, meta


def load_volume(path, mmap: bool = False) -> Volume:
    """Read a volume; ``mmap`` maps the payload read-only instead of copying it."""
    data, spacing, _ = _load(path, "float32", mmap)
    return Volume(data, spacing)


def load_labels(path, mmap: bool = False) -> LabelMap:
    data, spacing, meta = _load(path, "uint8", mmap)
    num_classes = int(meta.get("num_classes", int(data.max()) + 1 if data.size else 2))
    return LabelMap(data, spacing, max(num_classes, 2))
