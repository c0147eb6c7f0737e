"""Synthetic labelled phantoms and simulated native-resolution samples.

A phantom holds one large instance of each structure role (solid ellipsoid,
capsule-shaped tube, thick spherical shell), drawn at a fine reference
spacing. Small copies of the same shapes, with the same intensities, are
scattered through the background and labelled as background. Telling a
structure from a distractor therefore needs its physical size, which a
network only knows if it knows the voxel spacing.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .volume import LabelMap, Volume, load_labels, load_volume, resample_image, resample_labels, save_labels, save_volume

ROLES = ("ellipsoid", "tube", "shell")


class InfeasiblePhantomError(ValueError):
    pass


@dataclass(frozen=True)
class SpacingRange:
    """Per-axis closed spacing intervals in mm."""

    lo: tuple[float, ...]
    hi: tuple[float, ...]

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lo)
        hi = tuple(float(v) for v in self.hi)
        if len(lo) != len(hi):
            raise ValueError("lo and hi must have the same length")
        for a, b in zip(lo, hi):
            if not (0 < a <= b):
                raise ValueError(f"invalid interval [{a}, {b}]")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def isotropic(cls, lo: float, hi: float, dim: int = 3) -> "SpacingRange":
        return cls((lo,) * dim, (hi,) * dim)

    @property
    def dim(self) -> int:
        return len(self.lo)

    def sample(self, rng: np.random.Generator) -> tuple[float, ...]:
        return tuple(float(v) for v in rng.uniform(self.lo, self.hi))

    def contains(self, spacing: Sequence[float]) -> bool:
        return all(a <= s <= b for s, a, b in zip(spacing, self.lo, self.hi))

    def to_dict(self) -> dict:
        return {"lo": list(self.lo), "hi": list(self.hi)}

    @classmethod
    def from_dict(cls, d: dict) -> "SpacingRange":
        return cls(tuple(d["lo"]), tuple(d["hi"]))


@dataclass(frozen=True)
class StructureSpec:
    """Size ranges are in mm. For a shell, ``size`` is the outer radius and
    ``thickness`` the wall thickness; for a tube, ``size`` is the radius and
    ``length`` the axis length; for an ellipsoid, ``size`` bounds the
    semi-axes."""

    role: str
    size: tuple[float, float]
    intensity: tuple[float, float]
    thickness: tuple[float, float] = (0.0, 0.0)
    length: tuple[float, float] = (0.0, 0.0)


def default_structures() -> tuple[StructureSpec, ...]:
    return (
        StructureSpec("ellipsoid", size=(6.0, 9.0), intensity=(0.45, 0.6)),
        StructureSpec("tube", size=(3.5, 4.5), intensity=(0.7, 0.85), length=(16.0, 24.0)),
        StructureSpec("shell", size=(8.0, 10.0), intensity=(0.9, 1.0), thickness=(2.5, 3.5)),
    )


@dataclass(frozen=True)
class PhantomSpec:
    dim: int = 3
    reference_spacing: float = 0.5
    canvas_size_mm: float = 64.0
    num_classes: int = 4
    structures: tuple[StructureSpec, ...] = field(default_factory=default_structures)
    # distractors: scaled copies labelled background
    distractor_count: tuple[int, int] = (6, 10)
    distractor_scale: tuple[float, float] = (0.3, 0.45)
    background_intensity: tuple[float, float] = (0.0, 0.1)
    noise_sigma: float = 0.05
    min_class_fraction: float = 0.0025
    seed: int = 0

    def __post_init__(self):
        if self.dim not in (2, 3):
            raise ValueError("dim must be 2 or 3")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.num_classes - 1 > len(self.structures):
            raise ValueError(
                f"{self.num_classes - 1} foreground classes but only "
                f"{len(self.structures)} structure roles"
            )
        if self.reference_spacing <= 0 or self.canvas_size_mm <= 0:
            raise ValueError("spacing and canvas size must be positive")
        for s in self.structures:
            if s.role not in ROLES:
                raise ValueError(f"unknown structure role {s.role!r}")

    @property
    def grid_size(self) -> int:
        return int(round(self.canvas_size_mm / self.reference_spacing))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        d = dict(d)
        if "structures" in d:
            d["structures"] = tuple(
                StructureSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in s.items()})
                for s in d["structures"]
            )
        for key in ("distractor_count", "distractor_scale", "background_intensity"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def _random_rotation(rng, dim):
    q, r = np.linalg.qr(rng.normal(size=(dim, dim)))
    return q * np.sign(np.diag(r))


def _bounding_radius(s: StructureSpec, scale: float = 1.0) -> float:
    if s.role == "tube":
        return scale * (s.size[1] + s.length[1] / 2)
    return scale * s.size[1]


def _shape_mask(coords, center, role, params, rot):
    """Boolean mask of one shape on a grid of physical coordinates.

    ``coords`` has shape (dim, *grid).
    """
    rel = np.tensordot(rot.T, coords - center.reshape((-1,) + (1,) * (coords.ndim - 1)), axes=1)
    if role == "ellipsoid":
        axes = params["axes"].reshape((-1,) + (1,) * (coords.ndim - 1))
        return np.sum((rel / axes) ** 2, axis=0) <= 1.0
    if role == "shell":
        r = np.sqrt(np.sum(rel**2, axis=0))
        return (r <= params["outer"]) & (r >= params["outer"] - params["thickness"])
    # tube: capsule around the first rotated axis
    half = params["length"] / 2
    along = np.clip(rel[0], -half, half)
    rel0 = rel.copy()
    rel0[0] = rel[0] - along
    return np.sum(rel0**2, axis=0) <= params["radius"] ** 2


def _draw_params(s: StructureSpec, rng, dim, scale=1.0):
    if s.role == "ellipsoid":
        return {"axes": scale * rng.uniform(*s.size, size=dim)}
    if s.role == "shell":
        outer = rng.uniform(*s.size)
        return {"outer": scale * outer, "thickness": scale * min(rng.uniform(*s.thickness), 0.75 * outer)}
    return {"radius": scale * rng.uniform(*s.size), "length": scale * rng.uniform(*s.length)}


def _grid(n, spacing, dim, subsample=1):
    axis = (np.arange(0, n, subsample) + 0.5) * spacing
    return np.stack(np.meshgrid(*([axis] * dim), indexing="ij"))


_RESTARTS = 20


def _place_structures(structures, coarse, extent, rng):
    """Non-overlapping placement on a coarse occupancy grid, largest first.

    Returns None when some structure cannot be placed.
    """
    dim = coarse.shape[0]
    occupied = np.zeros(coarse.shape[1:], dtype=bool)
    shapes = []
    order = sorted(enumerate(structures, start=1), key=lambda ls: -_bounding_radius(ls[1]))
    for label, s in order:
        margin = min(_bounding_radius(s), extent / 2)
        for _ in range(100):
            params = _draw_params(s, rng, dim)
            rot = _random_rotation(rng, dim)
            center = rng.uniform(margin, extent - margin, size=dim)
            m = _shape_mask(coarse, center, s.role, params, rot)
            if not (m & occupied).any():
                occupied |= _dilate(m)
                shapes.append((label, s, center, params, rot))
                break
        else:
            return None
    return sorted(shapes, key=lambda t: t[0]), occupied


def generate_phantom(spec: PhantomSpec, rng: np.random.Generator | None = None) -> tuple[Volume, LabelMap]:
    """Draw one image/label pair at ``spec.reference_spacing``.

    Structures are placed without overlapping each other (checked on a
    coarse grid); distractors avoid the structures. Raises
    :class:`InfeasiblePhantomError` if placement fails.
    """
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    dim, n, h = spec.dim, spec.grid_size, spec.reference_spacing
    extent = n * h
    structures = spec.structures[: spec.num_classes - 1]
    for s in structures:
        if 2 * _bounding_radius(s) > extent:
            raise InfeasiblePhantomError(
                f"{s.role} of bounding radius {_bounding_radius(s)} mm does not fit a "
                f"{extent} mm canvas"
            )

    step = max(1, int(round(2.0 / h)))
    coarse = _grid(n, h, dim, subsample=step)
    for _ in range(_RESTARTS):
        placed = _place_structures(structures, coarse, extent, rng)
        if placed is not None:
            shapes, occupied = placed
            break
    else:
        raise InfeasiblePhantomError(
            f"could not place {len(structures)} structures without overlap in a "
            f"{extent} mm canvas"
        )

    intensities = {label: rng.uniform(*s.intensity) for label, s, *_ in shapes}
    distractors = []
    for _ in range(int(rng.integers(spec.distractor_count[0], spec.distractor_count[1] + 1))):
        label = int(rng.integers(1, len(structures) + 1))
        s = structures[label - 1]
        scale = rng.uniform(*spec.distractor_scale)
        rad = _bounding_radius(s, scale)
        for _ in range(50):
            params = _draw_params(s, rng, dim, scale)
            rot = _random_rotation(rng, dim)
            center = rng.uniform(rad, extent - rad, size=dim)
            m = _shape_mask(coarse, center, s.role, params, rot)
            if m.any() and not (m & occupied).any():
                occupied |= _dilate(m)
                distractors.append((label, s, center, params, rot))
                break

    coords = _grid(n, h, dim)
    labels = np.zeros((n,) * dim, dtype=np.uint8)
    image = np.full((n,) * dim, rng.uniform(*spec.background_intensity), dtype=np.float32)
    for label, s, center, params, rot in shapes:
        m = _shape_mask(coords, center, s.role, params, rot)
        labels[m] = label
        image[m] = intensities[label]
    for label, s, center, params, rot in distractors:
        m = _shape_mask(coords, center, s.role, params, rot)
        image[m] = intensities[label]
    del coords
    lo, hi = spec.background_intensity[0], max(s.intensity[1] for s in structures)
    image += rng.normal(0.0, spec.noise_sigma * (hi - lo), size=image.shape).astype(np.float32)

    counts = np.bincount(labels.ravel(), minlength=spec.num_classes)
    frac = counts / labels.size
    if (frac[1:] < spec.min_class_fraction).any():
        raise InfeasiblePhantomError(f"class fractions {frac} below {spec.min_class_fraction}")
    spacing = (h,) * dim
    return Volume(image, spacing), LabelMap(labels, spacing, spec.num_classes)


def _dilate(mask):
    out = mask.copy()
    for axis in range(mask.ndim):
        out |= np.roll(mask, 1, axis) | np.roll(mask, -1, axis)
    return out


def sample_native(pair: tuple[Volume, LabelMap], spacing_range: SpacingRange, rng: np.random.Generator):
    """Resample a reference pair to a spacing drawn uniformly from the range."""
    image, labels = pair
    if any(lo < s for lo, s in zip(spacing_range.lo, image.spacing)):
        raise ValueError(
            f"spacing range {spacing_range.lo} is finer than the reference spacing "
            f"{image.spacing}; refusing to fabricate detail"
        )
    spacing = spacing_range.sample(rng)
    return resample_image(image, spacing), resample_labels(labels, spacing), spacing


# on-disk datasets


def write_dataset(out_dir, spec: PhantomSpec, count: int, spacing_range: SpacingRange,
                  prefix: str = "case") -> Path:
    """Generate ``count`` phantoms seeded ``spec.seed + i`` and write a manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pairs = []
    for i in range(count):
        image, labels = generate_phantom(spec, np.random.default_rng(spec.seed + i))
        name = f"{prefix}{i:03d}"
        save_volume(out_dir / f"{name}_image", image)
        save_labels(out_dir / f"{name}_labels", labels)
        pairs.append({"id": name, "image": f"{name}_image.raw", "labels": f"{name}_labels.raw"})
    manifest = {
        "pairs": pairs,
        "reference_spacing_mm": [spec.reference_spacing] * spec.dim,
        "spacing_range": spacing_range.to_dict(),
        "num_classes": spec.num_classes,
        "phantom": spec.to_dict(),
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


@dataclass
class Dataset:
    ids: list[str]
    pairs: list[tuple[Volume, LabelMap]]
    spacing_range: SpacingRange
    num_classes: int

    def __len__(self) -> int:
        return len(self.pairs)


def load_dataset(manifest_path, limit: int | None = None, mmap: bool = True) -> Dataset:
    """Load the pairs listed in a manifest (memory-mapped by default)."""
    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text())
    root = manifest_path.parent
    entries = manifest["pairs"][:limit]
    pairs = [(load_volume(root / e["image"], mmap), load_labels(root / e["labels"], mmap)) for e in entries]
    return Dataset(
        [e["id"] for e in entries],
        pairs,
        SpacingRange.from_dict(manifest["spacing_range"]),
        int(manifest["num_classes"]),
    )
