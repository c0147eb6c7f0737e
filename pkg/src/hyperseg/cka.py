"""Linear CKA between layer activations of spacing-conditioned U-Nets.

Activations are compared on physically aligned crops: whatever the spacing
of the image and network, each layer's features are resampled onto the
grid the crop would have at the reference spacing, so every network yields
matrices of the same shape for the same phantoms.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import shortest_path

from .model import SegModel
from .segnet import UNetConfig, layer_level, layer_names
from .volume import Volume, resample_window

log = logging.getLogger(__name__)

FEATURE_CAP = 8192


# core math


def center(x) -> np.ndarray:
    """Subtract column means (float64)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError(f"need an n x p matrix with n >= 2, got shape {x.shape}")
    return x - x.mean(axis=0, keepdims=True)


def gram(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x @ x.T


def hsic(k, l) -> float:
    """tr(KL) for Gram matrices of centered activations.

    The centering matrices and 1/(n-1)^2 factors of the usual estimator are
    omitted: inputs are already centered and the factors cancel in CKA.
    """
    k, l = np.asarray(k, dtype=np.float64), np.asarray(l, dtype=np.float64)
    if k.ndim != 2 or k.shape[0] != k.shape[1] or k.shape != l.shape:
        raise ValueError(f"need two square Gram matrices of equal size, got {k.shape} and {l.shape}")
    # K and L are symmetric, so tr(KL) is the elementwise product sum
    return float(np.sum(k * l.T))


def _cka_from_grams(k, l, kk: float | None = None, ll: float | None = None) -> float:
    kk = hsic(k, k) if kk is None else kk
    ll = hsic(l, l) if ll is None else ll
    if kk <= 0 or ll <= 0:
        warnings.warn("zero self-HSIC (constant activations); CKA set to 0", RuntimeWarning, stacklevel=3)
        return 0.0
    return float(np.clip(hsic(k, l) / math.sqrt(kk * ll), 0.0, 1.0))


def linear_cka(x, y) -> float:
    """HSIC(K, L) / sqrt(HSIC(K, K) HSIC(L, L)) with K = XX^T, L = YY^T.

    Inputs are centered here, so raw activations may be passed.
    """
    x, y = center(x), center(y)
    if x.shape[0] != y.shape[0]:
        raise ValueError(f"different example counts: {x.shape[0]} vs {y.shape[0]}")
    return _cka_from_grams(gram(x), gram(y))


# activation capture


@dataclass(frozen=True)
class CropSpec:
    """Physical box (mm from the image origin corner) compared across networks.

    At ``reference_spacing`` the crop is ``extent_mm / reference_spacing``
    voxels per axis.
    """

    center_mm: tuple[float, ...]
    extent_mm: float = 32.0
    reference_spacing: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "center_mm", tuple(float(c) for c in self.center_mm))
        if self.extent_mm <= 0 or self.reference_spacing <= 0:
            raise ValueError("crop extent and reference spacing must be positive")
        n = self.extent_mm / self.reference_spacing
        if abs(n - round(n)) > 1e-9:
            raise ValueError("extent_mm must be a whole number of reference voxels")

    @property
    def start_mm(self) -> np.ndarray:
        return np.asarray(self.center_mm) - self.extent_mm / 2

    def grid_size(self, level: int = 0) -> int:
        """Voxels per axis of the crop at ``level`` on the reference grid."""
        n = self.extent_mm / (self.reference_spacing * 2**level)
        if abs(n - round(n)) > 1e-9 or round(n) < 1:
            raise ValueError(f"crop of {self.extent_mm} mm does not tile level {level}")
        return int(round(n))


@dataclass
class ActivationMatrix:
    data: np.ndarray  # (n, p), centered
    layer: str
    tag: str = ""


def extract_window(vol: Volume, spacing, crop: CropSpec, margin_mm: float,
                   divisor: int) -> tuple[Volume, np.ndarray]:
    """Resample the region around ``crop`` (plus ``margin_mm`` per side) to
    ``spacing``.

    Returns the window and the physical position (mm) of its origin corner.
    The window is lengthened to a multiple of ``divisor`` voxels with real
    image content, so no padding is needed before the U-Net.
    """
    spacing = np.asarray(spacing, dtype=np.float64)
    lo = crop.start_mm
    hi = lo + crop.extent_mm
    if (lo < -1e-9).any() or (hi > vol.extent + 1e-9).any():
        raise ValueError(f"crop [{lo}, {hi}] mm exceeds image extent {vol.extent} mm")
    first = np.floor((lo - margin_mm) / spacing + 0.5).astype(int)
    last = np.ceil((hi + margin_mm) / spacing - 0.5).astype(int)
    size = last - first
    size = -(-size // divisor) * divisor
    window = resample_window(vol, tuple(spacing), tuple(first), tuple(size))
    return window, first * spacing


def _lerp_axis(t: torch.Tensor, axis: int, coords: np.ndarray) -> torch.Tensor:
    n = t.shape[axis]
    coords = np.clip(coords, 0, n - 1)
    i0 = np.floor(coords).astype(np.int64)
    i1 = np.minimum(i0 + 1, n - 1)
    shape = [1] * t.ndim
    shape[axis] = len(coords)
    frac = torch.as_tensor(coords - i0, dtype=t.dtype).reshape(shape)
    lo = t.index_select(axis, torch.as_tensor(i0))
    hi = t.index_select(axis, torch.as_tensor(i1))
    return lo + frac * (hi - lo)


def _align(feat: torch.Tensor, origin_mm, spacing, level: int, crop: CropSpec) -> torch.Tensor:
    """Resample a (C, *spatial) feature map onto the crop's reference grid."""
    n = crop.grid_size(level)
    step = crop.reference_spacing * 2**level
    for axis, (o, r, c0) in enumerate(zip(origin_mm, spacing, crop.start_mm)):
        fs = r * 2**level
        physical = c0 + (np.arange(n) + 0.5) * step
        feat = _lerp_axis(feat, axis + 1, (physical - o) / fs - 0.5)
    return feat


def feature_subset(p: int, cap: int, seed: int, layer_index: int) -> np.ndarray | None:
    """Seed-fixed column subset used when a layer has more than ``cap`` features."""
    if p <= cap:
        return None
    rng = np.random.default_rng([seed, layer_index])
    return np.sort(rng.choice(p, size=cap, replace=False))


def capture_activations(model: SegModel, images: Sequence[Volume], layers: Sequence[str],
                        crop: CropSpec, spacing=None, margin_mm: float = 16.0,
                        feature_cap: int = FEATURE_CAP, feature_seed: int = 0,
                        tag: str = "") -> list[ActivationMatrix]:
    """Centered activation matrices of ``layers`` over ``images``.

    Each image is resampled (around the crop) to ``spacing`` (default: its
    own spacing) and run through the model's U-Net for that spacing. Layer
    features are cut to the crop's physical footprint and resampled onto the
    reference grid of the layer, so row ``i`` of every matrix describes the
    same anatomy whatever the spacing. Columns are (channel, voxel) pairs;
    for ``p`` above ``feature_cap`` a seed-fixed subset is kept.
    """
    if len(images) < 2:
        raise ValueError("need at least 2 images")
    unet = model.unet
    all_layers = layer_names(unet)
    index = {name: i for i, name in enumerate(all_layers)}
    unknown = [l for l in layers if l not in index]
    if unknown:
        raise ValueError(f"unknown layers {unknown}")
    rows = {l: [] for l in layers}
    subsets = {}
    with torch.no_grad():
        for vol in images:
            r = tuple(vol.spacing) if spacing is None else tuple(float(s) for s in spacing)
            window, origin = extract_window(vol, r, crop, margin_mm, unet.divisor)
            x = torch.from_numpy(np.ascontiguousarray(window.data, dtype=np.float32))[None, None]
            taps = {}
            model.logits(x.to(model.device), r, taps=taps)
            for l in layers:
                level = layer_level(l, unet)
                feat = _align(taps[l][0].cpu().double(), origin, r, level, crop).reshape(-1).numpy()
                if l not in subsets:
                    subsets[l] = feature_subset(feat.size, feature_cap, feature_seed, index[l])
                rows[l].append(feat if subsets[l] is None else feat[subsets[l]])
    return [ActivationMatrix(center(np.stack(rows[l])), l, tag) for l in layers]


# maps


def _grams(acts: Sequence[ActivationMatrix]):
    g = [gram(a.data) for a in acts]
    return g, [hsic(k, k) for k in g]


def cka_map(acts_a: Sequence[ActivationMatrix], acts_b: Sequence[ActivationMatrix],
            grams_a=None, grams_b=None) -> np.ndarray:
    """Entry (i, j) = linear CKA of layer i of ``acts_a`` and layer j of ``acts_b``."""
    ns = {a.data.shape[0] for a in list(acts_a) + list(acts_b)}
    if len(ns) != 1:
        raise ValueError(f"activation matrices disagree on n: {sorted(ns)}")
    ga, sa = grams_a or _grams(acts_a)
    gb, sb = grams_b or _grams(acts_b)
    out = np.empty((len(ga), len(gb)))
    for i, (k, kk) in enumerate(zip(ga, sa)):
        for j, (l, ll) in enumerate(zip(gb, sb)):
            out[i, j] = _cka_from_grams(k, l, kk, ll)
    return out


def cka_slope(spacings: Sequence[float], maps: Sequence[np.ndarray]) -> np.ndarray:
    """Per-entry least-squares slope of CKA against spacing."""
    x = np.asarray(spacings, dtype=np.float64)
    if x.ndim != 1 or len(x) < 2 or len(x) != len(maps):
        raise ValueError("need >= 2 spacings, one per map")
    if np.ptp(x) == 0:
        raise ValueError("spacings must not all be equal")
    y = np.stack([np.asarray(m, dtype=np.float64) for m in maps])
    xc = x - x.mean()
    return np.tensordot(xc, y - y.mean(axis=0), axes=1) / np.dot(xc, xc)


# layer metadata


def layer_graph_distance(config: UNetConfig) -> np.ndarray:
    """Hop count between tapped activations along the U-Net's data flow,
    including skip connections (treated as undirected)."""
    names = layer_names(config)
    index = {n: i for i, n in enumerate(names)}
    edges = [(i, i + 1) for i in range(len(names) - 1)]
    for level in range(config.levels - 1):
        last_enc = f"enc{level}.conv{config.blocks_per_level - 1}.relu"
        edges.append((index[last_enc], index[f"dec{level}.conv0.conv"]))
    rows, cols = zip(*edges)
    adj = csr_matrix((np.ones(len(edges)), (rows, cols)), shape=(len(names),) * 2)
    return shortest_path(adj, directed=False, unweighted=True)


def layer_metadata(config: UNetConfig) -> dict:
    names = layer_names(config)
    levels = [layer_level(n, config) for n in names]
    return {
        "layers": [
            {"index": i, "name": n, "level": lv, "channels": config.channels(lv),
             "kind": n.rsplit(".", 1)[1], "bottleneck_stage": lv == config.levels - 1}
            for i, (n, lv) in enumerate(zip(names, levels))
        ],
        "graph_distance": layer_graph_distance(config).astype(int).tolist(),
        "same_level": [[int(a == b) for b in levels] for a in levels],
    }


# protocol


def spacing_grid(lo: float = 0.94, hi: float = 2.0, steps: int = 10) -> np.ndarray:
    return np.linspace(lo, hi, steps)


@dataclass
class CKABundle:
    spacings: list[float]
    layers: list[str]
    reference_index: int
    intra: list[np.ndarray]
    inter: dict[int, np.ndarray]
    slope_intra: np.ndarray
    slope_inter: np.ndarray
    cross_seed: np.ndarray | None = None
    config: UNetConfig | None = None
    meta: dict = field(default_factory=dict)

    def maps(self) -> dict[str, np.ndarray]:
        out = {}
        for k, m in enumerate(self.intra):
            out[f"intra_{k:02d}_r{self.spacings[k]:.3f}"] = m
        for k, m in self.inter.items():
            out[f"inter_{k:02d}_r{self.spacings[k]:.3f}"] = m
        out["slope_intra"] = self.slope_intra
        out["slope_inter"] = self.slope_inter
        if self.cross_seed is not None:
            out["cross_seed"] = self.cross_seed
        return out

    def inter_minima(self) -> list[dict]:
        """Layer where each inter-network map's diagonal is lowest."""
        out = []
        for k, m in self.inter.items():
            i = int(np.argmin(np.diag(m)))
            out.append({
                "spacing": self.spacings[k], "layer": self.layers[i],
                "value": float(m[i, i]),
                "bottleneck_stage": layer_level(self.layers[i], self.config) == self.config.levels - 1,
            })
        return out


def run_cka_protocol(model: SegModel, phantoms: Sequence[Volume], spacings=None,
                     crop: CropSpec | None = None, second: SegModel | None = None,
                     margin_mm: float = 16.0, feature_cap: int = FEATURE_CAP,
                     seed: int = 0) -> CKABundle:
    """Vary image and network spacing jointly over ``spacings`` and compare
    the resulting U-Nets layer by layer.

    Produces one intra-network map per spacing, an inter-network map between
    the network closest to 1 mm and each other network, slope maps of both
    against spacing and, if ``second`` is given, the map between two
    hypernetworks' U-Nets at the reference spacing.
    """
    if model.regime != "hs":
        raise ValueError("the CKA protocol needs a hypernetwork checkpoint")
    spacings = [float(s) for s in (spacing_grid() if spacings is None else spacings)]
    if crop is None:
        crop = CropSpec(tuple(float(e) / 2 for e in phantoms[0].extent))
    layers = layer_names(model.unet)
    ref = int(np.argmin([abs(s - crop.reference_spacing) for s in spacings]))
    dim = model.unet.dim
    acts, grams = [], []
    for k, r in enumerate(spacings):
        a = capture_activations(model, phantoms, layers, crop, spacing=(r,) * dim,
                                margin_mm=margin_mm, feature_cap=feature_cap,
                                feature_seed=seed, tag=f"r={r:.3f}")
        acts.append(a)
        grams.append(_grams(a))
        log.info("captured activations at %.3f mm", r)
    intra = [cka_map(a, a, g, g) for a, g in zip(acts, grams)]
    inter = {k: cka_map(acts[ref], acts[k], grams[ref], grams[k]) for k in range(len(spacings)) if k != ref}
    others = sorted(inter)
    bundle = CKABundle(
        spacings=spacings, layers=layers, reference_index=ref, intra=intra, inter=inter,
        slope_intra=cka_slope(spacings, intra),
        slope_inter=cka_slope([spacings[k] for k in others], [inter[k] for k in others]),
        config=model.unet,
    )
    if second is not None:
        r = (spacings[ref],) * dim
        b = capture_activations(second, phantoms, layers, crop, spacing=r, margin_mm=margin_mm,
                                feature_cap=feature_cap, feature_seed=seed, tag="second")
        bundle.cross_seed = cka_map(acts[ref], b, grams[ref])
    bundle.meta = {"n": len(phantoms), "crop_center_mm": list(crop.center_mm),
                   "crop_extent_mm": crop.extent_mm, "margin_mm": margin_mm,
                   "feature_cap": feature_cap}
    return bundle


def write_bundle(bundle: CKABundle, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, m in bundle.maps().items():
        with open(out_dir / f"{name}.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["layer"] + bundle.layers)
            for layer, row in zip(bundle.layers, m):
                w.writerow([layer] + [f"{v:.6f}" for v in row])
    (out_dir / "layers.json").write_text(json.dumps(layer_metadata(bundle.config), indent=1))
    summary = {
        "spacings": bundle.spacings, "reference_spacing": bundle.spacings[bundle.reference_index],
        "maps": sorted(bundle.maps()), "inter_minima": bundle.inter_minima(), **bundle.meta,
    }
    (out_dir / "bundle.json").write_text(json.dumps(summary, indent=1))
    return out_dir
