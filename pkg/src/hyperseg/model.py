"""Trained segmentation models and their checkpoint files.

A checkpoint is a single file::

    b"HSEGCKPT" | uint64 little-endian header length | JSON header | payload

The payload is the raw little-endian float32 concatenation of the tensors
listed in ``header["tensors"]`` (name, shape, offset in elements). For the
hypernetwork regime those tensors are the MLP weights; for the other regimes
it is the single flat U-Net weight vector ``eta``.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .hypernet import HyperNet, HyperNetConfig
from .segnet import UNetConfig, dispatch, param_count, param_layout, unet_forward
from .synthdata import SpacingRange

MAGIC = b"HSEGCKPT"
REGIMES = ("fs", "fsnr", "as", "hs")


class CheckpointError(ValueError):
    pass


def check_regime(regime: str, r_fixed) -> str:
    regime = regime.lower()
    if regime not in REGIMES:
        raise ValueError(f"unknown regime {regime!r}; expected one of {REGIMES}")
    if (regime in ("fs", "fsnr")) != (r_fixed is not None):
        raise ValueError(f"regime {regime} {'requires' if r_fixed is None else 'takes no'} r_fixed")
    return regime


@dataclass
class SegModel:
    """A U-Net together with where its weights come from.

    ``hypernet`` is set for the hs regime, ``eta`` for the others.
    """

    regime: str
    unet: UNetConfig
    spacing_range: SpacingRange
    r_fixed: tuple[float, ...] | None = None
    hypernet: HyperNet | None = None
    eta: torch.Tensor | None = None
    step: int = 0

    def __post_init__(self):
        self.regime = check_regime(self.regime, self.r_fixed)
        if self.r_fixed is not None:
            self.r_fixed = tuple(float(v) for v in self.r_fixed)
        if (self.regime == "hs") != (self.hypernet is not None):
            raise ValueError("the hs regime is exactly the one that carries a hypernetwork")
        if self.regime != "hs":
            if self.eta is None or self.eta.shape != (param_count(self.unet),):
                raise ValueError(f"{self.regime} model needs eta of length {param_count(self.unet)}")
        self.layout = param_layout(self.unet)

    def weights(self, spacing) -> torch.Tensor:
        """Flat U-Net weights used for an input at ``spacing``."""
        if self.hypernet is not None:
            return self.hypernet(tuple(float(s) for s in spacing))
        return self.eta

    def logits(self, image: torch.Tensor, spacing, taps=None) -> torch.Tensor:
        return unet_forward(image, dispatch(self.weights(spacing), self.layout), self.unet, taps=taps)

    @property
    def device(self) -> torch.device:
        return self.trainable()[0].device

    def to(self, device) -> "SegModel":
        """Move the trainable state to ``device`` in place."""
        if self.hypernet is not None:
            self.hypernet.to(device)
        else:
            self.eta = self.eta.detach().to(device).requires_grad_(self.eta.requires_grad)
        return self

    def trainable(self) -> list[torch.Tensor]:
        if self.hypernet is not None:
            return list(self.hypernet.parameters())
        return [self.eta]

    def as_regime(self, regime: str) -> "SegModel":
        """Same weights under another plain regime (fs and fsnr train identically)."""
        if self.regime == "hs" or regime == "hs":
            raise ValueError("only fs/fsnr/as models can be relabelled")
        return SegModel(regime, self.unet, self.spacing_range, self.r_fixed, eta=self.eta, step=self.step)


def _tensors(model: SegModel) -> list[tuple[str, torch.Tensor]]:
    if model.hypernet is not None:
        return list(model.hypernet.state_dict().items())
    return [("eta", model.eta)]


def save_checkpoint(path, model: SegModel) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries, blobs, offset = [], [], 0
    for name, t in _tensors(model):
        arr = t.detach().cpu().numpy().astype("<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
        blobs.append(arr.tobytes(order="C"))
    header = {
        "format": 1,
        "regime": model.regime,
        "unet": model.unet.to_dict(),
        "hypernet": model.hypernet.config.to_dict() if model.hypernet is not None else None,
        "spacing_range": model.spacing_range.to_dict(),
        "r_fixed": list(model.r_fixed) if model.r_fixed is not None else None,
        "step": model.step,
        "dtype": "float32",
        "tensors": entries,
        "numel": offset,
    }
    raw = json.dumps(header).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(raw)))
        f.write(raw)
        for b in blobs:
            f.write(b)
    return path


def read_header(path) -> tuple[dict, int]:
    with open(path, "rb") as f:
        if f.read(len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        (n,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(n))
    return header, len(MAGIC) + 8 + n


def load_checkpoint(path, regime: str | None = None) -> SegModel:
    """Load a model; ``regime`` (if given) must match the stored one."""
    header, start = read_header(path)
    if regime is not None and header["regime"] != regime:
        raise CheckpointError(f"{path}: checkpoint regime {header['regime']!r} != requested {regime!r}")
    payload = Path(path).read_bytes()[start:]
    if len(payload) != 4 * header["numel"]:
        raise CheckpointError(f"{path}: expected {4 * header['numel']} payload bytes, found {len(payload)}")
    flat = np.frombuffer(payload, dtype="<f4").astype(np.float32)
    tensors = {
        e["name"]: torch.from_numpy(flat[e["offset"] : e["offset"] + math.prod(e["shape"])].reshape(e["shape"]).copy())
        for e in header["tensors"]
    }
    unet = UNetConfig(**header["unet"])
    spacing_range = SpacingRange.from_dict(header["spacing_range"])
    r_fixed = tuple(header["r_fixed"]) if header["r_fixed"] is not None else None
    if header["regime"] == "hs":
        net = HyperNet(HyperNetConfig(**header["hypernet"]), unet)
        net.load_state_dict(tensors)
        return SegModel("hs", unet, spacing_range, hypernet=net, step=header["step"])
    if set(tensors) != {"eta"}:
        raise CheckpointError(f"{path}: plain checkpoints hold exactly one tensor 'eta'")
    return SegModel(header["regime"], unet, spacing_range, r_fixed, eta=tensors["eta"], step=header["step"])
