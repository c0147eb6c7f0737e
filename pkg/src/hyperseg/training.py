"""Training for the hypernetwork regime and the three plain U-Net baselines.

Regimes:

* ``hs``   - hypernetwork; every batch is resampled to a random spacing and
  only the hypernetwork weights are optimised.
* ``as``   - one U-Net trained on batches resampled to random spacings.
* ``fs``   - one U-Net trained at a fixed spacing; inputs are resampled to it
  at inference.
* ``fsnr`` - trained exactly like ``fs``; inputs are used as-is at inference.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .hypernet import HyperNetConfig, init_hypernet
from .model import SegModel, check_regime, load_checkpoint, save_checkpoint
from .segnet import UNetConfig, init_weights
from .synthdata import Dataset, SpacingRange
from .volume import PadRecord, crop_back, output_shape, pad_to_multiple, resample_labels_window, resample_window

log = logging.getLogger(__name__)

DICE_EPS = 1.0  # soft Dice smoothing, in voxels


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int, spacing, loss: float):
        super().__init__(f"non-finite loss {loss} at step {step} (spacing {tuple(spacing)})")
        self.step = step
        self.spacing = spacing
        self.loss = loss


@dataclass
class TrainConfig:
    regime: str = "hs"
    spacing_range: SpacingRange = field(default_factory=lambda: SpacingRange.isotropic(0.9, 3.0))
    r_fixed: tuple[float, ...] | None = None
    iterations: int = 5000
    batch_size: int = 1
    patch_size_mm: float = 32.0
    lr: float = 1e-3
    grad_clip: float = 1.0
    w_dice: float = 1.0
    w_ce: float = 1.0
    log_every: int = 10
    seed: int = 0
    foreground_fraction: float = 1 / 3

    def __post_init__(self):
        if isinstance(self.spacing_range, dict):
            self.spacing_range = SpacingRange.from_dict(self.spacing_range)
        if self.r_fixed is not None:
            self.r_fixed = tuple(float(v) for v in self.r_fixed)
        self.regime = check_regime(self.regime, self.r_fixed)
        if self.iterations <= 0:
            raise ValueError("iterations must be > 0")
        if self.w_dice < 0 or self.w_ce < 0 or self.w_dice + self.w_ce == 0:
            raise ValueError("loss weights must be >= 0 and not both 0")
        if not 0 <= self.foreground_fraction <= 1:
            raise ValueError("foreground_fraction must lie in [0, 1]")
        if self.batch_size < 1 or self.log_every < 1:
            raise ValueError("batch_size and log_every must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["spacing_range"] = self.spacing_range.to_dict()
        return d


# loss


def combined_loss(logits: torch.Tensor, labels: torch.Tensor, w_dice: float = 1.0,
                  w_ce: float = 1.0) -> torch.Tensor:
    """w_dice * (1 - mean foreground soft Dice) + w_ce * mean cross-entropy.

    ``logits`` is (N, C, *spatial), ``labels`` (N, *spatial) integer. Soft
    Dice pools all voxels of the batch per class, so the value does not
    depend on sample order.
    """
    num_classes = logits.shape[1]
    labels = labels.long()
    if labels.numel() and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"label ids must lie in [0, {num_classes}), got max {int(labels.max())}")
    ce = F.cross_entropy(logits, labels)
    probs = torch.softmax(logits, dim=1)
    onehot = F.one_hot(labels, num_classes).movedim(-1, 1).to(probs.dtype)
    dims = [0] + list(range(2, logits.ndim))
    inter = (probs * onehot).sum(dims)
    denom = probs.sum(dims) + onehot.sum(dims)
    dice = (2 * inter + DICE_EPS) / (denom + DICE_EPS)
    return w_dice * (1 - dice[1:].mean()) + w_ce * ce


# batches


@dataclass
class Batch:
    images: torch.Tensor  # (N, 1, *spatial), padded
    labels: torch.Tensor  # (N, *spatial), padded with background
    spacing: tuple[float, ...]
    pad: PadRecord
    cases: list[int]


def batch_spacing(config: TrainConfig, rng: np.random.Generator) -> tuple[float, ...]:
    if config.regime in ("fs", "fsnr"):
        return config.r_fixed
    return config.spacing_range.sample(rng)


def patch_shape(patch_size_mm: float, spacing) -> tuple[int, ...]:
    return tuple(max(1, int(math.floor(patch_size_mm / r + 0.5))) for r in spacing)


def foreground_start(lab, spacing, size, full, rng: np.random.Generator,
                     stride: int = 4) -> list[int] | None:
    """Patch origin whose window contains a voxel of a random foreground class.

    Candidates come from a strided view of the label map, so the search stays
    cheap on fine reference grids. Returns None if no foreground is found.
    """
    coarse = np.asarray(lab.data[(slice(None, None, stride),) * lab.ndim])
    present = [c for c in np.unique(coarse) if c != 0]
    if not present:
        return None
    hits = np.argwhere(coarse == rng.choice(present))
    voxel = hits[rng.integers(len(hits))] * stride
    start = []
    for v, s, t, n, m in zip(voxel, lab.spacing, spacing, size, full):
        k = int((v + 0.5) * s / t)
        start.append(int(np.clip(k - rng.integers(n), 0, m - n)))
    return start


def make_batch(config: TrainConfig, dataset: Dataset, rng: np.random.Generator,
               divisor: int) -> Batch:
    """One batch at a single spacing: resample, crop a fixed-size patch in mm, pad."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    spacing = batch_spacing(config, rng)
    size = patch_shape(config.patch_size_mm, spacing)
    images, labels, cases = [], [], []
    for _ in range(config.batch_size):
        i = int(rng.integers(len(dataset)))
        image, lab = dataset.pairs[i]
        full = output_shape(image.shape, image.spacing, spacing)
        if any(n > m for n, m in zip(size, full)):
            raise ValueError(
                f"patch of {config.patch_size_mm} mm ({size} voxels) exceeds volume "
                f"{full} voxels at spacing {spacing}"
            )
        start = None
        if rng.random() < config.foreground_fraction:
            start = foreground_start(lab, spacing, size, full, rng)
        if start is None:
            start = [int(rng.integers(m - n + 1)) for n, m in zip(size, full)]
        img = resample_window(image, spacing, start, size)
        seg = resample_labels_window(lab, spacing, start, size)
        img, pad = pad_to_multiple(img, divisor)
        seg, _ = pad_to_multiple(seg, divisor)
        images.append(img.data)
        labels.append(seg.data)
        cases.append(i)
    images = torch.from_numpy(np.stack(images)[:, None].astype(np.float32))
    labels = torch.from_numpy(np.stack(labels).astype(np.int64))
    return Batch(images, labels, tuple(spacing), pad, cases)


def batch_loss(model: SegModel, batch: Batch, config: TrainConfig) -> torch.Tensor:
    device = model.device
    logits = model.logits(batch.images.to(device), batch.spacing)
    return combined_loss(
        crop_back(logits, batch.pad), crop_back(batch.labels.to(device), batch.pad), config.w_dice, config.w_ce
    )


# steps


def _step(model: SegModel, batch: Batch, optimizer: torch.optim.Optimizer,
          config: TrainConfig, step: int) -> float:
    optimizer.zero_grad(set_to_none=True)
    loss = batch_loss(model, batch, config)
    value = float(loss.detach())
    if not math.isfinite(value):
        raise TrainingDivergedError(step, batch.spacing, value)
    loss.backward()
    if config.grad_clip:
        torch.nn.utils.clip_grad_norm_(model.trainable(), config.grad_clip)
    optimizer.step()
    return value


def train_step_hs(model: SegModel, batch: Batch, optimizer, config: TrainConfig, step: int = 0) -> float:
    """eta = H(r) is recomputed from the hypernetwork every step; only its weights move."""
    if model.hypernet is None:
        raise ValueError("train_step_hs needs a hypernetwork model")
    return _step(model, batch, optimizer, config, step)


def train_step_plain(model: SegModel, batch: Batch, optimizer, config: TrainConfig, step: int = 0) -> float:
    if model.eta is None:
        raise ValueError("train_step_plain needs a plain U-Net model")
    return _step(model, batch, optimizer, config, step)


def make_optimizer(params, lr: float) -> torch.optim.Optimizer:
    try:
        return torch.optim.Adam(params, lr=lr, fused=True)
    except (RuntimeError, TypeError):
        return torch.optim.Adam(params, lr=lr)


def init_model(config: TrainConfig, unet: UNetConfig, hyper: HyperNetConfig | None = None) -> SegModel:
    if config.regime == "hs":
        net = init_hypernet(hyper or HyperNetConfig(input_dim=unet.dim), unet, seed=config.seed)
        return SegModel("hs", unet, config.spacing_range, hypernet=net)
    gen = torch.Generator().manual_seed(config.seed)
    eta = init_weights(unet, generator=gen).requires_grad_()
    return SegModel(config.regime, unet, config.spacing_range, config.r_fixed, eta=eta)


# loop


def train(config: TrainConfig, dataset: Dataset, unet: UNetConfig, out_dir,
          hyper: HyperNetConfig | None = None, resume: bool = False,
          iterations: int | None = None, device=None) -> Path:
    """Run the regime's step loop and write ``model.ckpt`` and ``loss.csv``.

    A loss row (step, loss, spacing) is written every ``log_every`` steps; the
    logged loss is the mean over those steps. Optimiser and sampler state go
    to ``train_state.pt`` so a run can be resumed. ``iterations`` stops early
    (used to split a run for resumption); by default the whole
    ``config.iterations`` are run.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path, state_path, loss_path = out_dir / "model.ckpt", out_dir / "train_state.pt", out_dir / "loss.csv"
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    device = torch.device(device or "cpu")
    if resume:
        model = load_checkpoint(ckpt_path, config.regime).to(device)
        for t in model.trainable():
            t.requires_grad_()
        optimizer = make_optimizer(model.trainable(), config.lr)
        state = torch.load(state_path, weights_only=False)
        optimizer.load_state_dict(state["optimizer"])
        rng.bit_generator.state = state["rng"]
        start = state["step"]
    else:
        model = init_model(config, unet, hyper).to(device)
        optimizer = make_optimizer(model.trainable(), config.lr)
        start = 0
        with open(loss_path, "w", newline="") as f:
            csv.writer(f).writerow(["step", "loss"] + [f"r{i}" for i in range(unet.dim)])
    (out_dir / "train_config.json").write_text(json.dumps(config.to_dict(), indent=2))

    stop = config.iterations if iterations is None else min(config.iterations, start + iterations)
    step_fn = train_step_hs if config.regime == "hs" else train_step_plain
    window = []
    with open(loss_path, "a", newline="") as f:
        writer = csv.writer(f)
        for step in range(start, stop):
            batch = make_batch(config, dataset, rng, unet.divisor)
            window.append(step_fn(model, batch, optimizer, config, step))
            if (step + 1) % config.log_every == 0:
                writer.writerow([step + 1, f"{np.mean(window):.6f}"] + [f"{r:.4f}" for r in batch.spacing])
                f.flush()
                window = []
                if (step + 1) % (config.log_every * 50) == 0:
                    log.info("%s step %d loss %.4f", config.regime, step + 1, np.mean(
                        [float(x) for x in _tail(loss_path, 50)]))
    model.step = stop
    save_checkpoint(ckpt_path, model)
    torch.save({"optimizer": optimizer.state_dict(), "rng": rng.bit_generator.state, "step": stop}, state_path)
    return ckpt_path


def _tail(loss_path, n):
    with open(loss_path) as f:
        rows = list(csv.reader(f))[1:]
    return [r[1] for r in rows[-n:]]
