"""Scoring at working resolution, Monte-Carlo interval evaluation, dense
spacing sweeps, snapping to the training range, and cost benchmarks."""

from __future__ import annotations

import csv
import ctypes
import re
import statistics
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from .model import SegModel
from .synthdata import Dataset, SpacingRange
from .volume import LabelMap, Volume, crop_back, pad_to_multiple, resample_image, resample_labels


# Dice


def dice_score(pred: LabelMap, gt: LabelMap) -> tuple[list[float], float]:
    """Per-foreground-class hard Dice and their mean.

    A class absent from both maps scores 1.
    """
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    if not np.allclose(pred.spacing, gt.spacing):
        raise ValueError(f"spacing mismatch: {pred.spacing} vs {gt.spacing}")
    num_classes = max(pred.num_classes, gt.num_classes)
    p = np.bincount(pred.data.ravel(), minlength=num_classes)
    g = np.bincount(gt.data.ravel(), minlength=num_classes)
    same = pred.data == gt.data
    inter = np.bincount(gt.data[same].ravel(), minlength=num_classes)
    per_class = []
    for c in range(1, num_classes):
        denom = p[c] + g[c]
        per_class.append(1.0 if denom == 0 else 2.0 * inter[c] / denom)
    return per_class, float(np.mean(per_class))


# prediction


def snap_to_training_range(spacing: Sequence[float], spacing_range: SpacingRange) -> tuple[float, ...]:
    """Clamp each spacing component into the training interval."""
    return tuple(float(np.clip(s, lo, hi)) for s, lo, hi in zip(spacing, spacing_range.lo, spacing_range.hi))


def _segment(model: SegModel, vol: Volume) -> LabelMap:
    """Forward ``vol`` through the model at ``vol.spacing``, argmax, unpad."""
    padded, pad = pad_to_multiple(vol, model.unet.divisor)
    x = torch.from_numpy(np.ascontiguousarray(padded.data, dtype=np.float32))[None, None]
    with torch.no_grad():
        logits = model.logits(x.to(model.device), vol.spacing)
    labels = crop_back(logits.argmax(1)[0], pad).cpu().numpy().astype(np.uint8)
    return LabelMap(labels, vol.spacing, model.unet.num_classes)


def _via_spacing(model: SegModel, vol: Volume, spacing) -> LabelMap:
    """Resample to ``spacing``, segment there, pull labels back onto ``vol``'s grid."""
    pred = _segment(model, resample_image(vol, spacing))
    return resample_labels(pred, vol.spacing, shape=vol.shape)


def predict(model: SegModel, vol: Volume, snap: bool = False) -> LabelMap:
    """Segment ``vol`` and return labels on its own grid.

    fs resamples to its training spacing and back; fsnr, as and hs run at the
    native spacing (hs generating weights for it). With ``snap``, as/hs
    inputs outside the training range are first resampled to the nearest
    spacing inside it.
    """
    if vol.ndim != model.unet.dim:
        raise ValueError(f"{vol.ndim}-D volume for a {model.unet.dim}-D model")
    if model.regime == "fs":
        return _via_spacing(model, vol, model.r_fixed)
    if snap and model.regime in ("as", "hs"):
        target = snap_to_training_range(vol.spacing, model.spacing_range)
        if target != tuple(vol.spacing):
            return _via_spacing(model, vol, target)
    return _segment(model, vol)


# Monte-Carlo evaluation


@dataclass
class EvalRow:
    regime: str
    case: str
    spacing: tuple[float, ...]
    dice: list[float]
    mean_dice: float
    time_s: float
    peak_bytes: int
    draw: int = 0

    def as_dict(self) -> dict:
        d = {"regime": self.regime, "draw": self.draw, "case": self.case}
        d.update({f"spacing{i}": f"{s:.4f}" for i, s in enumerate(self.spacing)})
        d.update({f"dice{c + 1}": f"{v:.5f}" for c, v in enumerate(self.dice)})
        d.update({"mean_dice": f"{self.mean_dice:.5f}", "time_s": f"{self.time_s:.4f}",
                  "peak_bytes": self.peak_bytes})
        return d


@dataclass
class Summary:
    regime: str
    mean: float
    std: float
    n: int

    def table_cell(self) -> str:
        return f"{self.mean:.2f} ({self.std:.2f})"


def summarize(rows: Sequence[EvalRow]) -> list[Summary]:
    out = []
    for regime in dict.fromkeys(r.regime for r in rows):
        values = [r.mean_dice for r in rows if r.regime == regime]
        out.append(Summary(regime, float(np.mean(values)), float(np.std(values)), len(values)))
    return out


Predictor = Callable[[Volume], LabelMap]


def _as_predictors(models: Mapping[str, SegModel | Predictor], snap: bool) -> dict[str, Predictor]:
    out = {}
    for name, m in models.items():
        if isinstance(m, SegModel):
            out[name] = lambda v, m=m: predict(m, v, snap=snap)
        else:
            out[name] = m
    return out


def score_case(predictors: Mapping[str, Predictor], image: Volume, labels: LabelMap,
               case: str, draw: int = 0) -> list[EvalRow]:
    rows = []
    for name, fn in predictors.items():
        probe = MemoryProbe()
        with probe:
            t0 = time.perf_counter()
            pred = fn(image)
            elapsed = time.perf_counter() - t0
        per_class, mean = dice_score(pred, labels)
        rows.append(EvalRow(name, case, tuple(image.spacing), per_class, mean, elapsed, probe.peak, draw))
    return rows


def evaluate_mc(models: Mapping[str, SegModel | Predictor], dataset: Dataset,
                interval: SpacingRange, n_draws: int, seed: int = 0,
                snap: bool = False) -> tuple[list[EvalRow], list[Summary]]:
    """Table-style evaluation: for each draw pick one spacing uniformly from
    ``interval``, resample every test pair to it and score every model there.

    ``models`` maps a row label to a :class:`SegModel` or to any callable
    ``Volume -> LabelMap`` (e.g. an oracle).
    """
    if n_draws < 1:
        raise ValueError("n_draws must be >= 1")
    if len(dataset) == 0:
        raise ValueError("empty test set")
    rng = np.random.default_rng(seed)
    predictors = _as_predictors(models, snap)
    rows = []
    for draw in range(n_draws):
        spacing = interval.sample(rng)
        for case, (image, labels) in zip(dataset.ids, dataset.pairs):
            native = resample_image(image, spacing)
            gt = resample_labels(labels, spacing)
            rows += score_case(predictors, native, gt, case, draw)
    return rows, summarize(rows)


# interval notation

_FACTOR = re.compile(
    r"(?:\[\s*([0-9.]+)\s*,\s*([0-9.]+)\s*\]|([0-9.]+))\s*(?:\^\s*(\d+)|([²³]))?"
)
_SUPERSCRIPT = {"²": 2, "³": 3}


def parse_interval(text: str) -> tuple[str, SpacingRange]:
    """Parse box notation like ``"BRATS [0.5, 3.5]³"`` or
    ``"SPIDER [1, 5]×[0.2, 1.5]²"``; a bare number is a degenerate interval.

    Returns ``(name, range)``; the name is whatever precedes the first factor.
    """
    m = re.search(r"[\[0-9]", text)
    if m is None:
        raise ValueError(f"no interval in {text!r}")
    name = text[: m.start()].strip()
    body = text[m.start():]
    lo, hi = [], []
    for part in re.split(r"\s*[×x*]\s*", body.strip()):
        fm = _FACTOR.fullmatch(part.strip())
        if fm is None:
            raise ValueError(f"cannot parse interval factor {part!r} in {text!r}")
        if fm.group(3) is not None:
            a = b = float(fm.group(3))
        else:
            a, b = float(fm.group(1)), float(fm.group(2))
        power = int(fm.group(4)) if fm.group(4) else _SUPERSCRIPT.get(fm.group(5), 1)
        lo += [a] * power
        hi += [b] * power
    return name, SpacingRange(tuple(lo), tuple(hi))


# dense sweeps


@dataclass
class SweepRow:
    regime: str
    step: int
    spacing: tuple[float, ...]
    mean_dice: float
    std_dice: float
    in_range: bool

    def as_dict(self) -> dict:
        d = {"regime": self.regime, "step": self.step}
        d.update({f"spacing{i}": f"{s:.4f}" for i, s in enumerate(self.spacing)})
        d.update({"mean_dice": f"{self.mean_dice:.5f}", "std_dice": f"{self.std_dice:.5f}",
                  "in_range": int(self.in_range)})
        return d


def segment_points(start: Sequence[float], end: Sequence[float], steps: int) -> list[tuple[float, ...]]:
    if steps < 2:
        raise ValueError("a sweep needs at least 2 steps")
    start, end = np.asarray(start, float), np.asarray(end, float)
    if (start <= 0).any() or (end <= 0).any():
        raise ValueError("segment endpoints must be positive")
    return [tuple(float(v) for v in start + t * (end - start)) for t in np.linspace(0.0, 1.0, steps)]


def dense_sweep(models: Mapping[str, SegModel | Predictor], dataset: Dataset,
                start: Sequence[float], end: Sequence[float], steps: int,
                training_range: SpacingRange) -> list[SweepRow]:
    """Mean Dice at evenly spaced points of a spacing segment, per model.

    Rows are flagged in/out of the training range.
    """
    predictors = _as_predictors(models, snap=False)
    rows = []
    for k, spacing in enumerate(segment_points(start, end, steps)):
        scores = {name: [] for name in predictors}
        for case, (image, labels) in zip(dataset.ids, dataset.pairs):
            native = resample_image(image, spacing)
            gt = resample_labels(labels, spacing)
            for row in score_case(predictors, native, gt, case):
                scores[row.regime].append(row.mean_dice)
        for name, values in scores.items():
            rows.append(SweepRow(name, k, spacing, float(np.mean(values)), float(np.std(values)),
                                 training_range.contains(spacing)))
    return rows


def snapped(model: SegModel) -> Predictor:
    return lambda v: predict(model, v, snap=True)


# CSV output


def write_rows(rows, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    dicts = [r.as_dict() for r in rows]
    fields = list(dict.fromkeys(k for d in dicts for k in d))
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fields)
        writer.writeheader()
        writer.writerows(dicts)
    return path


def write_summary(summaries: Sequence[Summary], path, interval: str = "") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["interval", "regime", "mean_dice", "std_dice", "n", "cell"])
        for s in summaries:
            writer.writerow([interval, s.regime, f"{s.mean:.5f}", f"{s.std:.5f}", s.n, s.table_cell()])
    return path


# benchmarking


def _status_kb(field_name: str) -> int:
    with open("/proc/self/status") as f:
        for line in f:
            if line.startswith(field_name + ":"):
                return int(line.split()[1])
    raise OSError(field_name)


def _set_mmap_threshold(nbytes: int) -> None:
    try:
        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(-3, nbytes)  # M_MMAP_THRESHOLD
        libc.malloc_trim(0)
    except (OSError, AttributeError):
        pass


def _release_freed_memory():
    """Serve large allocations from mmap so frees lower RSS immediately.

    Without this glibc raises its mmap threshold after the first large free
    and keeps freed blocks in the heap, which hides later peaks.
    """
    _set_mmap_threshold(1 << 16)


def _reuse_freed_memory():
    """Keep freed blocks in the heap, so timed runs do not pay fresh page faults."""
    _set_mmap_threshold(1 << 25)


class MemoryProbe:
    """Peak memory above the starting level while the block runs.

    On CUDA this is the allocator high-water mark. On the host it resets the
    kernel's resident-set high-water mark (``VmHWM``) and reads it back,
    falling back to polling ``VmRSS`` where the reset is not permitted.
    ``source`` tags which probe produced the number.
    """

    def __init__(self, device: str = "cpu"):
        self.device = device
        self.peak = 0
        self.source = ""

    def __enter__(self):
        if self.device.startswith("cuda"):
            torch.cuda.synchronize()
            torch.cuda.reset_peak_memory_stats()
            self._base = torch.cuda.memory_allocated()
            self.source = "cuda-allocator"
            return self
        self._base = _status_kb("VmRSS")
        try:
            with open("/proc/self/clear_refs", "w") as f:
                f.write("5")
            self.source = "host-vmhwm"
        except OSError:
            self.source = "host-rss-polled"
            self._stop = threading.Event()
            self._polled = self._base
            self._thread = threading.Thread(target=self._poll, daemon=True)
            self._thread.start()
        return self

    def _poll(self):
        while not self._stop.is_set():
            self._polled = max(self._polled, _status_kb("VmRSS"))
            time.sleep(0.001)

    def __exit__(self, *exc):
        if self.source == "cuda-allocator":
            torch.cuda.synchronize()
            self.peak = torch.cuda.max_memory_allocated() - self._base
        elif self.source == "host-vmhwm":
            self.peak = max(0, _status_kb("VmHWM") - self._base) * 1024
        else:
            self._stop.set()
            self._thread.join()
            self.peak = max(0, self._polled - self._base) * 1024
        return False


@dataclass
class BenchResult:
    regime: str
    spacing: tuple[float, ...]
    voxels: int
    time_s: float
    peak_bytes: int
    memory_source: str
    hypernet_time_s: float = 0.0
    times: list[float] = field(default_factory=list)

    def as_dict(self) -> dict:
        d = {"regime": self.regime}
        d.update({f"spacing{i}": f"{s:.4f}" for i, s in enumerate(self.spacing)})
        d.update({
            "voxels": self.voxels, "time_s": f"{self.time_s:.5f}", "peak_bytes": self.peak_bytes,
            "memory_source": self.memory_source, "hypernet_time_s": f"{self.hypernet_time_s:.5f}",
        })
        return d


def _sync(device: torch.device):
    if device.type == "cuda":
        torch.cuda.synchronize(device)


def benchmark(model: SegModel, vol: Volume, repeats: int = 5, warmup: int = 2,
              snap: bool = False) -> BenchResult:
    """Median wall time and peak memory of the full prediction pipeline
    (resampling, weight generation, forward pass, argmax) on ``vol``."""
    device = model.device
    _reuse_freed_memory()
    for _ in range(warmup):
        predict(model, vol, snap=snap)
    times = []
    for _ in range(max(repeats, 1)):
        t0 = time.perf_counter()
        predict(model, vol, snap=snap)
        times.append(time.perf_counter() - t0)
    hyper_time = 0.0
    if model.hypernet is not None:
        ht = []
        with torch.no_grad():
            for i in range(warmup + max(repeats, 1)):
                t0 = time.perf_counter()
                model.weights(vol.spacing)
                _sync(device)
                if i >= warmup:
                    ht.append(time.perf_counter() - t0)
        hyper_time = statistics.median(ht)
    _release_freed_memory()
    probe = MemoryProbe(str(device))
    with probe:
        predict(model, vol, snap=snap)
    return BenchResult(model.regime, tuple(vol.spacing), int(np.prod(vol.shape)),
                       statistics.median(times), probe.peak, probe.source, hyper_time, times)
