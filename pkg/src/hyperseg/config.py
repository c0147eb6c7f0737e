"""JSON run configuration binding data, model, training and evaluation settings."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .hypernet import HyperNetConfig
from .segnet import UNetConfig, param_count
from .synthdata import PhantomSpec, SpacingRange
from .training import TrainConfig
from .evaluation import parse_interval


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


@dataclass
class DataConfig:
    train_count: int = 56
    test_count: int = 8
    test_seed_offset: int = 10_000


@dataclass
class IntervalSpec:
    box: str  # e.g. "train [0.9, 3.0]^3"
    draws: int = 8
    snap: bool = False


@dataclass
class SweepSpec:
    name: str
    start: list[float]
    end: list[float]
    steps: int = 12


@dataclass
class EvalConfig:
    intervals: list[IntervalSpec] = field(default_factory=list)
    sweeps: list[SweepSpec] = field(default_factory=list)
    sweep_cases: int = 4
    bench_spacings: list[float] = field(default_factory=lambda: [1.0, 1.5, 2.0, 3.0])
    bench_repeats: int = 9
    bench_warmup: int = 3


@dataclass
class CKAConfig:
    n_phantoms: int = 64
    lo: float = 0.94
    hi: float = 2.0
    steps: int = 10
    crop_mm: float = 32.0
    margin_mm: float = 8.0
    feature_cap: int = 8192
    second_seed: bool = False


@dataclass
class RunConfig:
    seed: int = 0
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    data: DataConfig = field(default_factory=DataConfig)
    unet: UNetConfig = field(default_factory=UNetConfig)
    hypernet: HyperNetConfig = field(default_factory=HyperNetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    r_fixed: list[float] = field(default_factory=lambda: [1.0, 1.0, 1.0])
    eval: EvalConfig = field(default_factory=EvalConfig)
    cka: CKAConfig = field(default_factory=CKAConfig)

    def train_config(self, regime: str) -> TrainConfig:
        r_fixed = tuple(self.r_fixed) if regime in ("fs", "fsnr") else None
        return replace(self.train, regime=regime, r_fixed=r_fixed, seed=self.seed)

    def to_dict(self) -> dict:
        train = self.train.to_dict()
        train.pop("regime")
        train.pop("r_fixed")
        return {
            "seed": self.seed,
            "phantom": self.phantom.to_dict(),
            "data": self.data.__dict__.copy(),
            "unet": self.unet.to_dict(),
            "hypernet": self.hypernet.to_dict(),
            "train": train,
            "r_fixed": list(self.r_fixed),
            "eval": {
                **{k: v for k, v in self.eval.__dict__.items() if k not in ("intervals", "sweeps")},
                "intervals": [i.__dict__.copy() for i in self.eval.intervals],
                "sweeps": [s.__dict__.copy() for s in self.eval.sweeps],
            },
            "cka": self.cka.__dict__.copy(),
        }


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from None


def from_dict(d: dict) -> RunConfig:
    d = copy.deepcopy(d)
    unknown = sorted(set(d) - {f.name for f in fields(RunConfig)})
    if unknown:
        raise ConfigError(f"unknown top-level keys {unknown}")
    kw = {}
    if "seed" in d:
        kw["seed"] = int(d["seed"])
    if "phantom" in d:
        p = d["phantom"]
        if not isinstance(p, dict):
            raise ConfigError("phantom: expected an object")
        unknown = sorted(set(p) - {f.name for f in fields(PhantomSpec)})
        if unknown:
            raise ConfigError(f"phantom: unknown keys {unknown}")
        try:
            kw["phantom"] = PhantomSpec.from_dict(p)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"phantom: {e}") from None
    if "data" in d:
        kw["data"] = _build(DataConfig, d["data"], "data")
    if "unet" in d:
        kw["unet"] = _build(UNetConfig, d["unet"], "unet")
    if "hypernet" in d:
        kw["hypernet"] = _build(HyperNetConfig, d["hypernet"], "hypernet")
    if "train" in d:
        t = d["train"]
        if isinstance(t, dict) and ("regime" in t or "r_fixed" in t):
            raise ConfigError("train: regime and r_fixed are chosen per run; set top-level r_fixed instead")
        kw["train"] = _build(TrainConfig, {**(t if isinstance(t, dict) else {}), "regime": "hs"}, "train")
    if "r_fixed" in d:
        kw["r_fixed"] = [float(v) for v in d["r_fixed"]]
    if "eval" in d:
        e = dict(d["eval"])
        e["intervals"] = [_build(IntervalSpec, i, "eval.intervals") for i in e.get("intervals", [])]
        e["sweeps"] = [_build(SweepSpec, s, "eval.sweeps") for s in e.get("sweeps", [])]
        kw["eval"] = _build(EvalConfig, e, "eval")
    if "cka" in d:
        kw["cka"] = _build(CKAConfig, d["cka"], "cka")
    cfg = RunConfig(**kw)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> RunConfig:
    """Cross-check sections that must agree; raises :class:`ConfigError`."""
    unet, dim = cfg.unet, cfg.unet.dim
    p = param_count(unet)
    if cfg.hypernet.output_dim is not None and cfg.hypernet.output_dim != p:
        raise ConfigError(f"hypernet.output_dim {cfg.hypernet.output_dim} != U-Net parameter count {p}")
    if cfg.hypernet.input_dim != dim:
        raise ConfigError(f"hypernet.input_dim {cfg.hypernet.input_dim} != unet.dim {dim}")
    if cfg.phantom.dim != dim:
        raise ConfigError(f"phantom.dim {cfg.phantom.dim} != unet.dim {dim}")
    if cfg.phantom.num_classes != unet.num_classes:
        raise ConfigError(f"phantom.num_classes {cfg.phantom.num_classes} != unet.num_classes {unet.num_classes}")
    rng = cfg.train.spacing_range
    if rng.dim != dim:
        raise ConfigError(f"train.spacing_range has {rng.dim} axes, unet.dim is {dim}")
    ref = cfg.phantom.reference_spacing
    if min(rng.lo) < ref:
        raise ConfigError(f"train.spacing_range lower bound {min(rng.lo)} is finer than the phantom reference spacing {ref}")
    if len(cfg.r_fixed) != dim or min(cfg.r_fixed) < ref:
        raise ConfigError(f"r_fixed {cfg.r_fixed} must have {dim} components >= {ref}")
    if cfg.train.patch_size_mm > cfg.phantom.canvas_size_mm:
        raise ConfigError(f"train.patch_size_mm {cfg.train.patch_size_mm} exceeds canvas {cfg.phantom.canvas_size_mm}")
    if cfg.data.train_count < 1 or cfg.data.test_count < 1:
        raise ConfigError("data.train_count and data.test_count must be >= 1")
    for spec in cfg.eval.intervals:
        try:
            _, box = parse_interval(spec.box)
        except ValueError as e:
            raise ConfigError(f"eval.intervals: {e}") from None
        if box.dim != dim:
            raise ConfigError(f"eval interval {spec.box!r} has {box.dim} axes, unet.dim is {dim}")
        if min(box.lo) < ref:
            raise ConfigError(f"eval interval {spec.box!r} is finer than the reference spacing {ref}")
        if spec.draws < 1:
            raise ConfigError(f"eval interval {spec.box!r}: draws must be >= 1")
    for s in cfg.eval.sweeps:
        if len(s.start) != dim or len(s.end) != dim:
            raise ConfigError(f"sweep {s.name!r}: endpoints need {dim} components")
        if min(s.start + s.end) < ref:
            raise ConfigError(f"sweep {s.name!r}: endpoints must be >= reference spacing {ref}")
        if s.steps < 2:
            raise ConfigError(f"sweep {s.name!r}: steps must be >= 2")
    if any(b <= 0 for b in cfg.eval.bench_spacings) or cfg.eval.bench_repeats < 1:
        raise ConfigError("bench spacings must be positive and bench_repeats >= 1")
    c = cfg.cka
    if c.steps < 2 or not 0 < c.lo < c.hi or c.n_phantoms < 2:
        raise ConfigError("cka: need steps >= 2, 0 < lo < hi, n_phantoms >= 2")
    if c.lo < ref:
        raise ConfigError(f"cka.lo {c.lo} is finer than the reference spacing {ref}")
    if c.crop_mm + 2 * c.margin_mm > cfg.phantom.canvas_size_mm:
        raise ConfigError("cka crop plus margins exceed the phantom canvas")
    if (c.crop_mm / 2 ** (unet.levels - 1)) % 1:
        raise ConfigError(f"cka.crop_mm {c.crop_mm} must be divisible by {2 ** (unet.levels - 1)} mm")
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    return from_dict(data)


def desk_config() -> RunConfig:
    """Default desk-scale experiment (about 1.5 h on one CPU core)."""
    cfg = RunConfig()
    cfg.eval = EvalConfig(
        intervals=[
            IntervalSpec("train [0.9, 3.0]^3", draws=8),
            IntervalSpec("fixed [1, 1]^3", draws=1),
            IntervalSpec("coarse [2.5, 3.0]^3", draws=6),
            IntervalSpec("beyond [4.5, 4.5]^3", draws=1, snap=True),
        ],
        sweeps=[
            SweepSpec("isotropic", [0.6, 0.6, 0.6], [4.5, 4.5, 4.5], steps=14),
            SweepSpec("axis0", [0.6, 1.0, 1.0], [4.5, 1.0, 1.0], steps=10),
        ],
    )
    return validate(cfg)


def fast_config() -> RunConfig:
    """Smallest end-to-end configuration, for smoke runs."""
    cfg = RunConfig(
        phantom=PhantomSpec(reference_spacing=0.75),
        data=DataConfig(train_count=3, test_count=2),
        unet=UNetConfig(levels=3, blocks_per_level=1, base_channels=4),
        hypernet=HyperNetConfig(hidden_width=16),
        train=TrainConfig(spacing_range=SpacingRange.isotropic(1.5, 3.0), iterations=6,
                          patch_size_mm=32.0, log_every=2),
        r_fixed=[2.0, 2.0, 2.0],
        eval=EvalConfig(
            intervals=[IntervalSpec("train [1.5, 3.0]^3", draws=1),
                       IntervalSpec("beyond [4.5, 4.5]^3", draws=1, snap=True)],
            sweeps=[SweepSpec("isotropic", [1.0, 1.0, 1.0], [4.0, 4.0, 4.0], steps=3)],
            sweep_cases=1, bench_spacings=[1.5, 3.0], bench_repeats=1, bench_warmup=1,
        ),
        cka=CKAConfig(n_phantoms=3, crop_mm=16.0, margin_mm=4.0, feature_cap=512),
    )
    return validate(cfg)


PRESETS = {"desk": desk_config, "fast": fast_config}
