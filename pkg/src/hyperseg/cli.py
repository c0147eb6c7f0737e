"""Command-line entry point: ``hyperseg <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 invalid configuration, 3 runtime
failure. The compute device is taken from ``HYPERSEG_DEVICE`` (default cpu).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import torch

from . import plotting
from .cka import CropSpec, run_cka_protocol, spacing_grid, write_bundle
from .config import ConfigError, IntervalSpec, PRESETS, RunConfig, SweepSpec, load_config
from .evaluation import (
    benchmark, dense_sweep, evaluate_mc, parse_interval, snapped, summarize, write_rows,
)
from .model import REGIMES, SegModel, load_checkpoint
from .synthdata import Dataset, load_dataset, write_dataset
from .training import train
from .volume import resample_image

log = logging.getLogger("hyperseg")

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3
DEVICE_ENV = "HYPERSEG_DEVICE"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# helpers


def device_from_env() -> torch.device:
    name = os.environ.get(DEVICE_ENV, "cpu")
    try:
        device = torch.device(name)
    except RuntimeError:
        raise ConfigError(f"{DEVICE_ENV}={name!r} is not a device name") from None
    if device.type == "cuda" and not torch.cuda.is_available():
        raise ConfigError(f"{DEVICE_ENV}={name!r} but CUDA is not available")
    if device.type not in ("cpu", "cuda"):
        raise ConfigError(f"{DEVICE_ENV}={name!r}: only cpu and cuda are supported")
    return device


def get_config(args) -> RunConfig:
    if getattr(args, "config", None):
        return load_config(args.config)
    return PRESETS["fast" if getattr(args, "fast", False) else args.preset]()


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def data_dir(out: Path) -> Path:
    return out / "data"


def run_dir(out: Path, regime: str) -> Path:
    return out / "runs" / regime


def load_models(out: Path, device, regimes=REGIMES, pairs: list[str] | None = None) -> dict[str, SegModel]:
    """Checkpoints given as ``regime=path`` or found under ``<out>/runs``.

    fsnr trains exactly like fs, so without a dedicated fsnr run the fs
    checkpoint is reused under the fsnr label.
    """
    models = {}
    if pairs:
        for item in pairs:
            regime, _, path = item.partition("=")
            if not path:
                raise UsageError(f"--checkpoint expects regime=path, got {item!r}")
            models[regime] = load_checkpoint(path, regime).to(device)
        return models
    for regime in regimes:
        path = run_dir(out, regime) / "model.ckpt"
        if path.exists():
            models[regime] = load_checkpoint(path).to(device)
        elif regime == "fsnr" and (run_dir(out, "fs") / "model.ckpt").exists():
            models["fsnr"] = load_checkpoint(run_dir(out, "fs") / "model.ckpt").as_regime("fsnr").to(device)
    if not models:
        raise FileNotFoundError(f"no checkpoints under {out / 'runs'}")
    return models


def _ordered(models: dict) -> dict:
    order = {r: i for i, r in enumerate(REGIMES)}
    return dict(sorted(models.items(), key=lambda kv: order.get(kv[0], len(order))))


# subcommands


def cmd_synth(args, cfg: RunConfig) -> int:
    out = data_dir(Path(args.out))
    spec = replace(cfg.phantom, seed=cfg.seed)
    splits = {"train": (spec, cfg.data.train_count),
              "test": (replace(spec, seed=cfg.seed + cfg.data.test_seed_offset), cfg.data.test_count)}
    for name in (["train", "test"] if args.split == "both" else [args.split]):
        s, count = splits[name]
        manifest = out / name / "manifest.json"
        if manifest.exists() and not args.force:
            log.info("%s exists, skipping", manifest)
            continue
        t0 = time.perf_counter()
        write_dataset(out / name, s, args.count or count, cfg.train.spacing_range, prefix=f"{name}")
        log.info("wrote %s split in %.1f s", name, time.perf_counter() - t0)
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    tc = cfg.train_config(args.regime)
    if args.iterations:
        tc = replace(tc, iterations=args.iterations)
    dataset = load_dataset(args.data or data_dir(out) / "train" / "manifest.json")
    target = run_dir(out, args.regime)
    if (target / "model.ckpt").exists() and not (args.force or args.resume):
        log.info("%s exists, skipping", target / "model.ckpt")
        return EXIT_OK
    t0 = time.perf_counter()
    train(tc, dataset, cfg.unet, target, cfg.hypernet, resume=args.resume, device=device_from_env())
    log.info("trained %s in %.1f s", args.regime, time.perf_counter() - t0)
    return EXIT_OK


def _test_set(args, out: Path) -> Dataset:
    return load_dataset(getattr(args, "data", None) or data_dir(out) / "test" / "manifest.json")


def cmd_eval(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    models = _ordered(load_models(out, device_from_env(), pairs=args.checkpoint))
    test = _test_set(args, out)
    specs = cfg.eval.intervals
    if args.interval:
        try:
            parse_interval(args.interval)
        except ValueError as e:
            raise UsageError(str(e)) from None
        specs = [IntervalSpec(args.interval, draws=args.draws or 8, snap=args.snap)]
    all_rows, summaries = [], []
    for spec in specs:
        label, box = parse_interval(spec.box)
        use = dict(models)
        if spec.snap:
            for r in ("as", "hs"):
                if r in models:
                    use[f"{r}+snap"] = snapped(models[r])
        rows, _ = evaluate_mc(use, test, box, args.draws or spec.draws, seed=cfg.seed)
        all_rows += [(spec.box, r) for r in rows]
        summaries += [(spec.box, s) for s in summarize(rows)]
        log.info("%s: %s", spec.box, ", ".join(f"{s.regime} {s.table_cell()}" for s in summarize(rows)))
    target = out / "table"
    _write_interval_rows(all_rows, target / "results.csv")
    _write_interval_summary(summaries, target / "summary.csv")
    return EXIT_OK


def _write_interval_rows(rows, path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    dicts = [{"interval": box, **r.as_dict()} for box, r in rows]
    fields = list(dict.fromkeys(k for d in dicts for k in d))
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fields)
        w.writeheader()
        w.writerows(dicts)


def _write_interval_summary(summaries, path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["interval", "regime", "mean_dice", "std_dice", "n", "cell"])
        for box, s in summaries:
            w.writerow([box, s.regime, f"{s.mean:.5f}", f"{s.std:.5f}", s.n, s.table_cell()])


def cmd_sweep(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    models = _ordered(load_models(out, device_from_env(), pairs=args.checkpoint))
    for r in ("as", "hs"):
        if r in models:
            models[f"{r}+snap"] = snapped(models[r])
    test = _test_set(args, out)
    limit = args.cases or cfg.eval.sweep_cases
    test = Dataset(test.ids[:limit], test.pairs[:limit], test.spacing_range, test.num_classes)
    sweeps = cfg.eval.sweeps
    if args.start:
        if not args.end:
            raise UsageError("--start needs --end")
        sweeps = [SweepSpec(args.name, args.start, args.end, args.steps or 10)]
    train_range = next(iter(models.values())).spacing_range
    for s in sweeps:
        t0 = time.perf_counter()
        rows = dense_sweep(models, test, s.start, s.end, s.steps, train_range)
        write_rows(rows, out / "sweep" / f"{s.name}.csv")
        log.info("sweep %s in %.1f s", s.name, time.perf_counter() - t0)
    return EXIT_OK


def cmd_bench(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    models = _ordered(load_models(out, device_from_env(), pairs=args.checkpoint))
    test = _test_set(args, out)
    image = test.pairs[0][0]
    rows = []
    for spacing in args.spacings or cfg.eval.bench_spacings:
        vol = resample_image(image, (spacing,) * image.ndim)
        for name, model in models.items():
            res = benchmark(model, vol, repeats=args.repeats or cfg.eval.bench_repeats,
                            warmup=cfg.eval.bench_warmup)
            rows.append(res)
            log.info("bench %s @ %.2f mm: %.3f s, %.1f MiB (%s)", name, spacing, res.time_s,
                     res.peak_bytes / 2**20, res.memory_source)
    write_rows(rows, out / "bench" / "bench.csv")
    return EXIT_OK


def cmd_cka(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    device = device_from_env()
    model = load_checkpoint(args.checkpoint or run_dir(out, "hs") / "model.ckpt", "hs").to(device)
    second = load_checkpoint(args.checkpoint2, "hs").to(device) if args.checkpoint2 else None
    if args.data:
        phantoms = [p[0] for p in load_dataset(args.data, limit=cfg.cka.n_phantoms).pairs]
    else:
        phantoms = _cka_phantoms(out, cfg)
    _run_cka(model, second, phantoms, cfg, out / "cka")
    return EXIT_OK


def _cka_phantoms(out: Path, cfg: RunConfig):
    pairs = []
    for split in ("train", "test"):
        manifest = data_dir(out) / split / "manifest.json"
        if manifest.exists():
            pairs += load_dataset(manifest).pairs
    if len(pairs) < 2:
        raise FileNotFoundError(f"no phantoms under {data_dir(out)}; run synth first or pass --data")
    return [p[0] for p in pairs[: cfg.cka.n_phantoms]]


def _run_cka(model, second, phantoms, cfg: RunConfig, target: Path):
    c = cfg.cka
    crop = CropSpec(tuple(float(e) / 2 for e in phantoms[0].extent), c.crop_mm)
    t0 = time.perf_counter()
    bundle = run_cka_protocol(model, phantoms, spacing_grid(c.lo, c.hi, c.steps), crop, second,
                              margin_mm=c.margin_mm, feature_cap=c.feature_cap, seed=cfg.seed)
    write_bundle(bundle, target)
    hits = sum(m["bottleneck_stage"] for m in bundle.inter_minima())
    log.info("cka: %d maps in %.1f s; inter minima at bottleneck stage %d/%d", len(bundle.maps()),
             time.perf_counter() - t0, hits, len(bundle.inter))


def cmd_plot(args, cfg: RunConfig) -> int:
    """Each figure is written next to the CSVs it is drawn from."""
    out = Path(args.out)
    made = []
    r_fixed = cfg.r_fixed[0]
    for path in sorted((out / "sweep").glob("*.csv")):
        made.append(plotting.plot_sweep(path, path.with_suffix(".png"), r_fixed, path.stem))
    if (out / "bench" / "bench.csv").exists():
        made.append(plotting.plot_bench(out / "bench" / "bench.csv", out / "bench" / "bench.png"))
    if (out / "cka" / "bundle.json").exists():
        summary = json.loads((out / "cka" / "bundle.json").read_text())
        intra = [m for m in summary["maps"] if m.startswith("intra")]
        inter = [m for m in summary["maps"] if m.startswith("inter")]
        rest = [m for m in summary["maps"] if not m.startswith(("intra", "inter"))]
        made.append(plotting.plot_cka_dir(out / "cka", out / "cka" / "overview.png",
                                          [intra[0], intra[-1], inter[-1]] + rest))
        made.append(plotting.plot_cka_dir(out / "cka", out / "cka" / "intra.png", intra))
        made.append(plotting.plot_cka_dir(out / "cka", out / "cka" / "inter.png", inter))
    losses = {r: run_dir(out, r) / "loss.csv" for r in REGIMES if (run_dir(out, r) / "loss.csv").exists()}
    if losses:
        made.append(plotting.plot_loss(losses, out / "runs" / "loss.png"))
    if not made:
        raise FileNotFoundError(f"nothing to plot under {out}")
    for p in made:
        log.info("wrote %s", p)
    return EXIT_OK


def cmd_reproduce(args, cfg: RunConfig) -> int:
    """synth -> train (fs, as, hs) -> eval -> sweep -> bench -> cka -> plot."""
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2))
    timings = {}

    def stage(label, fn, done: Path | None = None, **extra):
        if done is not None and done.exists() and not args.force:
            log.info("stage %s: %s exists, skipping", label, done)
            return
        t0 = time.perf_counter()
        ns = argparse.Namespace(**{"out": str(out), "force": args.force, "checkpoint": None, "data": None,
                                   **extra})
        fn(ns, cfg)
        timings[label] = time.perf_counter() - t0
        log.info("stage %s done in %.1f s", label, timings[label])

    stage("synth", cmd_synth, data_dir(out) / "test" / "manifest.json", split="both", count=None)
    for regime in ("fs", "as", "hs"):
        stage(f"train_{regime}", cmd_train, run_dir(out, regime) / "model.ckpt",
              regime=regime, iterations=None, resume=False)
    if cfg.cka.second_seed:
        seeded = replace(cfg, seed=cfg.seed + 1)
        target = run_dir(out, "hs_seed1")
        if not (target / "model.ckpt").exists() or args.force:
            train(seeded.train_config("hs"), load_dataset(data_dir(out) / "train" / "manifest.json"),
                  cfg.unet, target, cfg.hypernet, device=device_from_env())
    stage("eval", cmd_eval, out / "table" / "summary.csv", interval=None, draws=None, snap=False)
    stage("sweep", cmd_sweep, out / "sweep" / f"{cfg.eval.sweeps[-1].name}.csv" if cfg.eval.sweeps else None,
          start=None, end=None, steps=None, name=None, cases=None)
    stage("bench", cmd_bench, out / "bench" / "bench.csv", spacings=None, repeats=None)
    second = run_dir(out, "hs_seed1") / "model.ckpt"
    stage("cka", cmd_cka, out / "cka" / "bundle.json",
          checkpoint2=str(second) if cfg.cka.second_seed else None)
    stage("plot", cmd_plot)
    timings_path = out / "timings.json"
    previous = json.loads(timings_path.read_text()) if timings_path.exists() else {}
    timings_path.write_text(json.dumps({**previous, **timings}, indent=2))
    return EXIT_OK


# parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hyperseg", description="Spacing-conditioned U-Net segmentation experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")

    def common(p, out_required=True):
        p.add_argument("--config", help="JSON run configuration (overrides --preset)")
        p.add_argument("--preset", choices=sorted(PRESETS), default="desk", help="built-in configuration")
        p.add_argument("--out", required=out_required, help="output directory; all paths are relative to it")
        return p

    p = common(sub.add_parser("synth", help="generate phantom datasets"))
    p.add_argument("--split", choices=["train", "test", "both"], default="both")
    p.add_argument("--count", type=int, help="override the phantom count")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")
    p.set_defaults(fn=cmd_synth)

    p = common(sub.add_parser("train", help="train one regime"))
    p.add_argument("--regime", choices=REGIMES, required=True)
    p.add_argument("--data", help="training manifest (default <out>/data/train/manifest.json)")
    p.add_argument("--iterations", type=int)
    p.add_argument("--resume", action="store_true", help="continue from <out>/runs/<regime>")
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_train)

    ckpt_help = "regime=path; repeatable (default: checkpoints under <out>/runs)"
    p = common(sub.add_parser("eval", help="Monte-Carlo evaluation over spacing intervals"))
    p.add_argument("--checkpoint", action="append", help=ckpt_help)
    p.add_argument("--data", help="test manifest")
    p.add_argument("--interval", help='box such as "[0.9, 3.0]^3" (default: config intervals)')
    p.add_argument("--draws", type=int)
    p.add_argument("--snap", action="store_true", help="also score as/hs with snapping")
    p.set_defaults(fn=cmd_eval)

    p = common(sub.add_parser("sweep", help="dense Dice-vs-spacing sweep"))
    p.add_argument("--checkpoint", action="append", help=ckpt_help)
    p.add_argument("--data", help="test manifest")
    p.add_argument("--start", type=_floats, help="segment start, e.g. 0.6,0.6,0.6")
    p.add_argument("--end", type=_floats)
    p.add_argument("--steps", type=int)
    p.add_argument("--name", default="custom")
    p.add_argument("--cases", type=int, help="number of test cases")
    p.set_defaults(fn=cmd_sweep)

    p = common(sub.add_parser("bench", help="inference time and peak memory"))
    p.add_argument("--checkpoint", action="append", help=ckpt_help)
    p.add_argument("--data", help="test manifest")
    p.add_argument("--spacings", type=_floats, help="isotropic native spacings, e.g. 1,3")
    p.add_argument("--repeats", type=int)
    p.set_defaults(fn=cmd_bench)

    p = common(sub.add_parser("cka", help="CKA maps across spacings"))
    p.add_argument("--checkpoint", help="hypernetwork checkpoint (default <out>/runs/hs/model.ckpt)")
    p.add_argument("--checkpoint2", help="second hypernetwork for the cross-seed map")
    p.add_argument("--data", help="phantom manifest")
    p.set_defaults(fn=cmd_cka)

    p = common(sub.add_parser("plot", help="render figures from CSV outputs"))
    p.set_defaults(fn=cmd_plot)

    p = common(sub.add_parser("reproduce", help="run the whole pipeline"))
    p.add_argument("--fast", action="store_true", help="smallest configuration (smoke run)")
    p.add_argument("--force", action="store_true", help="redo stages whose outputs exist")
    p.set_defaults(fn=cmd_reproduce)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("hyperseg: a subcommand is required (see --help)")
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return EXIT_OK if not e.code else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = get_config(args)
        device_from_env()
        return args.fn(args, cfg)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
