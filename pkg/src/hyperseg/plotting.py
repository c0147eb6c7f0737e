"""Figures rendered from the CSV outputs of eval, sweep, bench, cka and train."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

COLORS = {"fs": "tab:orange", "fsnr": "tab:red", "as": "tab:green", "hs": "tab:blue"}


def read_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def _spacing(row: dict) -> np.ndarray:
    keys = sorted(k for k in row if k.startswith("spacing"))
    return np.array([float(row[k]) for k in keys])


def _style(regime: str) -> dict:
    base = regime.split("+")[0].split("_")[0]
    snap = "snap" in regime
    return {"color": COLORS.get(base, None), "linestyle": ":" if snap else "-",
            "marker": "" if snap else "o", "markersize": 3}


def plot_sweep(csv_path, out_path, r_fixed: float | None = None, title: str = "") -> Path:
    """Mean Dice against the varying spacing component of a sweep segment.

    The training range is shaded; ``r_fixed`` draws a vertical line.
    """
    rows = read_csv(csv_path)
    if not rows:
        raise ValueError(f"{csv_path}: no rows")
    spacings = np.stack([_spacing(r) for r in rows])
    # plot against the first axis that actually varies along the segment
    varying = np.flatnonzero(np.ptp(spacings, axis=0) > 0)
    axis = int(varying[0]) if len(varying) else 0
    fig, ax = plt.subplots(figsize=(5, 3.5))
    steps = sorted({int(r["step"]) for r in rows})
    x_of = {int(r["step"]): float(_spacing(r)[axis]) for r in rows}
    inside = {int(r["step"]): r["in_range"] == "1" for r in rows}
    xs = [x_of[s] for s in steps]
    half = (xs[1] - xs[0]) / 2 if len(xs) > 1 else 0.05
    for s in steps:
        if inside[s]:
            ax.axvspan(x_of[s] - half, x_of[s] + half, color="tab:blue", alpha=0.08, lw=0)
    for regime in dict.fromkeys(r["regime"] for r in rows):
        pts = sorted((x_of[int(r["step"])], float(r["mean_dice"])) for r in rows if r["regime"] == regime)
        ax.plot(*zip(*pts), label=regime.upper(), **_style(regime))
    if r_fixed is not None:
        ax.axvline(r_fixed, color="gray", lw=0.8, ls="--")
    ax.set_xlabel(f"spacing axis {axis} (mm)")
    ax.set_ylabel("mean Dice")
    ax.set_ylim(0, 1)
    ax.set_title(title)
    ax.legend(fontsize=7)
    return _save(fig, out_path)


def plot_bench(csv_path, out_path) -> Path:
    rows = read_csv(csv_path)
    fig, (ax_t, ax_m) = plt.subplots(1, 2, figsize=(8, 3.2))
    for regime in dict.fromkeys(r["regime"] for r in rows):
        pts = sorted((float(_spacing(r)[0]), float(r["time_s"]), int(r["peak_bytes"]) / 2**20)
                     for r in rows if r["regime"] == regime)
        x, t, m = zip(*pts)
        ax_t.plot(x, t, label=regime.upper(), **_style(regime))
        ax_m.plot(x, m, label=regime.upper(), **_style(regime))
    ax_t.set_ylabel("inference time (s)")
    ax_m.set_ylabel(f"peak memory (MiB, {rows[0]['memory_source']})")
    for ax in (ax_t, ax_m):
        ax.set_xlabel("native spacing (mm)")
        ax.set_yscale("log")
        ax.legend(fontsize=7)
    return _save(fig, out_path)


def read_map(csv_path) -> tuple[list[str], np.ndarray]:
    with open(csv_path, newline="") as f:
        rows = list(csv.reader(f))
    return rows[0][1:], np.array([[float(v) for v in r[1:]] for r in rows[1:]])


def plot_cka_dir(cka_dir, out_path, names: Sequence[str] | None = None) -> Path:
    """Heat maps of the CKA bundle written by :func:`cka.write_bundle`."""
    cka_dir = Path(cka_dir)
    summary = json.loads((cka_dir / "bundle.json").read_text())
    names = list(names or summary["maps"])
    ncol = min(4, len(names))
    nrow = -(-len(names) // ncol)
    fig, axes = plt.subplots(nrow, ncol, figsize=(3 * ncol, 3 * nrow), squeeze=False)
    for ax in axes.ravel():
        ax.axis("off")
    for ax, name in zip(axes.ravel(), names):
        _, m = read_map(cka_dir / f"{name}.csv")
        if name.startswith("slope"):
            lim = max(float(np.abs(m).max()), 1e-12)
            im = ax.imshow(m, cmap="coolwarm", vmin=-lim, vmax=lim, origin="lower")
        else:
            im = ax.imshow(m, cmap="magma", vmin=0, vmax=1, origin="lower")
        ax.set_title(name, fontsize=7)
        ax.axis("on")
        ax.set_xticks([])
        ax.set_yticks([])
        fig.colorbar(im, ax=ax, fraction=0.046)
    return _save(fig, out_path)


def plot_loss(csv_paths: dict, out_path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for regime, path in csv_paths.items():
        rows = read_csv(path)
        ax.plot([int(r["step"]) for r in rows], [float(r["loss"]) for r in rows],
                label=regime.upper(), color=COLORS.get(regime), lw=0.8)
    ax.set_xlabel("iteration")
    ax.set_ylabel("training loss")
    ax.set_yscale("log")
    ax.legend(fontsize=7)
    return _save(fig, out_path)


def _save(fig, out_path) -> Path:
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path
