"""Figures written next to text reports."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .distiller import TrainResult, smoothed  # noqa: E402


def plot_training(result: TrainResult, path, baseline: TrainResult | None = None) -> None:
    """Loss per phase (raw and smoothed) and held-out PSNR against training time."""
    fig, (ax_loss, ax_psnr) = plt.subplots(1, 2, figsize=(11, 4))
    for phase, color in (("supervised", "tab:blue"), ("rgb", "tab:orange")):
        rows = [r for r in result.log if r.phase == phase]
        if not rows:
            continue
        its = np.array([r.iteration for r in rows])
        loss = np.array([r.loss for r in rows])
        ax = ax_loss if phase == "supervised" else ax_loss.twinx()
        ax.plot(its, loss, color=color, alpha=0.25, lw=0.8)
        ax.plot(its, smoothed(loss), color=color, label=f"{phase} (EMA 50)")
        if np.all(loss > 0):
            ax.set_yscale("log")
        ax.set_ylabel(f"{phase} loss", color=color)
    ax_loss.set_xlabel("iteration within phase")
    ax_loss.set_title("training loss")
    for res, label in ((result, "fuse"), (baseline, "fit_from_images")):
        if res is None or not res.checkpoints:
            continue
        ax_psnr.plot([c.train_seconds for c in res.checkpoints], [c.psnr for c in res.checkpoints],
                     marker="o", ms=3, label=label)
    ax_psnr.set_xlabel("training seconds")
    ax_psnr.set_ylabel("held-out PSNR (dB)")
    ax_psnr.set_title("quality vs time")
    if ax_psnr.lines:
        ax_psnr.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_bench(rows, path) -> None:
    """Render time and payload against entry count for both modes.

    ``rows`` holds ``(num_fields, mode, render_ms, payload_bytes, psnr)`` tuples.
    """
    fig, (ax_t, ax_m) = plt.subplots(1, 2, figsize=(10, 4))
    for mode, marker in (("composed", "o"), ("fused", "s")):
        sel = sorted((r for r in rows if r[1] == mode), key=lambda r: r[0])
        if not sel:
            continue
        n = [r[0] for r in sel]
        ax_t.plot(n, [r[2] for r in sel], marker=marker, label=mode)
        ax_m.plot(n, [r[3] / 2**20 for r in sel], marker=marker, label=mode)
    ax_t.set_xlabel("fields in scene")
    ax_t.set_ylabel("ms per frame")
    ax_t.set_title("render time")
    ax_m.set_xlabel("fields in scene")
    ax_m.set_ylabel("payload (MiB)")
    ax_m.set_title("field payload")
    for ax in (ax_t, ax_m):
        ax.legend()
        ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
