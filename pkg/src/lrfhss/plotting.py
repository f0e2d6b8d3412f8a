"""Figure rendering for sweep reports (headless matplotlib backend)."""

from __future__ import annotations

import os
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402

__all__ = ["render_figures", "plot_metric", "METRIC_LABELS"]

METRIC_LABELS = {
    "miss": "header miss-detection rate",
    "header_per": "header error rate",
    "payload_per": "packet error rate",
}

#: Display floor for log-scale curves; measured zeros are clipped here.
_RATE_FLOOR = 1e-7


def _curve_key(point) -> tuple:
    return (point.modulation, point.search_interval_bits,
            point.doppler_rate_hz_s, point.timing_offset_eighths)


def _curve_label(key: tuple) -> str:
    mod, bits, doppler, timing = key
    parts = [mod, f"{bits}-bit window"]
    if doppler:
        parts.append(f"{doppler:g} Hz/s")
    if timing:
        parts.append(f"timing {timing}/8")
    return ", ".join(parts)


def plot_metric(points, metric: str, ax=None):
    """Draw one metric's SNR curves with confidence bands on `ax`."""
    if ax is None:
        ax = plt.gca()
    rows = [p for p in points if p.metric == metric]
    curves: dict[tuple, list] = {}
    for p in rows:
        curves.setdefault(_curve_key(p), []).append(p)
    for key in sorted(curves):
        pts = sorted(curves[key], key=lambda p: p.snr_db)
        snr = np.array([p.snr_db for p in pts])
        rate = np.maximum([p.rate for p in pts], _RATE_FLOOR)
        lo = np.maximum([p.ci_low for p in pts], _RATE_FLOOR)
        hi = np.maximum([p.ci_high for p in pts], _RATE_FLOOR)
        line, = ax.plot(snr, rate, marker="o", label=_curve_label(key))
        ax.fill_between(snr, lo, hi, alpha=0.2, color=line.get_color())
    ax.set_yscale("log")
    ax.set_xlabel("SNR in 488.28125 Hz band (dB)")
    ax.set_ylabel(METRIC_LABELS.get(metric, metric))
    ax.grid(True, which="both", alpha=0.3)
    if curves:
        ax.legend(fontsize=8)
    return ax


def render_figures(points, out_dir, stem: str = "report") -> list[Path]:
    """Write one PNG per metric present in `points`; return the paths."""
    out_dir = Path(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    written = []
    metrics = sorted({p.metric for p in points})
    for metric in metrics:
        fig, ax = plt.subplots(figsize=(6.4, 4.2), dpi=120)
        plot_metric(points, metric, ax)
        fig.tight_layout()
        path = out_dir / f"{stem}_{metric}.png"
        fig.savefig(path)
        plt.close(fig)
        written.append(path)
    return written
