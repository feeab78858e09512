"""Static RD and resource plots written as PNG files."""
from __future__ import annotations

from pathlib import Path
from typing import Dict, List, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from loguru import logger  # noqa: E402

from src.core.errors import PreconditionError  # noqa: E402
from src.core.schemas import RDCurve  # noqa: E402
from src.storage.results import ResultsFile  # noqa: E402

RESOURCE_AXES: Dict[str, str] = {
    "params_m": "Parameters (M)",
    "memory_mb": "Memory (MB)",
    "gflops_per_frame": "GFLOPs / frame",
    "throughput_fps": "Throughput (FPS)",
    "latency_ms_per_frame": "Inference time (ms / frame)",
    "energy_mj_per_frame": "Energy (mJ / frame)",
}

# PNG writer stamps the matplotlib version otherwise
_SAVE_KW = {"dpi": 150, "metadata": {"Software": None}}


def _non_empty(curves: Sequence[RDCurve]) -> List[RDCurve]:
    curves = [c for c in curves if c.points]
    if not curves:
        raise PreconditionError("nothing to plot: the results contain no RD points")
    return curves


def _draw_curves(ax, curves: Sequence[RDCurve], to_y) -> None:
    for curve in curves:
        points = sorted(curve.points, key=lambda p: p.bpp)
        bpp = [p.bpp for p in points]
        values = [to_y(p.psnr) for p in points]
        style = "o" if len(points) == 1 else "o-"
        ax.plot(bpp, values, style, label=curve.model_id, markersize=4)
    ax.set_xlabel("Bit rate (bpp)")
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize="small")


def plot_rd_curves(curves: Sequence[RDCurve], out_path, title: str = "Average RD curve") -> Path:
    curves = _non_empty(curves)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)

    fig, ax = plt.subplots(figsize=(6, 4.5))
    _draw_curves(ax, curves, lambda q: q)
    ax.set_ylabel("PSNR (dB)")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(out_path, **_SAVE_KW)
    plt.close(fig)
    logger.info(f"Wrote {out_path}")
    return out_path


def plot_mse_curves(curves: Sequence[RDCurve], out_path, title: str = "Average MSE curve") -> Path:
    """Distortion as MSE on the 8-bit scale, recovered from PSNR."""
    curves = _non_empty(curves)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)

    fig, ax = plt.subplots(figsize=(6, 4.5))
    _draw_curves(ax, curves, lambda q: 255.0**2 * 10 ** (-q / 10))
    ax.set_ylabel("MSE")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(out_path, **_SAVE_KW)
    plt.close(fig)
    logger.info(f"Wrote {out_path}")
    return out_path


def plot_resources(results: ResultsFile, out_dir) -> List[Path]:
    """
    PSNR and bpp against every resource axis that has profile data.

    Models are joined by model_id; a model's RD position is the mean of its points.
    """
    out_dir = Path(out_dir)
    rd = {c.model_id: c for c in results.curves() if c.points}
    profiles = [p for p in results.profiles if p.model_id in rd]
    if not profiles:
        return []
    out_dir.mkdir(parents=True, exist_ok=True)

    written = []
    for axis, axis_label in RESOURCE_AXES.items():
        rows = [
            (p.model_id, getattr(p, axis), rd[p.model_id])
            for p in profiles
            if getattr(p, axis) is not None
        ]
        if not rows:
            continue
        fig, (ax_q, ax_r) = plt.subplots(1, 2, figsize=(10, 4))
        for model_id, value, curve in rows:
            quality = float(np.mean([pt.psnr for pt in curve.points]))
            rate = float(np.mean([pt.bpp for pt in curve.points]))
            ax_q.scatter(value, quality, label=model_id)
            ax_r.scatter(value, rate, label=model_id)
        ax_q.set_ylabel("PSNR (dB)")
        ax_r.set_ylabel("Bit rate (bpp)")
        for ax in (ax_q, ax_r):
            ax.set_xlabel(axis_label)
            ax.grid(True, alpha=0.3)
        ax_q.legend(fontsize="small")
        fig.tight_layout()
        path = out_dir / f"resources_{axis}.png"
        fig.savefig(path, **_SAVE_KW)
        plt.close(fig)
        written.append(path)
    logger.info(f"Wrote {len(written)} resource plot(s) to {out_dir}")
    return written
