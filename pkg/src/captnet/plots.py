"""Report figures written next to the CSV outputs."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

LABEL_COLOURS = {"B": "#1b9e77", "R": "#d95f02", "N": "#7570b3", "H": "#e7298a"}
LABEL_NAMES = {"B": "blur", "R": "rain", "N": "noise", "H": "haze"}

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
    "savefig.bbox": "tight",
    # reproducible bytes across reruns
    "svg.hashsalt": "captnet",
}


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    fig.savefig(path, metadata={"Software": None} if path.suffix == ".png" else None)
    plt.close(fig)
    return path


def loss_curve(traces: dict[str, Sequence], path: str | Path) -> Path:
    """Training loss (negative PSNR, dB) and learning rate for one or more runs."""
    with plt.rc_context(RC):
        fig, (ax, ax_lr) = plt.subplots(2, 1, figsize=(5.5, 4.5), sharex=True,
                                        gridspec_kw={"height_ratios": [3, 1]})
        for name, trace in traces.items():
            its = [r.iter for r in trace]
            ax.plot(its, [r.loss_db for r in trace], lw=0.8, label=name)
        ax.set_ylabel("loss (-PSNR, dB)")
        if len(traces) > 1:
            ax.legend(frameon=False)
        first = next(iter(traces.values()))
        ax_lr.plot([r.iter for r in first], [r.lr for r in first], color="k", lw=0.8)
        ax_lr.set_ylabel("lr")
        ax_lr.set_xlabel("iteration")
        return _save(fig, path)


def flops_scaling(rows: Sequence, path: str | Path) -> Path:
    """Analytic spatial-attention vs channel-attention cost against token count (log-log)."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for c in sorted({r.C for r in rows}):
            sel = sorted((r for r in rows if r.C == c), key=lambda r: r.H * r.W)
            tokens = [r.H * r.W for r in sel]
            ax.loglog(tokens, [r.analytic_sa for r in sel], "o-", lw=1, label=f"spatial SA, C={c}")
            ax.loglog(tokens, [r.analytic_mrap for r in sel], "s--", lw=1, label=f"MRAP, C={c}")
            ax.loglog(tokens, [r.measured_mrap_core for r in sel], "^:", lw=1, label=f"measured core, C={c}")
        ax.set_xlabel("tokens (H x W)")
        ax.set_ylabel("operations")
        ax.legend(frameon=False)
        return _save(fig, path)


def _pca2(x: np.ndarray) -> np.ndarray:
    xc = x - x.mean(axis=0)
    _, _, vt = np.linalg.svd(xc, full_matrices=False)
    proj = xc @ vt[:2].T
    if proj.shape[1] < 2:
        proj = np.pad(proj, ((0, 0), (0, 2 - proj.shape[1])))
    return proj


def cluster_scatter(enc: np.ndarray, out: np.ndarray, labels: Sequence[str], scores: tuple[float, float],
                    path: str | Path) -> Path:
    """Side-by-side 2-D PCA projections of encoder and restored-output features, coloured by label."""
    labels = [getattr(lab, "value", lab) for lab in labels]
    with plt.rc_context(RC):
        fig, axes = plt.subplots(1, 2, figsize=(8, 3.6))
        for ax, feats, title, s in zip(axes, (enc, out), ("encoder bottleneck", "restored output"), scores):
            pts = _pca2(np.asarray(feats, dtype=np.float64))
            for lab in sorted(set(labels)):
                m = np.array([l == lab for l in labels])
                ax.scatter(pts[m, 0], pts[m, 1], s=14, color=LABEL_COLOURS.get(lab), label=LABEL_NAMES.get(lab, lab))
            ax.set_title(f"{title} (silhouette {s:.3f})")
            ax.set_xticks([])
            ax.set_yticks([])
        axes[0].legend(frameon=False, loc="best")
        return _save(fig, path)
