"""Report figures written straight to PNG files (Agg backend, no display)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .schedule import PSchedule, ScheduleKind, WeightKind, WeightSpec, p_of, weight  # noqa: E402

STYLE = {
    "figure.dpi": 100,
    "savefig.dpi": 120,
    "savefig.bbox": "tight",
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "axes.linewidth": 0.6,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.fontsize": 8,
    "legend.frameon": False,
    "lines.linewidth": 1.2,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
}

TRUE_COLOR = "#3b6fb6"
GEN_COLOR = "#d1495b"

# no Software/date stamps, so reruns give identical bytes
_PNG_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="png", metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_marginals(generated, reference, path, max_dims: int = 10) -> Path:
    """Side-by-side count histograms per dimension."""
    g = np.asarray(generated)
    r = np.asarray(reference)
    d = min(g.shape[1], max_dims)
    cols = min(d, 5)
    rows = int(np.ceil(d / cols))
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(rows, cols, figsize=(2.2 * cols, 1.8 * rows), squeeze=False)
        for j in range(rows * cols):
            ax = axes.flat[j]
            if j >= d:
                ax.axis("off")
                continue
            top = int(max(g[:, j].max(initial=0), r[:, j].max(initial=0)))
            bins = np.arange(top + 2) - 0.5
            hr, _ = np.histogram(r[:, j], bins=bins)
            hg, _ = np.histogram(g[:, j], bins=bins)
            k = np.arange(top + 1)
            ax.bar(k - 0.2, hr / max(len(r), 1), width=0.4, color=TRUE_COLOR, label="true")
            ax.bar(k + 0.2, hg / max(len(g), 1), width=0.4, color=GEN_COLOR, label="generated")
            ax.set_yscale("log")
            ax.set_title(f"dim {j}")
            ax.set_xlim(-0.8, min(top, 30) + 0.8)
        axes.flat[0].legend()
        fig.supxlabel("count")
        fig.supylabel("frequency")
        return _save(fig, path)


def plot_variances(report, path) -> Path:
    """Grouped bars of true vs generated per-dimension variance."""
    vt = np.array([d.variance_true for d in report.per_dim])
    vg = np.array([d.variance_gen for d in report.per_dim])
    k = np.arange(len(vt))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(3.0, 0.45 * len(vt) + 1.5), 2.4))
        ax.bar(k - 0.2, vt, width=0.4, color=TRUE_COLOR, label="true")
        ax.bar(k + 0.2, vg, width=0.4, color=GEN_COLOR, label="generated")
        ax.set_xticks(k)
        ax.set_xlabel("dimension")
        ax.set_ylabel("variance")
        ax.legend()
        return _save(fig, path)


def plot_loss(losses, path, smooth=None) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.0, 2.4))
        steps = np.arange(1, len(losses) + 1)
        ax.plot(steps, losses, color="0.75", lw=0.5, label="per step")
        if smooth is not None:
            ax.plot(steps, smooth, color=GEN_COLOR, label="smoothed")
        ax.set_xlabel("step")
        ax.set_ylabel("weighted loss")
        ax.set_yscale("log")
        ax.legend()
        return _save(fig, path)


def plot_schedules(path, p_min=None) -> Path:
    """Survival probability and NLL/NegPrime weights of the built-in schedules."""
    t = np.linspace(0.0, 1.0, 501)
    ti = t[1:-1]
    kinds = [ScheduleKind.COSINE, ScheduleKind.BLACKOUT_CONTINUOUS]
    with plt.rc_context(STYLE):
        fig, (a1, a2) = plt.subplots(1, 2, figsize=(6.0, 2.4))
        for kind in kinds:
            s = PSchedule(kind) if p_min is None else PSchedule(kind, p_min=p_min)
            a1.plot(t, p_of(s, t), label=kind.value)
            a2.plot(ti, weight(WeightSpec(WeightKind.NEG_PRIME), s, ti), label=f"{kind.value} -p'")
        a1.set_xlabel("t")
        a1.set_ylabel("p(t)")
        a1.legend()
        a2.set_xlabel("t")
        a2.set_ylabel("w(t)")
        a2.legend()
        return _save(fig, path)
