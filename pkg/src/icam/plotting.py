"""Figures written next to the CSV reports."""

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

MARKERS = {"aafm": "o", "mha": "s"}


def new_figure(width=6.0, height=None):
    golden = (math.sqrt(5) - 1.0) / 2.0
    fig, ax = plt.subplots(figsize=(width, height or width * golden), facecolor="w")
    ax.grid(alpha=0.3, linestyle=":")
    return fig, ax


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_bench(records, path, slopes=None):
    """Peak intermediate bytes and forward time against N, log-log."""
    fig, (ax_mem, ax_time) = plt.subplots(1, 2, figsize=(10, 4), facecolor="w")
    for mech in sorted({r.mechanism for r in records}):
        rs = sorted((r for r in records if r.mechanism == mech), key=lambda r: r.n)
        ns = [r.n for r in rs]
        label = mech.upper()
        if slopes and mech in slopes:
            label += f" (space {slopes[mech]['space']:.2f}, time {slopes[mech]['time']:.2f})"
        ax_mem.loglog(ns, [r.peak_bytes for r in rs], marker=MARKERS.get(mech, "x"), label=label)
        ax_time.loglog(ns, [r.seconds for r in rs], marker=MARKERS.get(mech, "x"), label=mech.upper())
    ax_mem.set_xlabel("N")
    ax_mem.set_ylabel("largest intermediate (bytes)")
    ax_time.set_xlabel("N")
    ax_time.set_ylabel("forward time (s)")
    for ax in (ax_mem, ax_time):
        ax.grid(alpha=0.3, which="both", linestyle=":")
    ax_mem.legend(fontsize=8)
    return _save(fig, path)


def plot_training(metrics, path):
    fig, ax = new_figure()
    epochs = [m["epoch"] for m in metrics]
    ax.plot(epochs, [m["mean_length"] for m in metrics], label="mean sampled length")
    ax.plot(epochs, [m["mean_best_length"] for m in metrics], label="mean best-of-starts length")
    last = None
    for m in metrics:
        if m["stage"] != last and last is not None:
            ax.axvline(m["epoch"] - 0.5, color="grey", lw=0.8, ls="--")
        last = m["stage"]
    ax.set_xlabel("epoch")
    ax.set_ylabel("tour length")
    ax2 = ax.twinx()
    ax2.plot(epochs, [m["alpha"] for m in metrics], color="tab:red", lw=0.8, label="alpha (mean)")
    ax2.set_ylabel("alpha", color="tab:red")
    ax.legend(fontsize=8, loc="upper right")
    return _save(fig, path)


def plot_gaps(report, path):
    fig, ax = new_figure()
    gaps = [r["gap"] for r in report.rows]
    ax.hist(gaps, bins=min(40, max(5, len(gaps) // 5)), color="tab:blue", alpha=0.8)
    ax.axvline(report.mean_gap, color="k", ls="--", lw=1, label=f"mean {report.mean_gap:.3f}%")
    ax.set_xlabel("gap (%)")
    ax.set_ylabel("instances")
    ax.legend(fontsize=8)
    return _save(fig, path)
