"""Static figures for run reports (PNG via the Agg backend)."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _subplots(fig, ax, size=(5.5, 4)):
    if fig is None and ax is None:
        fig, ax = plt.subplots(1, 1)
        fig.set_size_inches(*size)
    return fig, ax


def savefig(fig, path):
    fig.tight_layout()
    fig.savefig(path, bbox_inches="tight", dpi=100)
    plt.close(fig)
    return path


def plot_convergence(series, path, fig=None, ax=None):
    """Fine-tune accuracy per epoch, one line per method label."""
    fig, ax = _subplots(fig, ax)
    for label, ys in series.items():
        ax.plot(range(1, len(ys) + 1), ys, label=label, lw=1.5)
    ax.set_xlabel("fine-tune epoch")
    ax.set_ylabel("ACC")
    ax.set_ylim(0, 1)
    ax.grid(alpha=0.3)
    if series:
        ax.legend(fontsize=8, frameon=False)
    return savefig(fig, path)


def plot_loss_curve(history, path, fig=None, ax=None):
    fig, ax = _subplots(fig, ax)
    for key, colour in (("loss_mse", "C0"), ("loss_fd", "C1")):
        pts = [(r["step"], r[key]) for r in history if r.get(key) is not None]
        if pts:
            xs, ys = zip(*pts)
            ax.plot(xs, ys, ".", ms=2, color=colour, label=key)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(frameon=False)
    return savefig(fig, path)


def plot_summary(rows, path, metric="acc", fig=None, ax=None):
    """Bar chart of mean metric with min-max whiskers per summary row."""
    fig, ax = _subplots(fig, ax, size=(max(5.0, 0.8 * len(rows) + 2), 4))
    labels, means, lo, hi = [], [], [], []
    for r in rows:
        if r[metric] is None:
            continue
        tag = r["method"] if r["order"] == "-" else f"{r['method']}\n{r['order']}"
        if r["gamma"] not in ("-", ""):
            tag += f"\n{r['gamma']}"
        labels.append(tag)
        means.append(r[metric])
        lo.append(r[metric] - r[f"{metric}_min"])
        hi.append(r[f"{metric}_max"] - r[metric])
    ax.bar(range(len(means)), means, yerr=[lo, hi], capsize=3, color="0.6")
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, fontsize=7)
    ax.set_ylabel(metric.upper())
    ax.set_ylim(0, 1)
    return savefig(fig, path)
