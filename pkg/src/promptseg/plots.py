"""Report figures. Everything is written to files; nothing is shown."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.figsize": (4.8, 3.2),
    "svg.hashsalt": "promptseg",
}
# keeps vector output reproducible
_META = {"svg": {"Date": None}, "pdf": {"CreationDate": None, "ModDate": None}}


def _save(fig, path):
    fmt = str(path).rsplit(".", 1)[-1]
    fig.savefig(path, metadata=_META.get(fmt), bbox_inches="tight")
    plt.close(fig)


def loss_curves(histories: dict[str, list[dict]], path):
    """Supervised (solid) and unsupervised (dashed) loss per epoch for each run."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for i, (label, rows) in enumerate(sorted(histories.items())):
            epochs = [int(r["epoch"]) for r in rows]
            color = f"C{i % 10}"
            ax.plot(epochs, [float(r["l_sup"]) for r in rows], color=color, label=f"{label} sup")
            unsup = [float(r["l_unsup"]) for r in rows]
            if any(unsup):
                ax.plot(epochs, unsup, color=color, ls="--", label=f"{label} unsup")
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax.legend(frameon=False, ncol=2)
        _save(fig, path)


def task_dice_bars(records: dict[str, dict[int, float]], task_names: dict[int, str], path):
    """Grouped bars: one group per task, one bar per run."""
    labels = sorted(records)
    tasks = sorted({t for r in records.values() for t in r})
    width = 0.8 / max(len(labels), 1)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for i, label in enumerate(labels):
            xs = [j + (i - (len(labels) - 1) / 2) * width for j in range(len(tasks))]
            ax.bar(xs, [records[label].get(t, 0.0) for t in tasks], width, label=label)
        ax.set_xticks(range(len(tasks)))
        ax.set_xticklabels([task_names.get(t, str(t)) for t in tasks])
        ax.set_ylabel("Dice (%)")
        ax.set_ylim(0, 100)
        ax.legend(frameon=False, fontsize=7)
        _save(fig, path)


def n_sweep_curve(ns, mdice, path, miou=None):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(ns, mdice, "o-", label="mDice")
        if miou is not None:
            ax.plot(ns, miou, "s--", label="mIoU")
        ax.set_xticks(list(ns))
        ax.set_xlabel("perturbation passes N")
        ax.set_ylabel("score (%)")
        ax.legend(frameon=False)
        _save(fig, path)
