"""Report figures written next to the CSV/JSON outputs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (6.0, 3.7),
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
}


def _save(fig, path) -> None:
    # no software/date metadata so reruns write identical files
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def moving_average(values, window: int = 5) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    if len(values) < window:
        return values
    return np.convolve(values, np.ones(window) / window, mode="valid")


def plot_training(record, path, title: str = "training") -> None:
    """Per-step loss (with a smoothed overlay) and, when present, validation F1/EM."""
    with plt.rc_context(STYLE):
        has_eval = bool(record.epoch_eval)
        fig, axes = plt.subplots(1, 2 if has_eval else 1, squeeze=False)
        ax = axes[0][0]
        if record.losses:
            ax.plot(record.losses, lw=0.6, color="0.6", label="step loss")
            smooth = moving_average(record.losses, 25)
            ax.plot(np.arange(len(smooth)) + (len(record.losses) - len(smooth)), smooth, color="C0", label="smoothed")
            ax.legend()
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.set_title(title)
        if has_eval:
            ax = axes[0][1]
            epochs = [e["epoch"] for e in record.epoch_eval]
            ax.plot(epochs, [e["f1"] for e in record.epoch_eval], marker=".", label="F1")
            ax.plot(epochs, [e["exact_match"] for e in record.epoch_eval], marker=".", label="EM")
            ax.set_ylim(-2, 102)
            ax.set_xlabel("epoch")
            ax.set_ylabel("validation score")
            ax.legend()
        fig.tight_layout()
        _save(fig, path)


def plot_pbt(result, path) -> None:
    """Member scores per generation with the best-so-far envelope, and learning-rate trajectories."""
    with plt.rc_context(STYLE):
        fig, (ax1, ax2) = plt.subplots(1, 2)
        members = sorted({row["member"] for row in result.history})
        for m in members:
            rows = [r for r in result.history if r["member"] == m]
            gens = [r["generation"] for r in rows]
            ax1.plot(gens, [r["score"] for r in rows], lw=0.8, alpha=0.7)
            if rows and "learning_rate" in rows[0]["hyperparameters"]:
                ax2.plot(gens, [r["hyperparameters"]["learning_rate"] for r in rows], lw=0.8, alpha=0.7)
        ax1.plot(range(len(result.best_so_far)), result.best_so_far, color="k", lw=1.5, label="best so far")
        ax1.set_xlabel("generation")
        ax1.set_ylabel("score")
        ax1.legend()
        ax2.set_yscale("log")
        ax2.set_xlabel("generation")
        ax2.set_ylabel("learning rate")
        fig.tight_layout()
        _save(fig, path)


def plot_alignment(report, path) -> None:
    """Score histogram of all aligned triples and the per-method breakdown."""
    with plt.rc_context(STYLE):
        fig, (ax1, ax2) = plt.subplots(1, 2)
        edges = np.linspace(0, 1, 11)
        ax1.bar(edges[:-1], report.histogram, width=0.1, align="edge", edgecolor="white")
        ax1.set_xlabel("alignment score")
        ax1.set_ylabel("examples")
        methods = ["exact", "chrf", "dropped"]
        ax2.bar(methods, [report.exact, report.chrf, report.dropped], color=["C2", "C0", "C3"])
        ax2.set_ylabel("examples")
        fig.tight_layout()
        _save(fig, path)


def plot_costs(reports, path) -> None:
    with plt.rc_context(STYLE):
        fig, (ax1, ax2) = plt.subplots(1, 2)
        labels = [r.label or f"run {i}" for i, r in enumerate(reports)]
        ax1.barh(labels, [r.energy for r in reports], color="C1")
        ax1.set_xlabel("energy (kWh)")
        ax2.barh(labels, [r.co2 for r in reports], color="C3")
        ax2.set_xlabel("CO$_2$ (g)")
        ax2.set_yticklabels([])
        fig.tight_layout()
        _save(fig, path)


def plot_stats(reports: dict, path) -> None:
    """Mean paragraph / question / answer lengths in whitespace tokens, one group per dataset."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        names = list(reports)
        x = np.arange(len(names))
        for k, (attr, label) in enumerate([("paragraph_tokens", "paragraph"), ("question_tokens", "question"),
                                            ("answer_tokens", "answer")]):
            ax.bar(x + (k - 1) * 0.25, [getattr(reports[n], attr) for n in names], width=0.25, label=label)
        ax.set_xticks(x)
        ax.set_xticklabels(names)
        ax.set_ylabel("mean tokens")
        ax.legend()
        fig.tight_layout()
        _save(fig, path)
