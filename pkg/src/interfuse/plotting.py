"""Report figures: ATE bar chart, training loss curve, validation metrics."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

COLORS = {"complementary": "#4c72b0", "random": "#55a868", "ir_dropout": "#c44e52", "vi_dropout": "#dd8452"}


def _finish(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    # fixed metadata keeps the PNG bytes reproducible
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_ate(report, path) -> Path:
    """One panel per quality metric, one bar per intervention, across-seed std as error bars."""
    metrics = report.metadata.get("metrics") or sorted({r.metric for r in report.rows})
    fig, axes = plt.subplots(1, len(metrics), figsize=(4.2 * len(metrics), 3.4), squeeze=False)
    for ax, metric in zip(axes[0], metrics):
        rows = [r for r in report.rows if r.metric == metric]
        names = [r.intervention for r in rows]
        ax.bar(names, [r.ate for r in rows], yerr=[r.std for r in rows], capsize=3,
               color=[COLORS.get(n, "0.5") for n in names])
        ax.axhline(0.0, color="k", lw=0.6)
        ax.set_title(f"ATE on {metric}")
        ax.set_ylabel(f"baseline {metric} - intervened {metric}")
        ax.tick_params(axis="x", labelrotation=20)
    return _finish(fig, path)


def plot_loss_curve(log_path, path) -> Path:
    from .trainer import read_loss_log

    rows = read_loss_log(log_path)
    steps = [r["step"] for r in rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.4))
    ax1.plot(steps, [r["fidelity"] for r in rows], label="fidelity")
    ax1.plot(steps, [r["nec"] for r in rows], label="necessity")
    ax1.set_yscale("log")
    ax1.set_xlabel("step")
    ax1.legend(frameon=False)
    ax2.plot(steps, [r["inv"] for r in rows], label="consistency (incl. gate reg.)")
    ax2.plot(steps, [r["total"] for r in rows], label="total")
    ax2.set_xlabel("step")
    ax2.legend(frameon=False)
    return _finish(fig, path)


def plot_metric_report(report, path) -> Path:
    """Per-image bars for each of the five metrics."""
    from .metrics import METRIC_NAMES

    ids = [r["id"] for r in report.rows]
    fig, axes = plt.subplots(1, len(METRIC_NAMES), figsize=(3.0 * len(METRIC_NAMES), 3.0))
    for ax, name in zip(axes, METRIC_NAMES):
        ax.bar(range(len(ids)), [r[name] for r in report.rows], color="0.4")
        ax.axhline(report.mean[name], color="#c44e52", lw=1.0)
        ax.set_title(name)
        ax.set_xticks([])
    return _finish(fig, path)
