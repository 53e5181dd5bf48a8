"""Static figures written next to the CSV/JSON reports (Agg backend, no display)."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .trend_analysis import GROUP_NAMES, GROUPS, STAGE_NAMES, STAGES, moving_average  # noqa: E402

# fixed metadata keeps PNG bytes identical across runs
_META = {"Software": None}


def _save(fig, path) -> None:
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)


def plot_loss_curve(history, path) -> None:
    epochs = [r.epoch for r in history]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(epochs, [r.train_loss for r in history], marker="o", label="train loss")
    if any(r.val_f1 is not None for r in history):
        ax2 = ax.twinx()
        ax2.plot(epochs, [r.val_f1 for r in history], marker="s", color="tab:orange", label="val F1")
        ax2.set_ylim(0, 1.05)
        ax2.set_ylabel("validation F1")
    ax.set_xlabel("epoch")
    ax.set_ylabel("BCE loss")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    _save(fig, path)


def plot_ablation(rows: list[dict], path, metric: str = "f1") -> None:
    """Grouped bars per ablation table, one bar per row."""
    tables = sorted({r["table"] for r in rows})
    fig, axes = plt.subplots(1, len(tables), figsize=(4.5 * len(tables), 3.4), squeeze=False)
    for ax, table in zip(axes[0], tables):
        sub = [r for r in rows if r["table"] == table]
        ax.bar(range(len(sub)), [r[metric] for r in sub], color="tab:blue")
        ax.set_xticks(range(len(sub)))
        ax.set_xticklabels([r["row"] for r in sub], rotation=20, ha="right", fontsize=8)
        ax.set_ylim(0, 1.05)
        ax.set_title(f"{table} ablation ({metric})", fontsize=9)
    fig.tight_layout()
    _save(fig, path)


def plot_trends(timelines, path, window: int = 5, max_sessions: int = 6) -> None:
    """Per-group probability-of-negative-emotion traces over call time (raw and smoothed)."""
    present = [g for g in GROUPS if any(t.group == g for t in timelines)] or [None]
    fig, axes = plt.subplots(len(present), 1, figsize=(7, 2.6 * len(present)), squeeze=False, sharex=True)
    for ax, g in zip(axes[:, 0], present):
        sel = [t for t in timelines if t.group == g][:max_sessions] if g else timelines[:max_sessions]
        for i, tl in enumerate(sel):
            t = tl.points[:, 0] / 60.0
            line, = ax.plot(t, tl.probs, alpha=0.25, lw=0.8)
            ax.plot(t, moving_average(tl.probs, window), color=line.get_color(), lw=1.4,
                    label=tl.session_id if i < 3 else None)
        ax.axhline(0.5, color="k", lw=0.6, ls=":")
        ax.set_ylim(-0.02, 1.02)
        ax.set_ylabel("P(negative)")
        ax.set_title(GROUP_NAMES.get(g, "all sessions"), fontsize=9)
        ax.legend(fontsize=7, loc="upper right")
    axes[-1, 0].set_xlabel("call time (min)")
    fig.tight_layout()
    _save(fig, path)


def plot_trend_summary(report, path) -> None:
    """NSS and ECR means with bootstrap intervals per group and stage."""
    fig, axes = plt.subplots(1, 2, figsize=(8, 3.2))
    names = list(report.groups)
    width = 0.8 / max(len(names), 1)
    for ax, metric in zip(axes, ("nss", "ecr")):
        for j, g in enumerate(names):
            means, errs = [], [[], []]
            for s in STAGES:
                cell = report.groups[g][s]
                m, ci = cell[f"{metric}_mean"], cell[f"{metric}_ci"]
                means.append(np.nan if m is None else m)
                errs[0].append(0 if m is None else m - ci[0])
                errs[1].append(0 if m is None else ci[1] - m)
            x = np.arange(len(STAGES)) + (j - (len(names) - 1) / 2) * width
            ax.bar(x, means, width, yerr=errs, capsize=3, label=GROUP_NAMES.get(g, g))
        ax.set_xticks(range(len(STAGES)))
        ax.set_xticklabels([STAGE_NAMES[s] for s in STAGES])
        ax.set_title(metric.upper())
        ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path)
