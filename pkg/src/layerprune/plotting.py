"""Figures written next to CLI reports. Uses the non-interactive Agg backend."""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.patches import Patch  # noqa: E402

from .strategies import POSITIONAL, PlanError  # noqa: E402

DROPPED_COLOR = "#d62728"
KEPT_COLOR = "#c7dcef"


def get_plot(width=6.0, height=None):
    golden_ratio = (math.sqrt(5) - 1.0) / 2.0
    if not height:
        height = width * golden_ratio
    fig, ax = plt.subplots(figsize=(width, height), facecolor="w")
    return fig, ax


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_strategies(L: int, K: int, path):
    """One row per positional strategy, one cell per layer; dropped cells in red.

    Strategies that cannot drop K of L layers are left blank and labelled.
    """
    fig, ax = get_plot(width=max(4.0, 0.45 * L + 2.5), height=0.5 * len(POSITIONAL) + 1.0)
    for row, (strategy, make) in enumerate(POSITIONAL.items()):
        y = len(POSITIONAL) - 1 - row
        try:
            dropped = make(L, K).dropped
        except PlanError:
            ax.text(L / 2 + 0.5, y, "n/a", ha="center", va="center", color="gray")
            continue
        for layer in range(1, L + 1):
            color = DROPPED_COLOR if layer in dropped else KEPT_COLOR
            ax.add_patch(plt.Rectangle((layer - 0.45, y - 0.35), 0.9, 0.7, color=color))
    ax.set_xlim(0.4, L + 0.6)
    ax.set_ylim(-0.6, len(POSITIONAL) - 0.4)
    ax.set_xticks(range(1, L + 1))
    ax.set_yticks(range(len(POSITIONAL)))
    ax.set_yticklabels([s.value for s in reversed(list(POSITIONAL))])
    ax.set_xlabel("layer")
    ax.set_title(f"dropping K={K} of L={L} layers")
    ax.legend(handles=[Patch(color=DROPPED_COLOR, label="dropped"), Patch(color=KEPT_COLOR, label="kept")],
              loc="upper left", bbox_to_anchor=(1.0, 1.0), frameon=False)
    return _save(fig, path)


def plot_similarity_profile(profile, thresholds, path):
    sims = profile.mean_similarity
    layers = range(1, len(sims) + 1)
    fig, ax = get_plot()
    ax.plot(layers, sims, "o-", color="k", label="mean CLS cosine")
    for t, style in zip(sorted(thresholds, reverse=True), ("--", "-.", ":", (0, (1, 3)))):
        ax.axhline(t, linestyle=style, color=DROPPED_COLOR, linewidth=1, label=f"threshold {t:g}")
    ax.set_xticks(list(layers))
    ax.set_xlabel("layer")
    ax.set_ylabel("similarity of input and output")
    ax.set_title(f"layer contribution (n={profile.n_examples})")
    ax.legend(frameon=False, fontsize="small")
    return _save(fig, path)


def plot_training(metrics, path, title="fine-tuning"):
    fig, ax = get_plot()
    steps = range(1, len(metrics.step_losses) + 1)
    ax.plot(steps, metrics.step_losses, color="0.6", linewidth=0.8, label="train loss")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax2 = ax.twinx()
    ax2.plot([e["step"] for e in metrics.epochs], [e["dev_accuracy"] for e in metrics.epochs],
             "o-", color="C0", label="dev accuracy")
    ax2.set_ylim(0, 1.02)
    ax2.set_ylabel("dev accuracy")
    for ev in metrics.events:
        step = metrics.epochs[ev["after_epoch"] - 1]["step"]
        ax.axvline(step, color=DROPPED_COLOR, linestyle=":", linewidth=1)
    ax.set_title(title)
    return _save(fig, path)


def plot_drop_curve(scores, full_score, threshold, chosen, path):
    ks = sorted(scores)
    fig, ax = get_plot()
    ax.plot(ks, [scores[k] for k in ks], "o-", color="k")
    ax.axhspan(full_score - threshold, full_score, color=KEPT_COLOR, alpha=0.6,
               label=f"within {threshold:g} points")
    ax.axvline(chosen, color=DROPPED_COLOR, linestyle="--", label=f"max droppable = {chosen}")
    ax.set_xlabel("layers dropped")
    ax.set_ylabel("task score")
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_strategy_comparison(table, path):
    names = list(table)
    fig, ax = get_plot()
    ax.bar(names, [table[n]["mean"] for n in names], yerr=[table[n]["std"] for n in names],
           color=KEPT_COLOR, edgecolor="k", capsize=4)
    ax.set_ylabel("dev accuracy")
    ax.set_ylim(0, 1.05)
    ax.tick_params(axis="x", rotation=20)
    return _save(fig, path)
