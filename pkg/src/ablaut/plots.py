"""Minimal SVG summaries of posterior regime contrasts."""

import numpy as np

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def regime_difference_plot(summary, path, level=0.95):
    """Violin-plus-interval figure of the E-minus-N contrasts per state."""
    fig, axes = plt.subplots(1, 3, figsize=(11, 3.2), sharey=False)
    for ax, name in zip(axes, ("stationary", "entry", "exit")):
        diffs = summary.quantity(name)
        parts = ax.violinplot([diffs[:, s] for s in range(len(summary.states))],
                              showextrema=False)
        for body in parts["bodies"]:
            body.set_alpha(0.5)
        bounds = summary.hdis[level][name]
        for s in range(len(summary.states)):
            ax.plot([s + 1, s + 1], bounds[s], color="black", lw=2)
            ax.plot(s + 1, np.median(diffs[:, s]), "o", color="black", ms=3)
        ax.axhline(0.0, color="grey", lw=0.8, ls="--")
        ax.set_xticks(range(1, len(summary.states) + 1))
        ax.set_xticklabels(summary.states, fontsize=8)
        ax.set_title(f"Δ {name} (E − N)", fontsize=10)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def reconstruction_plot(reconstructions, state_names, path, max_verbs=40):
    """Stacked-bar summary of root-state posteriors for the first verbs."""
    subset = reconstructions[:max_verbs]
    freqs = np.array([r.frequencies for r in subset])
    fig, ax = plt.subplots(figsize=(max(6, 0.22 * len(subset)), 3.2))
    bottom = np.zeros(len(subset))
    for s, name in enumerate(state_names):
        ax.bar(range(len(subset)), freqs[:, s], bottom=bottom, label=name, width=0.8)
        bottom += freqs[:, s]
    ax.set_xticks(range(len(subset)))
    ax.set_xticklabels([r.verb for r in subset], rotation=90, fontsize=6)
    ax.set_ylabel("posterior root-state frequency")
    ax.legend(fontsize=7, ncol=3)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
