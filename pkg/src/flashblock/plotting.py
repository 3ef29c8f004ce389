"""Figure rendering for sweep and analysis reports.

Every CLI report command renders a companion PNG next to its delimited
output; the CSV stays the primary, determinism-checked artifact and the
figures are a convenience view of the same rows.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = [
    "plot_context_sweep",
    "plot_density_sweep",
    "plot_similarity_summary",
    "plot_gate_table",
]


def plot_context_sweep(rows, path: str) -> None:
    """Mean per-step key rows read vs context length, one line per cell."""
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    cells = sorted({(r.policy, r.tau) for r in rows})
    for policy, tau in cells:
        contexts = sorted({r.context for r in rows if r.policy == policy and r.tau == tau})
        means = [
            np.mean(
                [
                    r.kv_rows_read
                    for r in rows
                    if r.policy == policy and r.tau == tau and r.context == c
                ]
            )
            for c in contexts
        ]
        ax.plot(contexts, means, marker="o", label=f"{policy} (tau={tau})")
    ax.set_xscale("log", base=2)
    ax.set_yscale("log", base=2)
    ax.set_xlabel("committed context length (tokens)")
    ax.set_ylabel("mean key rows per step per (layer, head)")
    ax.set_title("Attention work vs context length")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_density_sweep(rows, path: str) -> None:
    """Mean output gap vs key density for both sparse variants."""
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    densities = sorted({r.density for r in rows})
    for attr, label in (
        ("l1_sparse_only", "sparse only (renormalized)"),
        ("l1_with_residual", "sparse + cached residual"),
    ):
        means = [
            np.mean([getattr(r, attr) for r in rows if r.density == d])
            for d in densities
        ]
        ax.plot(densities, means, marker="o", label=label)
    ax.set_yscale("log")
    ax.set_xlabel("key density")
    ax.set_ylabel("mean |sparse - dense| per element")
    ax.set_title("Sparse attention gap vs density")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_similarity_summary(records, path: str) -> None:
    """Per-head cross-step similarity of external vs internal partials."""
    layers = sorted({r.layer for r in records})
    fig, axes = plt.subplots(
        1, max(1, len(layers)), figsize=(3.2 * max(1, len(layers)), 3.4), sharey=True
    )
    if len(layers) <= 1:
        axes = [axes]
    for ax, layer in zip(axes, layers):
        heads = sorted({r.head for r in records if r.layer == layer})
        out = [
            np.mean([r.mean_diag_out for r in records if r.layer == layer and r.head == h])
            for h in heads
        ]
        inn = [
            np.mean([r.mean_diag_in for r in records if r.layer == layer and r.head == h])
            for h in heads
        ]
        ax.plot(heads, out, marker="o", label="external")
        ax.plot(heads, inn, marker="s", label="internal")
        ax.set_title(f"layer {layer}")
        ax.set_xlabel("head")
        ax.set_ylim(-1.05, 1.05)
        ax.grid(True, alpha=0.3)
    axes[0].set_ylabel("mean diagonal cosine similarity")
    axes[-1].legend(loc="lower right")
    fig.suptitle("Cross-step partial-output similarity")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_gate_table(table, path: str) -> None:
    """Calibrated per-head similarities against the gating threshold."""
    fig, ax = plt.subplots(figsize=(6.5, 3.6))
    labels = [f"L{g.layer}H{g.head}" for g in table.heads]
    sims = [g.similarity for g in table.heads]
    colors = ["tab:green" if g.enabled else "tab:red" for g in table.heads]
    ax.bar(range(len(labels)), sims, color=colors)
    ax.axhline(table.gamma, color="black", linestyle="--", label=f"gamma={table.gamma}")
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=90, fontsize=7)
    ax.set_ylabel("mean external-partial similarity")
    ax.set_title("Head-gate calibration")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
