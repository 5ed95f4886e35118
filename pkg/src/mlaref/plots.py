"""Figure rendering for the report subcommands.

Each helper takes the same row dicts the CSV writers consume and saves one
PNG. Rendering is headless (Agg) and optional everywhere; data files stay
the source of truth.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_METHOD_COLORS = {"naive": "tab:blue", "absorb": "tab:orange", "hybrid": "tab:green"}
_COMPONENT_ORDER = ("stage1_attn", "stage2_attn", "wkvb1_proj", "wkvb2_proj", "combine_lse")


def _save(fig, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return path


def save_roofline_plot(rows: list[dict], path: Path, crossover: int | None = None) -> Path:
    """Throughput vs batch per method, log-log, with the crossover marked."""
    fig, ax = plt.subplots(figsize=(7, 4.5))
    methods = sorted({r["method"] for r in rows if r["method"] in _METHOD_COLORS})
    for method in methods:
        pts = sorted((r["B"], r["tokens_per_s"]) for r in rows if r["method"] == method)
        ax.plot(
            [p[0] for p in pts],
            [p[1] for p in pts],
            marker="o",
            markersize=3,
            label=method,
            color=_METHOD_COLORS[method],
        )
    if crossover is not None:
        ax.axvline(crossover, color="gray", linestyle="--", linewidth=1)
        ax.annotate(f"crossover B={crossover}", (crossover, ax.get_ylim()[0]), fontsize=8,
                    textcoords="offset points", xytext=(4, 8), color="gray")
    ax.set_xscale("log", base=2)
    ax.set_yscale("log")
    ax.set_xlabel("batch size")
    ax.set_ylabel("modeled tokens / s")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    return _save(fig, path)


def save_threshold_plot(
    batches: list[int],
    naive_shared_times: list[float],
    absorb_shared_times: list[float],
    crossover: int,
    path: Path,
) -> Path:
    """Shared-part step time for the two formulations around the crossover."""
    fig, ax = plt.subplots(figsize=(6.5, 4))
    ax.plot(batches, naive_shared_times, label="expanded (naive)", color="tab:blue")
    ax.plot(batches, absorb_shared_times, label="latent (absorb)", color="tab:orange")
    ax.axvline(crossover, color="gray", linestyle="--", linewidth=1, label=f"crossover {crossover}")
    ax.set_xscale("log", base=2)
    ax.set_yscale("log")
    ax.set_xlabel("batch size")
    ax.set_ylabel("shared-part time (s)")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    return _save(fig, path)


def save_footprint_heatmap(rows: list[dict], path: Path) -> Path:
    """Overhead ratio over the (batch, max_seq) grid."""
    batches = sorted({r["batch"] for r in rows})
    seqs = sorted({r["max_seq"] for r in rows})
    grid = np.full((len(seqs), len(batches)), np.nan)
    for r in rows:
        grid[seqs.index(r["max_seq"]), batches.index(r["batch"])] = 100.0 * r["overhead_ratio"]
    fig, ax = plt.subplots(figsize=(6.5, 4.5))
    im = ax.imshow(grid, origin="lower", aspect="auto", cmap="viridis")
    ax.set_xticks(range(len(batches)), [str(b) for b in batches])
    ax.set_yticks(range(len(seqs)), [str(s) for s in seqs])
    ax.set_xlabel("batch size")
    ax.set_ylabel("max sequence length")
    for i in range(len(seqs)):
        for j in range(len(batches)):
            if not np.isnan(grid[i, j]):
                ax.text(j, i, f"{grid[i, j]:.2f}%", ha="center", va="center", fontsize=7,
                        color="white" if grid[i, j] < np.nanmax(grid) / 2 else "black")
    fig.colorbar(im, ax=ax, label="expanded-prefix overhead (%)")
    return _save(fig, path)


def save_breakdown_plot(component_times: dict[str, dict[str, float]], path: Path) -> Path:
    """Stacked per-component modeled time, one bar per simulation run."""
    labels = list(component_times.keys())
    fig, ax = plt.subplots(figsize=(1.8 + 1.4 * len(labels), 4.5))
    bottoms = np.zeros(len(labels))
    for comp in _COMPONENT_ORDER:
        vals = np.array([component_times[k].get(comp, 0.0) * 1e3 for k in labels])
        ax.bar(labels, vals, bottom=bottoms, label=comp)
        bottoms += vals
    ax.set_ylabel("modeled time (ms)")
    ax.grid(True, axis="y", alpha=0.3)
    ax.legend(fontsize=8)
    return _save(fig, path)


def save_speedup_plot(rows: list[dict], path: Path) -> Path:
    """Hybrid-over-absorb modeled speedup vs batch."""
    pts = sorted(
        (r["B"], r["speedup_vs_absorb"]) for r in rows if r["method"] == "hybrid"
    )
    fig, ax = plt.subplots(figsize=(6.5, 4))
    ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", color="tab:green")
    ax.axhline(1.0, color="gray", linewidth=1, linestyle="--")
    ax.set_xscale("log", base=2)
    ax.set_xlabel("batch size")
    ax.set_ylabel("speedup vs absorb-only")
    ax.grid(True, which="both", alpha=0.3)
    return _save(fig, path)


def save_equivalence_plot(rows: list[dict], tolerance: float, path: Path) -> Path:
    """Per-trial worst relative error against the pass threshold."""
    fig, ax = plt.subplots(figsize=(6.5, 4))
    errs = [max(r["max_err"], 1e-30) for r in rows]
    ax.semilogy(range(len(errs)), errs, ".", markersize=3, color="tab:blue")
    ax.axhline(tolerance, color="tab:red", linewidth=1, label=f"tolerance {tolerance:g}")
    ax.set_xlabel("trial")
    ax.set_ylabel("max relative error")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    return _save(fig, path)
