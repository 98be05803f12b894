"""Figures written next to the delimited outputs of ``run`` and ``bench``."""
from __future__ import annotations

from collections import Counter
from typing import Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .pipeline import LatencySummary  # noqa: E402


def plot_latency(latencies_seconds, path, summary: Optional[LatencySummary] = None,
                 title: str = "Emission latency") -> None:
    """Histogram of per-event latency in ms with p50/p95 markers."""
    ms = np.asarray(latencies_seconds, dtype=float) * 1000.0
    fig, ax = plt.subplots(figsize=(7, 4))
    if ms.size:
        ax.hist(ms, bins=min(100, max(10, int(np.sqrt(ms.size)))), color="#4c72b0")
        if summary is not None and not summary.empty:
            ax.axvline(summary.p50, color="#dd8452", linestyle="--", label=f"p50 {summary.p50:.1f} ms")
            ax.axvline(summary.p95, color="#c44e52", linestyle="--", label=f"p95 {summary.p95:.1f} ms")
            ax.legend()
    else:
        ax.text(0.5, 0.5, "no events", ha="center", va="center", transform=ax.transAxes)
    ax.set_xlabel("latency (ms)")
    ax.set_ylabel("events")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_emission_rate(emit_log, epoch: float, path, bin_seconds: float = 0.1) -> None:
    """Events emitted per second over the run, from ``(ts, origin, emitted_at)`` rows."""
    out = np.array([row[2] for row in emit_log], dtype=float) - epoch
    fig, ax = plt.subplots(figsize=(7, 3.5))
    if out.size:
        edges = np.arange(0.0, out.max() + bin_seconds, bin_seconds)
        if edges.size < 2:
            edges = np.array([0.0, bin_seconds])
        counts, edges = np.histogram(out, bins=edges)
        ax.plot(edges[:-1], counts / bin_seconds, drawstyle="steps-post")
    ax.set_xlabel("seconds since start")
    ax.set_ylabel("events/s")
    ax.set_title("Emission rate")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_event_counts(counts: Counter, path, top: int = 25) -> None:
    """Horizontal bar chart of emitted events per event name."""
    items = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:top]
    fig, ax = plt.subplots(figsize=(7, 0.3 * max(len(items), 4) + 1))
    if items:
        names, values = zip(*items)
        y = np.arange(len(names))
        ax.barh(y, values, color="#55a868")
        ax.set_yticks(y, labels=names)
        ax.invert_yaxis()
    ax.set_xlabel("events")
    ax.set_title("Emitted events by type")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


class EventCounter:
    """Sink that tallies emitted events by name."""

    name = "counter"

    def __init__(self):
        self.counts: Counter = Counter()

    def write(self, ee, line=None) -> None:
        self.counts[ee.event_name] += 1

    def close(self) -> None:
        pass
