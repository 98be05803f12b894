"""Live throughput and latency measurement against the synthetic generator.

The generator releases event ``k`` no earlier than ``epoch + k / rate``, and
that release time is the event's logical occurrence time. Latency is the gap
between it and the moment the emitter hands the event to the sinks.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .enrich import MappingStore
from .ingest.scenario import ScenarioScript, TimedStream
from .pipeline import FilterConfig, LatencySummary, Pipeline, PipelineStats, latency_summary
from .schema import SchemaTable, default_schema

TICKS_PER_SECOND = 10_000_000


@dataclass
class BenchReport:
    rate: float
    duration: float
    workers: int
    offered: int
    throughput: float
    latency: LatencySummary
    loss: int
    stats: PipelineStats
    epoch: float = 0.0
    finished: float = 0.0
    emit_log: list = field(default_factory=list, repr=False)

    def as_lines(self) -> list[str]:
        lines = [
            f"rate={self.rate:g}",
            f"duration={self.duration:g}",
            f"workers={self.workers}",
            f"offered={self.offered}",
            f"throughput={self.throughput:.1f}",
            f"loss={self.loss}",
        ]
        lines += self.latency.as_lines()
        return lines


class _NullSink:
    name = "null"

    def write(self, ee, line=None):
        pass

    def close(self):
        pass


def _throughput(ingested: int, epoch: float, finished: float) -> float:
    span = finished - epoch
    return ingested / span if span > 0 else 0.0


def run_bench(script: ScenarioScript, rate: float, duration: float, workers: int = 4,
              seed: int = 0, table: Optional[SchemaTable] = None, sinks=None,
              config: Optional[FilterConfig] = None,
              pool_capacity: int = 1 << 20, drop_timeout: float = 1.0) -> BenchReport:
    """Feed ``rate * duration`` paced events through a fresh pipeline."""
    if rate <= 0 or duration <= 0:
        raise ValueError("rate and duration must be positive")
    table = table or default_schema()
    count = max(1, int(rate * duration))
    stream = TimedStream(script, seed, rate, count, realtime=True, table=table)

    def event_clock(ts: int) -> float:
        return stream.epoch + ts / TICKS_PER_SECOND

    pipe = Pipeline(table, config or FilterConfig.default(), MappingStore(table),
                    list(sinks) if sinks else [_NullSink()], worker_count=workers,
                    pool_capacity=pool_capacity, drop_timeout=drop_timeout,
                    event_clock=event_clock, record_emits=True)
    stats = pipe.run(stream)
    log = pipe.emit_log
    finished = log[-1][2] if log else stream.epoch
    return BenchReport(
        rate=rate, duration=duration, workers=workers, offered=count,
        throughput=_throughput(stats.ingested, stream.epoch, finished),
        latency=latency_summary(stats.latencies), loss=stats.dropped_backpressure,
        stats=stats, epoch=stream.epoch, finished=finished, emit_log=log,
    )


def recompute(emit_log, epoch: float, ingested: int) -> tuple[float, LatencySummary]:
    """Throughput and latency rebuilt from ``(timestamp, _, emitted_at)`` rows alone."""
    if not emit_log:
        return 0.0, latency_summary([])
    ts = np.array([row[0] for row in emit_log], dtype=np.float64)
    out = np.array([row[2] for row in emit_log], dtype=np.float64)
    deltas = out - (epoch + ts / TICKS_PER_SECOND)
    return _throughput(ingested, epoch, float(out.max())), latency_summary(deltas)


def write_emit_log(path, report: BenchReport) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# epoch={report.epoch!r} ingested={report.stats.ingested}\n")
        for ts, _, t_out in report.emit_log:
            fh.write(f"{ts} {t_out!r}\n")


def read_emit_log(path) -> tuple[float, int, list]:
    rows = []
    epoch, ingested = 0.0, 0
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.startswith("#"):
                for tok in line[1:].split():
                    k, _, v = tok.partition("=")
                    if k == "epoch":
                        epoch = float(v)
                    elif k == "ingested":
                        ingested = int(v)
                continue
            ts, t_out = line.split()
            rows.append((int(ts), None, float(t_out)))
    return epoch, ingested, rows
