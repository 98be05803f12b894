"""Filtered, multi-threaded consumption of raw event streams.

Stages::

    source -> pid filter -> [pool] -> N parse workers -> reorder buffer
           -> enrichment (single owner of the MappingStore) -> [emit buffer]
           -> sink emitter

Events travel in batches. The pool blocks the source when full, so nothing
is lost before enrichment. The emit buffer is where backpressure becomes
loss: when it stays full longer than ``drop_timeout`` the enriched events
that do not fit are dropped and counted.
"""
from __future__ import annotations

import contextlib
import gc
import logging
import queue
import threading
from importlib import resources
import time
from array import array
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Optional

import numpy as np

from .enrich import EnrichedEvent, MappingStore, correct, update_maps
from .ingest.trace import RawEvent
from .parser import ParseStats, parse
from .schema import SchemaTable
from .sinks import render_jsonl

logger = logging.getLogger(__name__)



@dataclass
class FilterConfig:
    drop_pids: frozenset = frozenset()
    drop_process_names: frozenset = frozenset()

    @classmethod
    def default(cls) -> "FilterConfig":
        """The filter file shipped with the package (pids 4 and 148)."""
        text = resources.files("kevtrace.data").joinpath("default_filter.txt").read_text("utf-8")
        return parse_filter(text)


class FilterConfigError(ValueError):
    pass


def parse_filter(text: str) -> FilterConfig:
    pids, names = set(), set()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        kind, _, value = line.partition(" ")
        value = value.strip()
        if kind == "pid":
            try:
                pid = int(value, 0)
            except ValueError:
                raise FilterConfigError(f"line {lineno}: bad pid {value!r}") from None
            if not 0 <= pid <= 0xFFFFFFFF:
                raise FilterConfigError(f"line {lineno}: pid out of range")
            pids.add(pid)
        elif kind == "name" and value:
            names.add(value)
        else:
            raise FilterConfigError(f"line {lineno}: expected 'pid <n>' or 'name <text>'")
    return FilterConfig(frozenset(pids), frozenset(names))


def load_filter(path) -> FilterConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_filter(fh.read())


def should_filter(config: FilterConfig, event: RawEvent) -> bool:
    return event.pid in config.drop_pids


@dataclass
class PipelineStats:
    ingested: int = 0
    filtered: int = 0
    parsed: int = 0
    skipped_unknown: int = 0
    enriched: int = 0
    emitted: int = 0
    dropped_backpressure: int = 0
    short_payload: int = 0
    out_of_order: int = 0
    latencies: array = field(default_factory=lambda: array("d"))
    sink_errors: dict = field(default_factory=dict)
    source_error: Optional[str] = None
    wall_seconds: float = 0.0

    def accounting_ok(self) -> bool:
        return (self.ingested == self.filtered + self.parsed + self.skipped_unknown
                and self.emitted + self.dropped_backpressure == self.enriched)

    def as_lines(self) -> list[str]:
        summary = measure_latency(self)
        lines = [f"{k}={getattr(self, k)}" for k in (
            "ingested", "filtered", "parsed", "skipped_unknown", "enriched",
            "emitted", "dropped_backpressure", "short_payload", "out_of_order")]
        lines += summary.as_lines()
        lines.append(f"wall_seconds={self.wall_seconds:.6f}")
        for name, err in sorted(self.sink_errors.items()):
            lines.append(f"sink_error.{name}={err}")
        if self.source_error:
            lines.append(f"source_error={self.source_error}")
        return lines


@dataclass
class LatencySummary:
    count: int
    p50: Optional[float]
    p95: Optional[float]
    max: Optional[float]

    @property
    def empty(self) -> bool:
        return self.count == 0

    def as_lines(self) -> list[str]:
        if self.empty:
            return ["latency_count=0", "latency_p50_ms=", "latency_p95_ms=", "latency_max_ms="]
        return [f"latency_count={self.count}", f"latency_p50_ms={self.p50:.6f}",
                f"latency_p95_ms={self.p95:.6f}", f"latency_max_ms={self.max:.6f}"]


def latency_summary(latencies_seconds) -> LatencySummary:
    data = np.frombuffer(latencies_seconds, dtype=np.float64) \
        if isinstance(latencies_seconds, array) else np.asarray(latencies_seconds, dtype=float)
    if data.size == 0:
        return LatencySummary(0, None, None, None)
    ms = data * 1000.0
    p50, p95 = np.percentile(ms, [50, 95])
    return LatencySummary(int(ms.size), float(p50), float(p95), float(ms.max()))


def measure_latency(stats: PipelineStats) -> LatencySummary:
    """Percentiles (linear interpolation) of event-time to emission deltas, in ms."""
    return latency_summary(stats.latencies)


def enrich_stream(events: Iterable[RawEvent], table: SchemaTable, store: MappingStore,
                  config: Optional[FilterConfig] = None,
                  stats: Optional[PipelineStats] = None) -> Iterator[EnrichedEvent]:
    """Serial reference path: same semantics as :func:`run`, one thread."""
    config = config or FilterConfig()
    stats = stats if stats is not None else PipelineStats()
    pstats = ParseStats()
    for raw in events:
        stats.ingested += 1
        if should_filter(config, raw):
            stats.filtered += 1
            continue
        ev = parse(raw, table, pstats)
        if ev is None:
            stats.skipped_unknown += 1
            continue
        names = config.drop_process_names
        named = names and store.pid2name.get(ev.pid) in names
        update_maps(store, ev)
        if named or (names and store.pid2name.get(ev.pid) in names):
            stats.filtered += 1
            continue
        stats.parsed += 1
        stats.enriched += 1
        stats.emitted += 1
        yield correct(store, ev)
    stats.short_payload += pstats.short_payload


class _EmitBuffer:
    """Bounded by event count; ``offer`` admits what fits and reports the rest."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.size = 0
        self._items: deque = deque()
        self._cond = threading.Condition()
        self._closed = False

    def offer(self, batch: list, timeout: float) -> int:
        """Enqueue as much of ``batch`` as fits within ``timeout``; returns the
        number of items dropped."""
        deadline = time.monotonic() + timeout
        i = 0
        with self._cond:
            while True:
                room = self.capacity - self.size
                if room > 0:
                    part = batch[i:i + room]
                    self._items.append(part)
                    self.size += len(part)
                    i += len(part)
                    self._cond.notify_all()
                if i >= len(batch):
                    return 0
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    return len(batch) - i
                self._cond.wait(remaining)

    def take(self):
        with self._cond:
            while not self._items:
                if self._closed:
                    return None
                self._cond.wait()
            batch = self._items.popleft()
            self.size -= len(batch)
            self._cond.notify_all()
            return batch

    def close(self):
        with self._cond:
            self._closed = True
            self._cond.notify_all()


@contextlib.contextmanager
def _gc_paused(enabled: bool):
    """Suspend automatic cyclic collection while events stream through.

    The stages allocate only acyclic, short-lived objects, which reference
    counting frees on its own. Left on, the collector's young-generation
    sweeps stall every thread for tens of milliseconds on a large heap,
    which shows up directly as tail latency.
    """
    if not enabled or not gc.isenabled():
        yield
        return
    gc.freeze()
    gc.disable()
    try:
        yield
    finally:
        gc.enable()
        gc.unfreeze()


class Pipeline:
    def __init__(self, table: SchemaTable, config: FilterConfig, store: MappingStore,
                 sinks: list, worker_count: int = 1, pool_capacity: int = 65536,
                 batch_size: int = 256, drop_timeout: float = 1.0,
                 flush_interval: float = 0.002,
                 event_clock: Optional[Callable[[int], float]] = None,
                 record_emits: bool = False, pause_gc: bool = True):
        if worker_count < 1:
            raise ValueError("worker_count must be >= 1")
        if pool_capacity < 1:
            raise ValueError("pool_capacity must be >= 1")
        self.table = table
        self.config = config
        self.store = store
        self.sinks = list(sinks)
        self.worker_count = worker_count
        self.pool_capacity = pool_capacity
        self.batch_size = max(1, min(batch_size, pool_capacity))
        self.drop_timeout = drop_timeout
        self.flush_interval = flush_interval
        self.event_clock = event_clock
        self.record_emits = record_emits
        self.pause_gc = pause_gc
        # (event timestamp, latency origin, emission time) per emitted event
        self.emit_log: list[tuple[int, float, float]] = []
        self.stats = PipelineStats()

    # stage 1: runs on the caller's thread
    def _produce(self, source, pool):
        stats = self.stats
        drop = self.config.drop_pids
        clock = time.perf_counter
        bsize, interval = self.batch_size, self.flush_interval
        seq = 0
        batch, times = [], []
        started = clock()
        try:
            for raw in source:
                stats.ingested += 1
                if raw.pid in drop:
                    stats.filtered += 1
                    continue
                now = clock()
                if not batch:
                    started = now
                batch.append(raw)
                times.append(now)
                if len(batch) >= bsize or now - started >= interval:
                    pool.put((seq, batch, times))
                    seq += 1
                    batch, times = [], []
        except Exception as exc:  # surfaced through stats after draining
            logger.error("source failed: %s", exc)
            stats.source_error = f"{type(exc).__name__}: {exc}"
        if batch:
            pool.put((seq, batch, times))
            seq += 1
        for _ in range(self.worker_count):
            pool.put(None)
        return seq

    def _work(self, pool, results, cond, pstats):
        table = self.table
        while True:
            item = pool.get()
            if item is None:
                return
            seq, batch, times = item
            parsed = [parse(raw, table, pstats) for raw in batch]
            with cond:
                results[seq] = (parsed, times)
                cond.notify_all()

    def _enrich(self, results, cond, total, emit):
        try:
            self._enrich_loop(results, cond, total, emit)
        except Exception as exc:
            logger.exception("enrichment failed")
            self.stats.source_error = f"enrichment: {type(exc).__name__}: {exc}"
        finally:
            emit.close()

    def _enrich_loop(self, results, cond, total, emit):
        stats, store = self.stats, self.store
        names = self.config.drop_process_names
        pid2name = store.pid2name
        next_seq = 0
        last_ts = 0
        while True:
            with cond:
                while next_seq not in results:
                    if total[0] is not None and next_seq >= total[0]:
                        return
                    cond.wait()
                parsed, times = results.pop(next_seq)
            next_seq += 1
            out = []
            for ev, t_in in zip(parsed, times):
                if ev is None:
                    stats.skipped_unknown += 1
                    continue
                if ev.timestamp < last_ts:
                    stats.out_of_order += 1
                else:
                    last_ts = ev.timestamp
                # name looked up on both sides so a process's own end event is caught
                named = names and pid2name.get(ev.pid) in names
                update_maps(store, ev)
                if named or (names and pid2name.get(ev.pid) in names):
                    stats.filtered += 1
                    continue
                stats.parsed += 1
                ee = correct(store, ev)
                stats.enriched += 1
                out.append((ee, render_jsonl(ee), t_in))
            if out:
                dropped = emit.offer(out, self.drop_timeout)
                stats.dropped_backpressure += dropped

    def _emit(self, emit):
        stats = self.stats
        active = list(self.sinks)
        clock = time.perf_counter
        origin = self.event_clock
        lat = stats.latencies
        log = self.emit_log if self.record_emits else None
        while True:
            batch = emit.take()
            if batch is None:
                return
            for ee, line, t_in in batch:
                failed = None
                for sink in active:
                    try:
                        sink.write(ee, line)
                    except Exception as exc:
                        name = getattr(sink, "name", type(sink).__name__)
                        logger.error("sink %s failed: %s", name, exc)
                        stats.sink_errors[name] = f"{type(exc).__name__}: {exc}"
                        failed = (failed or []) + [sink]
                if failed:
                    active = [s for s in active if s not in failed]
                t_out = clock()
                t_ref = origin(ee.event.timestamp) if origin else t_in
                lat.append(t_out - t_ref)
                if log is not None:
                    log.append((ee.event.timestamp, t_ref, t_out))
                stats.emitted += 1

    def run(self, source: Iterable[RawEvent]) -> PipelineStats:
        with _gc_paused(self.pause_gc):
            return self._run(source)

    def _run(self, source: Iterable[RawEvent]) -> PipelineStats:
        t0 = time.perf_counter()
        pool = queue.Queue(maxsize=max(1, self.pool_capacity // self.batch_size))
        results: dict = {}
        cond = threading.Condition()
        total = [None]
        emit = _EmitBuffer(self.pool_capacity)
        pstats = [ParseStats() for _ in range(self.worker_count)]
        workers = [threading.Thread(target=self._work, args=(pool, results, cond, ps),
                                    name=f"parse-{i}", daemon=True)
                   for i, ps in enumerate(pstats)]
        enricher = threading.Thread(target=self._enrich, args=(results, cond, total, emit),
                                    name="enrich", daemon=True)
        emitter = threading.Thread(target=self._emit, args=(emit,), name="emit", daemon=True)
        for t in workers + [enricher, emitter]:
            t.start()
        n_batches = self._produce(source, pool)
        with cond:
            total[0] = n_batches
            cond.notify_all()
        for t in workers:
            t.join()
        enricher.join()
        emitter.join()
        for sink in self.sinks:
            try:
                sink.close()
            except Exception as exc:
                name = getattr(sink, "name", type(sink).__name__)
                self.stats.sink_errors.setdefault(name, f"{type(exc).__name__}: {exc}")
        self.stats.short_payload = sum(p.short_payload for p in pstats)
        self.stats.wall_seconds = time.perf_counter() - t0
        return self.stats


def run(source: Iterable[RawEvent], schema: SchemaTable, filter: FilterConfig,
        store: MappingStore, sinks: list, worker_count: int = 1,
        pool_capacity: int = 65536, **kwargs) -> PipelineStats:
    return Pipeline(schema, filter, store, sinks, worker_count, pool_capacity, **kwargs).run(source)
