import gc
import time

import pytest
from hypothesis import given, settings, strategies as st

from kevtrace.enrich import MappingStore
from kevtrace.ingest import RawEvent, expand, random_script
from kevtrace.mirror import ApiIndex
from kevtrace.pipeline import (
    FilterConfig,
    FilterConfigError,
    Pipeline,
    enrich_stream,
    latency_summary,
    parse_filter,
    run,
)
from kevtrace.sinks import render_jsonl


class ListSink:
    name = "list"

    def __init__(self, delay=0.0):
        self.lines = []
        self.delay = delay
        self.closed = False

    def write(self, ee, line=None):
        if self.delay:
            time.sleep(self.delay)
        self.lines.append(line if line is not None else render_jsonl(ee))

    def close(self):
        self.closed = True


class FailingSink(ListSink):
    name = "failing"

    def __init__(self, after):
        super().__init__()
        self.after = after

    def write(self, ee, line=None):
        if len(self.lines) >= self.after:
            raise OSError("disk full")
        super().write(ee, line)


def serial_lines(events, table, manifests, config):
    store = MappingStore(table, ApiIndex(manifests))
    return [render_jsonl(ee) for ee in enrich_stream(events, table, store, config)]


def test_filter_parsing():
    cfg = parse_filter("# x\npid 4\npid 0x94\nname svchost.exe\n")
    assert cfg.drop_pids == {4, 148}
    assert cfg.drop_process_names == {"svchost.exe"}
    assert FilterConfig.default().drop_pids == {4, 148}
    for bad in ("pid x", "pid -1", "host a", "name"):
        with pytest.raises(FilterConfigError):
            parse_filter(bad)


def test_latency_summary_interpolates():
    s = latency_summary([0.001, 0.002, 0.003, 0.004])
    assert s.count == 4
    assert s.p50 == pytest.approx(2.5)
    assert s.p95 == pytest.approx(3.85)
    assert s.max == pytest.approx(4.0)
    assert latency_summary([]).empty


def test_multi_worker_output_matches_serial(table, manifests):
    events = expand(random_script(11, 400), 11, table)
    cfg = FilterConfig.default()
    expected = serial_lines(events, table, manifests, cfg)
    for workers in (1, 3, 8):
        sink = ListSink()
        stats = run(events, table, cfg, MappingStore(table, ApiIndex(manifests)), [sink],
                    worker_count=workers, pool_capacity=64, batch_size=7)
        assert stats.accounting_ok()
        assert sink.lines == expected
        assert sink.closed


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 1000), workers=st.integers(1, 4),
       pool=st.integers(1, 500), batch=st.integers(1, 64),
       pids=st.sets(st.sampled_from([4, 148, 0, 2000]), max_size=3))
def test_accounting_holds_for_any_configuration(table, manifests, seed, workers, pool, batch, pids):
    events = expand(random_script(seed, 120), seed, table)
    events.append(RawEvent(events[-1].timestamp + 1, 1, 1, 77, 1, b""))  # unknown kind
    cfg = FilterConfig(frozenset(pids))
    sink = ListSink()
    stats = run(events, table, cfg, MappingStore(table, ApiIndex(manifests)), [sink],
                worker_count=workers, pool_capacity=pool, batch_size=batch)
    assert stats.ingested == len(events)
    assert stats.filtered == sum(e.pid in pids for e in events)
    assert stats.ingested == stats.filtered + stats.parsed + stats.skipped_unknown
    assert stats.enriched == stats.parsed
    assert stats.emitted + stats.dropped_backpressure == stats.enriched
    assert stats.dropped_backpressure == 0
    assert len(sink.lines) == stats.emitted
    assert sink.lines == serial_lines(events, table, manifests, cfg)


def test_backpressure_drops_are_counted(table):
    events = expand(random_script(5, 300), 5, table)
    sink = ListSink(delay=0.002)
    stats = run(events, table, FilterConfig(), MappingStore(table), [sink],
                worker_count=2, pool_capacity=1, drop_timeout=0.001)
    assert stats.dropped_backpressure > 0
    assert stats.accounting_ok()
    assert len(sink.lines) == stats.emitted


def test_failing_sink_is_isolated(table):
    events = expand(random_script(3, 200), 3, table)
    good, bad = ListSink(), FailingSink(after=5)
    stats = run(events, table, FilterConfig(), MappingStore(table), [bad, good])
    assert "failing" in stats.sink_errors
    assert len(bad.lines) == 5
    assert len(good.lines) == stats.emitted


def test_source_error_is_reported(table):
    events = expand(random_script(3, 50), 3, table)

    def broken():
        yield from events[:10]
        raise OSError("device gone")

    sink = ListSink()
    stats = run(broken(), table, FilterConfig(), MappingStore(table), [sink])
    assert "device gone" in stats.source_error
    assert stats.ingested == 10
    assert stats.accounting_ok()


def test_gc_settings_restored(table):
    before = gc.get_threshold()
    seen = []

    class Probe(ListSink):
        def write(self, ee, line=None):
            seen.append(gc.isenabled())

    events = expand(random_script(3, 20), 3, table)
    run(events, table, FilterConfig(), MappingStore(table), [Probe()])
    assert seen and not any(seen)
    assert gc.isenabled()
    assert gc.get_threshold() == before
    assert gc.get_freeze_count() == 0
    run(events, table, FilterConfig(), MappingStore(table), [Probe()], pause_gc=False)
    assert seen[-1] is True


def test_emit_log_records_clock(table):
    events = expand(random_script(3, 50), 3, table)
    pipe = Pipeline(table, FilterConfig(), MappingStore(table), [ListSink()],
                    event_clock=lambda ts: 0.0, record_emits=True)
    stats = pipe.run(events)
    assert len(pipe.emit_log) == stats.emitted == len(stats.latencies)
    assert all(t_ref == 0.0 and t_out > 0 for _, t_ref, t_out in pipe.emit_log)


def test_invalid_sizes(table):
    with pytest.raises(ValueError):
        Pipeline(table, FilterConfig(), MappingStore(table), [], worker_count=0)
    with pytest.raises(ValueError):
        Pipeline(table, FilterConfig(), MappingStore(table), [], pool_capacity=0)


def test_process_name_filter(table):
    from kevtrace.ingest import builtin_script
    events = expand(builtin_script("net_user"), 0, table)
    cfg = FilterConfig(drop_process_names=frozenset({"net.exe"}))
    sink = ListSink()
    stats = run(events, table, cfg, MappingStore(table), [sink], worker_count=2)
    assert stats.accounting_ok()
    assert stats.filtered > 0
    assert sink.lines == serial_lines(events, table, {}, cfg)
    assert not any('"pid":5316' in line for line in sink.lines)
