import pytest

from kevtrace.bench import read_emit_log, recompute, run_bench, write_emit_log
from kevtrace.ingest import random_script
from oracles import percentile_linear, recompute_latency_ms


def test_small_bench_and_offline_recompute(tmp_path):
    report = run_bench(random_script(0, 200), rate=5000, duration=0.4, workers=2)
    assert report.offered == 2000
    assert report.stats.ingested == 2000
    assert report.loss == 0
    assert report.stats.accounting_ok()
    assert report.throughput > 0
    assert report.finished >= report.epoch

    throughput, latency = recompute(report.emit_log, report.epoch, report.stats.ingested)
    assert throughput == pytest.approx(report.throughput)
    ms = recompute_latency_ms(report.emit_log, report.epoch)
    assert latency.p95 == pytest.approx(percentile_linear(ms, 95), rel=1e-9, abs=1e-9)
    assert latency.p50 == pytest.approx(report.latency.p50, rel=1e-6, abs=1e-6)

    path = tmp_path / "emit.log"
    write_emit_log(path, report)
    epoch, ingested, rows = read_emit_log(path)
    assert (epoch, ingested) == (report.epoch, report.stats.ingested)
    again, lat2 = recompute(rows, epoch, ingested)
    assert again == pytest.approx(throughput)
    assert lat2.p95 == pytest.approx(latency.p95)

    lines = report.as_lines()
    assert lines[0] == "rate=5000" and any(line.startswith("latency_p95_ms=") for line in lines)


def test_bench_rejects_bad_rate():
    with pytest.raises(ValueError):
        run_bench(random_script(0, 10), rate=0, duration=1)


def test_recompute_empty():
    throughput, latency = recompute([], 0.0, 0)
    assert throughput == 0.0 and latency.empty
