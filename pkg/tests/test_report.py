from collections import Counter

from kevtrace.report import EventCounter, plot_emission_rate, plot_event_counts, plot_latency
from kevtrace.pipeline import latency_summary

PNG = b"\x89PNG"


def test_plots_write_png_files(tmp_path):
    lat = [0.001 * i for i in range(1, 200)]
    plot_latency(lat, tmp_path / "lat.png", latency_summary(lat))
    plot_latency([], tmp_path / "empty.png")
    log = [(i * 1000, 0.0, 10.0 + i * 0.001) for i in range(500)]
    plot_emission_rate(log, 10.0, tmp_path / "rate.png")
    plot_event_counts(Counter({"A": 3, "B": 1}), tmp_path / "counts.png")
    for name in ("lat.png", "empty.png", "rate.png", "counts.png"):
        assert (tmp_path / name).read_bytes()[:4] == PNG


def test_event_counter():
    class E:
        event_name = "X"
    c = EventCounter()
    c.write(E())
    c.write(E())
    c.close()
    assert c.counts == Counter({"X": 2})
