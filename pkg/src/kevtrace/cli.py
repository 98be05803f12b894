"""Command line entry point: run, generate, bench and inspect.

Exit codes: 0 success, 2 runtime or sink failure, 3 configuration error.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from typing import Optional

from . import __version__
from .bench import recompute, run_bench, write_emit_log
from .enrich import MappingStore
from .ingest import (
    ScriptError,
    TraceFormatError,
    TraceIntegrityError,
    TraceWriteError,
    builtin_script,
    expand,
    generate,
    load_script,
    open_trace,
    random_script,
    write_trace,
)
from .ingest.trace import FILE_HEADER, FRAME_HEADER
from .mirror import ApiIndex, ManifestError, default_manifests, load_manifests
from .pipeline import FilterConfig, FilterConfigError, Pipeline, load_filter
from .report import EventCounter, plot_emission_rate, plot_event_counts, plot_latency
from .schema import SchemaError, SchemaParseError, default_schema, load_schema_file
from .sinks import DotSink, JsonlSink, RemoteSink, TriplesSink, parse_endpoint

EXIT_OK = 0
EXIT_RUNTIME = 2
EXIT_CONFIG = 3

log = logging.getLogger("kevtrace")


class ConfigError(Exception):
    pass


def _fail_config(message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return EXIT_CONFIG


def resolve_script(ref: str):
    """A script path, or the name of a built-in scenario."""
    if os.path.exists(ref):
        return load_script(ref)
    if os.sep in ref or ref.endswith(".txt"):
        raise ConfigError(f"script not found: {ref}")
    return builtin_script(ref)


def _load_schema(path: Optional[str]):
    if path is None:
        return default_schema()
    try:
        return load_schema_file(path)
    except OSError as exc:
        raise ConfigError(f"cannot read schema {path}: {exc.strerror or exc}") from None
    except (SchemaParseError, SchemaError) as exc:
        raise ConfigError(f"bad schema {path}: {exc}") from None


def _load_filter(path: Optional[str]) -> FilterConfig:
    if path is None:
        return FilterConfig.default()
    try:
        return load_filter(path)
    except OSError as exc:
        raise ConfigError(f"cannot read filter {path}: {exc.strerror or exc}") from None
    except FilterConfigError as exc:
        raise ConfigError(f"bad filter {path}: {exc}") from None


def _load_manifests(path: Optional[str]):
    if path is None:
        return default_manifests()
    try:
        return load_manifests(path)
    except OSError as exc:
        raise ConfigError(f"cannot read manifests {path}: {exc.strerror or exc}") from None
    except ManifestError as exc:
        raise ConfigError(f"bad manifest: {exc}") from None


def _open_source(args, table):
    if args.trace:
        try:
            return open_trace(args.trace)
        except OSError as exc:
            raise ConfigError(f"cannot open trace {args.trace}: {exc.strerror or exc}") from None
        except TraceFormatError as exc:
            raise ConfigError(f"bad trace {args.trace}: {exc}") from None
    try:
        return expand(resolve_script(args.script), args.seed, table)
    except (OSError, ScriptError, KeyError, ValueError) as exc:
        raise ConfigError(f"bad script {args.script}: {exc}") from None


def _build_sinks(args) -> list:
    sinks = []
    try:
        if args.out_jsonl:
            sinks.append(JsonlSink(args.out_jsonl))
        if args.out_triples:
            sinks.append(TriplesSink(args.out_triples))
    except OSError as exc:
        for s in sinks:
            s.close()
        raise ConfigError(f"cannot open output: {exc}") from None
    if args.out_tcp:
        try:
            sinks.append(RemoteSink(parse_endpoint(args.out_tcp)))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    if args.out_dot:
        sinks.append(DotSink(args.out_dot))
    return sinks


def cmd_run(args) -> int:
    if not (args.out_jsonl or args.out_tcp or args.out_dot or args.out_triples):
        return _fail_config("select at least one sink (--out-jsonl, --out-tcp, --out-dot, --out-triples)")
    if args.workers < 1 or args.pool < 1:
        return _fail_config("--workers and --pool must be >= 1")
    try:
        table = _load_schema(args.schema)
        config = _load_filter(args.filter)
        manifests = _load_manifests(args.manifests)
        source = _open_source(args, table)
        sinks = _build_sinks(args)
    except ConfigError as exc:
        return _fail_config(str(exc))

    counter = EventCounter() if args.out_figure else None
    store = MappingStore(table, ApiIndex(manifests))
    pipe = Pipeline(table, config, store, sinks + ([counter] if counter else []),
                    worker_count=args.workers, pool_capacity=args.pool)
    stats = pipe.run(source)
    for line in stats.as_lines():
        print(line)
    if counter is not None:
        plot_event_counts(counter.counts, args.out_figure)
    failed = bool(stats.sink_errors or stats.source_error)
    for name, err in sorted(stats.sink_errors.items()):
        print(f"error: sink {name}: {err}", file=sys.stderr)
    if stats.source_error:
        print(f"error: source: {stats.source_error}", file=sys.stderr)
    return EXIT_RUNTIME if failed else EXIT_OK


def cmd_generate(args) -> int:
    try:
        script = resolve_script(args.script)
        if args.count is not None:
            events = generate(script, args.seed, args.rate, args.count)
        else:
            events = expand(script, args.seed)
    except (ConfigError, OSError, ScriptError, KeyError, ValueError) as exc:
        return _fail_config(f"bad script {args.script}: {exc}")
    try:
        n = write_trace(args.out, events)
    except TraceWriteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"frames={n}")
    return EXIT_OK


def cmd_bench(args) -> int:
    if args.rate <= 0 or args.duration <= 0:
        return _fail_config("--rate and --duration must be positive")
    if args.workers < 1:
        return _fail_config("--workers must be >= 1")
    try:
        script = resolve_script(args.script) if args.script else random_script(args.seed, 500)
    except (ConfigError, OSError, ScriptError) as exc:
        return _fail_config(str(exc))
    report = run_bench(script, args.rate, args.duration, args.workers, seed=args.seed)
    for line in report.as_lines():
        print(line)
    throughput, latency = recompute(report.emit_log, report.epoch, report.stats.ingested)
    print(f"offline_throughput={throughput:.1f}")
    for line in latency.as_lines():
        print("offline_" + line)
    if args.emit_log:
        write_emit_log(args.emit_log, report)
    if args.out_figure:
        plot_latency(report.stats.latencies, args.out_figure, report.latency)
    if args.out_rate_figure:
        plot_emission_rate(report.emit_log, report.epoch, args.out_rate_figure)
    return EXIT_OK


def hexdump(data: bytes, indent: str = "  ") -> list[str]:
    lines = []
    for off in range(0, len(data), 16):
        chunk = data[off:off + 16]
        hexpart = " ".join(f"{b:02x}" for b in chunk)
        text = "".join(chr(b) if 32 <= b < 127 else "." for b in chunk)
        lines.append(f"{indent}{off:04x}: {hexpart:<47}  |{text}|")
    return lines


def cmd_inspect(args) -> int:
    try:
        reader = open_trace(args.file)
    except OSError as exc:
        return _fail_config(f"cannot open {args.file}: {exc.strerror or exc}")
    except TraceFormatError as exc:
        return _fail_config(f"bad trace {args.file}: {exc}")
    frames = []
    error = None
    try:
        for ev in reader:
            frames.append(ev)
    except TraceIntegrityError as exc:
        error = exc
    print(f"{len(frames)} frames")
    offset = FILE_HEADER.size
    for i, ev in enumerate(frames):
        print(f"frame {i} offset={offset}")
        print(f"  timestamp={ev.timestamp} provider={ev.provider_id} opcode={ev.opcode} "
              f"pid={ev.pid} tid={ev.tid} size={len(ev.payload)}")
        for line in hexdump(ev.payload):
            print(line)
        offset += FRAME_HEADER.size + len(ev.payload)
    if error is not None:
        print(f"error: {error}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kevtrace", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="parse, enrich and emit a trace or scenario")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--trace", help="recorded trace file")
    src.add_argument("--script", help="scenario script path or built-in name")
    p.add_argument("--schema", help="event schema config (default: bundled kernel schema)")
    p.add_argument("--filter", help="filter config (default: pids 4 and 148)")
    p.add_argument("--manifests", help="directory of module export manifests")
    p.add_argument("--out-jsonl", help="write enriched events as JSON lines")
    p.add_argument("--out-tcp", metavar="HOST:PORT", help="stream framed JSON lines")
    p.add_argument("--out-dot", help="write the provenance graph as DOT")
    p.add_argument("--out-triples", help="write pid/behavior/ppid triples")
    p.add_argument("--out-figure", help="PNG of emitted events by type")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--pool", type=int, default=65536, help="pool capacity in events")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("generate", help="expand a scenario into a trace file")
    p.add_argument("--script", required=True, help="scenario script path or built-in name")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, help="replay the scenario to this many events")
    p.add_argument("--rate", type=float, default=50000.0, help="logical events/s with --count")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("bench", help="live throughput and latency benchmark")
    p.add_argument("--script", help="scenario (default: random mix from --seed)")
    p.add_argument("--rate", type=float, default=50000.0, help="offered events/s")
    p.add_argument("--duration", type=float, default=5.0, help="seconds")
    p.add_argument("--workers", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--emit-log", help="write per-event emission times")
    p.add_argument("--out-figure", help="PNG latency histogram")
    p.add_argument("--out-rate-figure", help="PNG emission rate over time")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("inspect", help="dump trace frames")
    p.add_argument("file")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.CRITICAL,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
