"""Raw event sources: recorded trace files and the scripted generator."""
from .trace import (
    RawEvent,
    TraceFormatError,
    TraceIntegrityError,
    TraceReader,
    TraceWriteError,
    open_trace,
    write_trace,
)
from .scenario import (
    Action,
    ScenarioScript,
    ScriptError,
    TimedStream,
    builtin_scenarios,
    builtin_script,
    expand,
    format_script,
    generate,
    load_script,
    parse_script,
    random_script,
)

__all__ = [
    "Action", "RawEvent", "ScenarioScript", "ScriptError", "TimedStream",
    "TraceFormatError", "TraceIntegrityError", "TraceReader", "TraceWriteError",
    "builtin_scenarios", "builtin_script", "expand", "format_script", "generate", "load_script", "open_trace",
    "parse_script", "random_script", "write_trace",
]
