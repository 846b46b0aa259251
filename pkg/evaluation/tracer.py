"""
Run traces.

A trace is a JSON record of one pipeline run (corpus build, training,
evaluation, benchmark): what happened, when, with which payload and how long
it took. It is saved next to the run's artifacts.

Usage:
    tracer = RunTracer("20240101_120000_seed7")
    tracer.log_event(EventType.RUN_START, {"command": "train"})
    with tracer.phase("phase1", steps=2000):
        ...
    tracer.save_trace("runs/.../trace.json")
"""

import json
import os
import time
from contextlib import contextmanager
from dataclasses import dataclass
from datetime import datetime
from enum import Enum
from typing import Any, Dict, List

from core.serialization import atomic_write_text


class EventType(Enum):
    """Types of events in a run trace"""
    RUN_START = "run_start"
    PHASE_START = "phase_start"
    PHASE_END = "phase_end"
    CHECKPOINT = "checkpoint"
    EVAL = "eval"
    BENCH = "bench"
    ERROR = "error"
    RUN_END = "run_end"


@dataclass
class TraceEvent:
    """A single event in the run trace"""
    timestamp: str
    event_type: EventType
    data: Dict[str, Any]
    duration_ms: float = 0.0

    def to_dict(self):
        return {
            "timestamp": self.timestamp,
            "event_type": self.event_type.value,
            "data": self.data,
            "duration_ms": self.duration_ms
        }


def tracing_enabled(default: bool = False) -> bool:
    value = os.getenv("ENABLE_TRACE")
    if value is None:
        return default
    return value.lower() == "true"


class RunTracer:
    def __init__(self, run_id: str):
        self.run_id = run_id
        self.events: List[TraceEvent] = []
        self.start_time = datetime.now()

    def log_event(self, event_type: EventType, data: Dict[str, Any], duration_ms: float = 0.0):
        """Log a single event in the trace"""
        event = TraceEvent(
            timestamp=datetime.now().isoformat(),
            event_type=event_type,
            data=data,
            duration_ms=duration_ms
        )
        self.events.append(event)

    @contextmanager
    def phase(self, name: str, **data):
        """PHASE_START on entry, PHASE_END (or ERROR) with the elapsed time on exit."""
        self.log_event(EventType.PHASE_START, {"phase": name, **data})
        started = time.perf_counter()
        try:
            yield
        except Exception as exc:
            self.log_event(EventType.ERROR, {"phase": name, "error": str(exc)},
                           duration_ms=(time.perf_counter() - started) * 1000)
            raise
        self.log_event(EventType.PHASE_END, {"phase": name}, duration_ms=(time.perf_counter() - started) * 1000)

    def get_trace(self) -> List[Dict]:
        """Get the full trace as a list of dictionaries"""
        return [event.to_dict() for event in self.events]

    def event_types(self) -> List[str]:
        return [event.event_type.value for event in self.events]

    def save_trace(self, filepath: str):
        trace_data = {
            "run_id": self.run_id,
            "start_time": self.start_time.isoformat(),
            "duration_ms": (datetime.now() - self.start_time).total_seconds() * 1000,
            "events": self.get_trace()
        }
        atomic_write_text(filepath, json.dumps(trace_data, indent=2, default=str))

    def render(self) -> str:
        """Human-readable trace, long values truncated."""
        lines = ["=" * 80, f"RUN TRACE - {self.run_id}", "=" * 80]
        for i, event in enumerate(self.events, 1):
            lines.append(f"[{i}] {event.timestamp} {event.event_type.value}")
            if event.duration_ms > 0:
                lines.append(f"    Duration: {event.duration_ms:.2f}ms")
            for key, value in event.data.items():
                value_str = str(value)
                if len(value_str) > 100:
                    value_str = value_str[:100] + "..."
                lines.append(f"    {key}: {value_str}")
        lines.append("=" * 80)
        return "\n".join(lines)
