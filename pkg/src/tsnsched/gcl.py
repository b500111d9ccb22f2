"""Gate control lists for 802.1Qbv egress ports.

A port's list holds the windows of its scheduled queues only.  Best-effort
windows are implicit: whatever the scheduled queues leave free.  Intervals
are half open, so back-to-back windows are legal.
"""
from __future__ import annotations

import bisect
import csv
import io
from dataclasses import dataclass, field
from typing import Iterable, Mapping

DEFAULT_OMEGA = 128

GCL_CSV_HEADER = ("port", "queue", "phase", "open_ns", "close_ns")


class GclError(ValueError):
    pass


class GateOverlapError(GclError):
    pass


class GclBudgetError(GclError):
    pass


@dataclass(frozen=True, order=True)
class GateEvent:
    open: int
    close: int
    queue: int
    phase: int = 0
    flow_id: str | None = field(default=None, compare=False)

    def overlaps(self, other: "GateEvent") -> bool:
        return self.open < other.close and other.open < self.close


def port_name(port: tuple[str, str] | str) -> str:
    return port if isinstance(port, str) else f"{port[0]}->{port[1]}"


def parse_port(name: str) -> tuple[str, str]:
    a, _, b = name.partition("->")
    if not b:
        raise GclError(f"malformed port name {name!r}")
    return a, b


class GateControlList:
    """Timed gate windows of one egress port, kept sorted by opening time."""

    def __init__(self, port: str, hyperperiod: int, threshold: int = DEFAULT_OMEGA,
                 events: Iterable[GateEvent] = ()):
        if threshold < 1:
            raise ValueError("threshold must be at least 1")
        self.port = port_name(port)
        self.hyperperiod = int(hyperperiod)
        self.threshold = int(threshold)
        self.events: list[GateEvent] = []
        for ev in events:
            self.insert(ev)

    @property
    def length(self) -> int:
        return len(self.events)

    def __len__(self):
        return len(self.events)

    def __iter__(self):
        return iter(self.events)

    def __repr__(self):
        return f"GateControlList({self.port!r}, beta={self.length}/{self.threshold})"

    def copy(self) -> "GateControlList":
        new = GateControlList(self.port, self.hyperperiod, self.threshold)
        new.events = list(self.events)
        return new

    def check(self, ev: GateEvent) -> None:
        if not 0 <= ev.open < ev.close <= self.hyperperiod:
            raise GclError(f"{self.port}: event [{ev.open},{ev.close}) outside [0,{self.hyperperiod})")
        if self.length + 1 > self.threshold:
            raise GclBudgetError(f"{self.port}: GCL full ({self.threshold} entries)")
        i = bisect.bisect_left(self.events, ev)
        for j in (i - 1, i):
            if 0 <= j < len(self.events) and self.events[j].overlaps(ev):
                other = self.events[j]
                raise GateOverlapError(
                    f"{self.port}: [{ev.open},{ev.close}) overlaps [{other.open},{other.close})")

    def insert(self, ev: GateEvent) -> "GateControlList":
        self.check(ev)
        bisect.insort(self.events, ev)
        return self

    def remove_flow(self, flow_id: str) -> int:
        before = len(self.events)
        self.events = [e for e in self.events if e.flow_id != flow_id]
        return before - len(self.events)


def insert_gate_event(gcl: GateControlList, ev: GateEvent) -> GateControlList:
    return gcl.insert(ev)


def be_gaps(events: GateControlList | Iterable[GateEvent], hyperperiod: int) -> list[tuple[int, int]]:
    """Windows of [0, HP) left free by the scheduled queues."""
    gaps, cursor = [], 0
    for ev in sorted(events, key=lambda e: (e.open, e.close)):
        if ev.open > cursor:
            gaps.append((cursor, ev.open))
        cursor = max(cursor, ev.close)
    if cursor < hyperperiod:
        gaps.append((cursor, hyperperiod))
    return gaps


def export_gcl(gcls: Mapping[str, GateControlList] | Iterable[GateControlList]) -> str:
    """Render GCLs as CSV rows ``port,queue,phase,open_ns,close_ns``."""
    lists = gcls.values() if isinstance(gcls, Mapping) else gcls
    rows = [(g.port, ev.open, ev.queue, ev.phase, ev.close) for g in lists for ev in g.events]
    rows.sort()
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(GCL_CSV_HEADER)
    for port, open_, queue, phase, close in rows:
        writer.writerow([port, queue, phase, open_, close])
    return out.getvalue()


def load_gcl(text: str, hyperperiod: int, threshold: int = DEFAULT_OMEGA) -> dict[str, GateControlList]:
    gcls: dict[str, GateControlList] = {}
    reader = csv.DictReader(io.StringIO(text))
    for line, row in enumerate(reader, start=2):
        try:
            ev = GateEvent(int(row["open_ns"]), int(row["close_ns"]), int(row["queue"]), int(row["phase"]))
            port = row["port"]
            parse_port(port)
        except (KeyError, TypeError, ValueError) as exc:
            raise GclError(f"line {line}: {exc}") from None
        gcl = gcls.setdefault(port, GateControlList(port, hyperperiod, threshold))
        gcl.insert(ev)
    return gcls


def total_length(gcls: Mapping[str, GateControlList]) -> int:
    """The binding GCL length: the fullest port."""
    return max((g.length for g in gcls.values()), default=0)
