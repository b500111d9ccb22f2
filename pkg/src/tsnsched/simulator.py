"""Deterministic discrete-event simulation of gate-controlled TSN forwarding.

Frames are dispatched by talkers at their offsets, forwarded store-and-forward
(transmission delay only) and leave each bridge port through one of four
FIFO queues.  A scheduled queue transmits only inside its own gate windows
and only if the frame ends before the window closes.  Best-effort frames use
the time between scheduled windows and keep a guard band before the next
scheduled window.  Consecutive frames on a link are separated by one
inter-frame gap.
"""
from __future__ import annotations

import bisect
import csv
import heapq
import io
import json
import math
from collections import deque
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterable, Mapping

import numpy as np

from .gcl import GateControlList, GateEvent, GclError, be_gaps, port_name
from .model import BE_QUEUE, NUM_QUEUES, Datapath, Flow, Topology, hyperperiod, queue_vertex, transmission_duration

INF = math.inf


class EventKind(IntEnum):
    DISPATCH = 0
    ARRIVE = 1
    GATE_OPEN = 2
    TX_COMPLETE = 3
    CONFIG_UPDATE = 4


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SimFlow:
    flow: Flow
    datapath: Datapath
    offset: int


@dataclass(frozen=True)
class BeLoad:
    """Poisson best-effort background traffic injected at every bridge port."""

    frames_per_hp: float = 0.0
    min_size: int = 64
    max_size: int = 1500


@dataclass
class FlowStats:
    latencies: list[int] = field(default_factory=list)
    dispatched: int = 0
    delivered: int = 0
    dropped: int = 0
    in_flight: int = 0
    max_wait: int = 0

    @property
    def jitter(self) -> tuple[float, float]:
        return jitter_stats(self.latencies) if self.latencies else (0.0, 0.0)


@dataclass
class QueueStats:
    contained: int = 0
    dropped: int = 0


@dataclass
class SimMetrics:
    horizon: int
    flows: dict[str, FlowStats] = field(default_factory=dict)
    queues: dict[str, QueueStats] = field(default_factory=dict)
    be_delivered: int = 0
    be_dropped: int = 0

    @property
    def contained(self) -> int:
        return sum(q.contained for q in self.queues.values())

    @property
    def dropped(self) -> int:
        return sum(q.dropped for q in self.queues.values())

    def mean_latency(self) -> float:
        means = [np.mean(s.latencies) for s in self.flows.values() if s.latencies]
        return float(np.mean(means)) if means else 0.0

    def mean_jitter_std(self) -> float:
        stds = [s.jitter[1] for s in self.flows.values() if s.latencies]
        return float(np.mean(stds)) if stds else 0.0

    def to_dict(self) -> dict:
        flows = {}
        for fid, s in sorted(self.flows.items()):
            mu, sigma = s.jitter
            flows[fid] = {"latencies_ns": list(s.latencies), "mean_latency_ns": mu, "jitter_std_ns": sigma,
                          "dispatched": s.dispatched, "delivered": s.delivered, "dropped": s.dropped,
                          "in_flight": s.in_flight, "max_wait_ns": s.max_wait}
        queues = {q: {"flows_contained": s.contained, "flows_dropped": s.dropped}
                  for q, s in sorted(self.queues.items())}
        return {"horizon_ns": self.horizon, "flows": flows, "queues": queues,
                "be_delivered": self.be_delivered, "be_dropped": self.be_dropped}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def jitter_stats(latencies: Iterable[float]) -> tuple[float, float]:
    """Mean and population standard deviation of per-instance latencies."""
    arr = np.asarray(list(latencies), dtype=np.float64)
    if arr.size == 0:
        raise ValueError("jitter of an empty latency list is undefined")
    return float(arr.mean()), float(arr.std())


class _Frame:
    __slots__ = ("flow_id", "instance", "release", "phase_end", "hop", "duration",
                 "arrived", "datapath", "be", "version")

    def __init__(self, flow_id, instance, release, phase_end, duration, datapath, be=False, version=0):
        self.flow_id = flow_id
        self.instance = instance
        self.release = release
        self.phase_end = phase_end
        self.duration = duration
        self.datapath = datapath
        self.hop = 0
        self.arrived = release
        self.be = be
        self.version = version


class _Port:
    def __init__(self, link: tuple[str, str], gated: bool, ifg: int, hp: int):
        self.link = link
        self.name = port_name(link)
        self.gated = gated
        self.ifg = ifg
        self.hp = hp
        self.queues = [deque() for _ in range(NUM_QUEUES)]
        self.busy_until = -1
        self.wakes: set[int] = set()
        self.set_windows([])

    def set_windows(self, events: Iterable[GateEvent]) -> None:
        evs = sorted(events, key=lambda e: e.open)
        self.opens = [e.open for e in evs]
        self.closes = [e.close for e in evs]
        self.wqueue = [e.queue for e in evs]
        self.by_queue = {}
        for e in evs:
            opens, closes = self.by_queue.setdefault(e.queue, ([], []))
            opens.append(e.open)
            closes.append(e.close)
        gaps = be_gaps(evs, self.hp)
        if gaps and gaps[0][0] == 0 and gaps[-1][1] == self.hp and len(gaps) > 1:
            wrapped = gaps[-1][1] - gaps[-1][0] + gaps[0][1]
            self.max_gap = max([wrapped] + [b - a for a, b in gaps])
        else:
            self.max_gap = max((b - a for a, b in gaps), default=0)

    def window_at(self, t: int):
        base, r = divmod(t, self.hp)
        i = bisect.bisect_right(self.opens, r) - 1
        if i >= 0 and r < self.closes[i]:
            off = base * self.hp
            return off + self.opens[i], off + self.closes[i], self.wqueue[i]
        return None

    def next_open(self, t: int, queue: int | None = None) -> float:
        """First window opening strictly after ``t``."""
        opens = self.opens if queue is None else self.by_queue.get(queue, ([], []))[0]
        if not opens:
            return INF
        base, r = divmod(t, self.hp)
        i = bisect.bisect_right(opens, r)
        if i < len(opens):
            return base * self.hp + opens[i]
        return (base + 1) * self.hp + opens[0]

    def next_close(self, t: int) -> float:
        if not self.closes:
            return INF
        base, r = divmod(t, self.hp)
        closes = self.closes
        i = bisect.bisect_right(closes, r)
        if i < len(closes):
            return base * self.hp + closes[i]
        return (base + 1) * self.hp + closes[0]

    def waiting(self) -> bool:
        return any(self.queues)


class Simulator:
    """One simulation instance; strictly single threaded."""

    def __init__(self, topology: Topology, flows: Iterable[SimFlow],
                 gcls: Mapping[str, GateControlList], hp: int | None = None,
                 be_load: BeLoad | None = None, seed: int = 0, queue_capacity: int = 16,
                 guard_band: int | None = None, trace: bool = False, check_gates: bool = True):
        flows = list(flows)
        self.topology = topology
        self.hp = int(hp or (hyperperiod([sf.flow for sf in flows]) if flows else
                             next(iter(gcls.values())).hyperperiod))
        self.queue_capacity = queue_capacity
        self.guard_band = transmission_duration(64, topology.default_rate) + topology.ifg() \
            if guard_band is None else guard_band
        self.check_gates = check_gates
        self.now = 0
        self.started = False
        self._heap: list = []
        self._seq = 0
        self.trace_rows: list[tuple] | None = [] if trace else None

        self.gcls = {name: g.copy() for name, g in gcls.items()}
        self.ports: dict[tuple[str, str], _Port] = {}
        for link in topology.links:
            self.ports[link] = _Port(link, link[0] in topology.bridges, topology.ifg(link), self.hp)
        for name, g in self.gcls.items():
            link = self._link(name)
            self.ports[link].set_windows(g.events)

        self.flows: dict[str, SimFlow] = {}
        self.versions: dict[str, int] = {}
        self.stats: dict[str, FlowStats] = {}
        self.queue_stats = {queue_vertex(b, q): QueueStats() for b in topology.bridges for q in range(NUM_QUEUES)}
        self.be_delivered = 0
        self.be_dropped = 0
        self._pending: list[tuple[int, dict, dict]] = []
        for sf in flows:
            self._activate_flow(sf, 0)

        self.be_load = be_load or BeLoad()
        self.rng = np.random.default_rng(seed)
        self._be_next: dict[tuple[str, str], float] = {}
        if self.be_load.frames_per_hp > 0:
            for link in sorted(self.ports):
                if self.ports[link].gated:
                    self._schedule_be(link, 0)

    def _link(self, name: str) -> tuple[str, str]:
        a, _, b = name.partition("->")
        if (a, b) not in self.ports:
            raise SimulationError(f"GCL references unknown port {name!r}")
        return (a, b)

    def _push(self, time, kind, key, payload):
        self._seq += 1
        heapq.heappush(self._heap, (time, int(kind), key, self._seq, payload))

    def _log(self, time, kind, frame, port, detail=""):
        if self.trace_rows is not None:
            self.trace_rows.append((time, kind.name, frame.flow_id if frame else "",
                                    frame.instance if frame else "", port, detail))

    # -- configuration -------------------------------------------------

    def _activate_flow(self, sf: SimFlow, at: int) -> None:
        fid = sf.flow.id
        self.flows[fid] = sf
        self.versions[fid] = self.versions.get(fid, -1) + 1
        self.stats.setdefault(fid, FlowStats())
        period = sf.flow.period
        first = (at // period) * period + sf.offset
        if first < at:
            first += period
        self._push(first, EventKind.DISPATCH, fid, (fid, self.versions[fid]))

    def _schedule_be(self, link, after):
        mean_gap = self.hp / self.be_load.frames_per_hp
        t = after + self.rng.exponential(mean_gap)
        size = int(self.rng.integers(self.be_load.min_size, self.be_load.max_size + 1))
        self._push(int(math.ceil(t)), EventKind.ARRIVE, "~be", (link, size))

    def boundary_for_update(self) -> int:
        if self.now % self.hp == 0 and not self.started:
            return self.now
        return (self.now // self.hp + 1) * self.hp

    def apply_runtime_update(self, gcl_delta: Mapping[str, Iterable[GateEvent]] | None = None,
                             offset_delta: Mapping[str, SimFlow | int] | None = None) -> int:
        """Stage new gate events and flow offsets for the next hyperperiod boundary.

        The whole delta is validated against the current lists first; on an
        overlap nothing is applied.  Returns the activation time.
        """
        gcl_delta = {k: list(v) for k, v in (gcl_delta or {}).items() if list(v)}
        offset_delta = dict(offset_delta or {})
        if not gcl_delta and not offset_delta:
            return self.now
        staged = {name: g.copy() for name, g in self.gcls.items()}
        for _, gd, _ in self._pending:
            staged.update(gd)
        for name, events in gcl_delta.items():
            if name not in staged:
                link = self._link(name)
                staged[name] = GateControlList(link, self.hp, next(iter(self.gcls.values())).threshold
                                               if self.gcls else 128)
            for ev in events:
                staged[name].insert(ev)  # raises before anything is committed
        flows = {}
        for fid, value in offset_delta.items():
            if isinstance(value, SimFlow):
                flows[fid] = value
            elif fid in self.flows:
                old = self.flows[fid]
                flows[fid] = SimFlow(old.flow, old.datapath, int(value))
            else:
                raise SimulationError(f"offset update for unknown flow {fid!r}")
        changed = {name: staged[name] for name in gcl_delta}
        at = self.boundary_for_update()
        if at == self.now and not self.started:
            self._apply(changed, flows)
        else:
            self._pending.append((at, changed, flows))
            self._push(at, EventKind.CONFIG_UPDATE, "", None)
        return at

    def _apply(self, gcls: dict, flows: dict) -> None:
        for name, g in gcls.items():
            self.gcls[name] = g
            self.ports[self._link(name)].set_windows(g.events)
        for sf in flows.values():
            self._activate_flow(sf, self.now)

    # -- main loop -----------------------------------------------------

    def run_until(self, t_end: int) -> None:
        self.started = True
        heap = self._heap
        while heap and heap[0][0] <= t_end:
            while self._pending and self._pending[0][0] <= heap[0][0]:
                at, gcls, flows = self._pending.pop(0)
                self.now = at
                self._apply(gcls, flows)
            time, kind, key, _, payload = heapq.heappop(heap)
            self.now = time
            if kind == EventKind.DISPATCH:
                self._on_dispatch(time, payload)
            elif kind == EventKind.ARRIVE:
                if key == "~be":
                    self._on_be_arrival(time, *payload)
                else:
                    self._on_arrive(time, *payload)
            elif kind == EventKind.GATE_OPEN:
                port = self.ports[payload]
                port.wakes.discard(time)
                self._try_transmit(port, time)
            elif kind == EventKind.TX_COMPLETE:
                self._on_complete(time, *payload)
        self.now = max(self.now, t_end)

    def _on_dispatch(self, t, payload):
        fid, version = payload
        if version != self.versions[fid]:
            return
        sf = self.flows[fid]
        f = sf.flow
        phase_start = (t // f.period) * f.period
        frame = _Frame(fid, t // f.period, t, phase_start + f.period, f.duration, sf.datapath, version=version)
        self.stats[fid].dispatched += 1
        self._push(t + f.period, EventKind.DISPATCH, fid, (fid, version))
        self._log(t, EventKind.DISPATCH, frame, port_name(sf.datapath.links[0]))
        port = self.ports[sf.datapath.links[0]]
        port.queues[0].append(frame)
        self._try_transmit(port, t)

    def _on_be_arrival(self, t, link, size):
        port = self.ports[link]
        self._schedule_be(link, t)
        duration = transmission_duration(size, self.topology.rate(link))
        qv = queue_vertex(link[0], BE_QUEUE)
        if len(port.queues[BE_QUEUE]) >= self.queue_capacity or duration + port.ifg + self.guard_band > port.max_gap:
            self.queue_stats[qv].dropped += 1
            self.be_dropped += 1
            return
        port.queues[BE_QUEUE].append(_Frame("~be", -1, t, INF, duration, None, be=True))
        self._try_transmit(port, t)

    def _on_arrive(self, t, link, frame):
        port = self.ports[link]
        frame.hop += 1
        frame.arrived = t
        self._log(t, EventKind.ARRIVE, frame, port.name)
        port.queues[frame.datapath.queue_at(frame.hop)].append(frame)
        self._try_transmit(port, t)

    def _on_complete(self, t, link, frame):
        self._log(t, EventKind.TX_COMPLETE, frame, port_name(link))
        port = self.ports[link]
        if port.gated:
            q = BE_QUEUE if frame.be else frame.datapath.queue_at(frame.hop)
            self.queue_stats[queue_vertex(link[0], q)].contained += 1
        if frame.be:
            self.be_delivered += 1
            return
        dp = frame.datapath
        if frame.hop + 1 < dp.op_count:
            self._push(t, EventKind.ARRIVE, frame.flow_id, (dp.links[frame.hop + 1], frame))
        else:
            st = self.stats[frame.flow_id]
            st.delivered += 1
            st.latencies.append(t - frame.release)

    def _wake(self, port: _Port, t) -> None:
        if t == INF or t in port.wakes:
            return
        port.wakes.add(t)
        self._push(t, EventKind.GATE_OPEN, "", port.link)

    def _drop(self, port: _Port, queue: int, frame: _Frame) -> None:
        if port.gated:
            self.queue_stats[queue_vertex(port.link[0], queue)].dropped += 1
        self.stats[frame.flow_id].dropped += 1
        self._log(self.now, EventKind.GATE_OPEN, frame, port.name, "drop")

    def _start(self, port: _Port, queue: int, t: int, window=None) -> None:
        frame = port.queues[queue].popleft()
        end = t + frame.duration
        if self.check_gates and port.gated and not frame.be:
            if window is None or window[2] != queue or not (window[0] <= t and end <= window[1]):
                raise SimulationError(f"{frame.flow_id} transmits outside its gate on {port.name} at {t}")
        if not frame.be and frame.hop > 0:
            st = self.stats[frame.flow_id]
            st.max_wait = max(st.max_wait, t - frame.arrived - port.ifg)
        port.busy_until = end + port.ifg
        self._push(end, EventKind.TX_COMPLETE, frame.flow_id, (port.link, frame))
        if port.waiting():
            self._wake(port, port.busy_until)

    def _try_transmit(self, port: _Port, t: int) -> None:
        if port.busy_until > t:
            self._wake(port, port.busy_until)
            return
        if not port.gated:
            q = port.queues[0]
            while q and t + q[0].duration > q[0].phase_end:
                self._drop(port, 0, q.popleft())
            if q:
                self._start(port, 0, t)
            return
        window = port.window_at(t)
        if window is not None:
            o, c, qid = window
            q = port.queues[qid]
            while q and t + q[0].duration > q[0].phase_end:
                self._drop(port, qid, q.popleft())
            if q and t + q[0].duration <= c:
                self._start(port, qid, t, window)
                return
        else:
            nxt = port.next_open(t)
            q = port.queues[BE_QUEUE]
            if q and t + q[0].duration + port.ifg <= nxt and t + self.guard_band <= nxt:
                self._start(port, BE_QUEUE, t)
                return
        wake = INF
        for qid in range(1, NUM_QUEUES):
            if port.queues[qid]:
                wake = min(wake, port.next_open(t, qid))
        if port.queues[BE_QUEUE]:
            wake = min(wake, port.next_close(t))
        self._wake(port, wake)

    # -- results -------------------------------------------------------

    def metrics(self) -> SimMetrics:
        out = SimMetrics(horizon=self.now)
        out.queues = {k: QueueStats(v.contained, v.dropped) for k, v in self.queue_stats.items()}
        expired: dict[str, int] = {}
        # frames still queued after their phase ended count as dropped
        for port in self.ports.values():
            for qid, q in enumerate(port.queues):
                for fr in q:
                    if not fr.be and fr.phase_end <= self.now:
                        expired[fr.flow_id] = expired.get(fr.flow_id, 0) + 1
                        if port.gated:
                            out.queues[queue_vertex(port.link[0], qid)].dropped += 1
        for fid, st in self.stats.items():
            copy = FlowStats(list(st.latencies), st.dispatched, st.delivered, st.dropped + expired.get(fid, 0),
                             0, st.max_wait)
            copy.in_flight = copy.dispatched - copy.delivered - copy.dropped
            out.flows[fid] = copy
        out.be_delivered, out.be_dropped = self.be_delivered, self.be_dropped
        return out

    def trace_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(("time_ns", "kind", "flow", "instance", "port", "detail"))
        writer.writerows(self.trace_rows or [])
        return buf.getvalue()


def run(topology: Topology, gcls: Mapping[str, GateControlList], flows: Iterable[SimFlow],
        horizon: int = 10, be_load: BeLoad | None = None, seed: int = 0,
        hp: int | None = None, **kwargs) -> SimMetrics:
    """Simulate ``horizon`` hyperperiods and return the collected metrics."""
    if horizon < 1:
        raise ValueError("horizon must be at least one hyperperiod")
    sim = Simulator(topology, flows, gcls, hp=hp, be_load=be_load, seed=seed, **kwargs)
    sim.run_until(horizon * sim.hp)
    return sim.metrics()


def parse_offsets(text: str) -> dict[str, dict]:
    """Dispatch offsets JSON: ``{"flow": offset}`` or ``{"flow": {"offset_ns":.., "queue":..}}``."""
    data = json.loads(text)
    if "flows" in data and isinstance(data["flows"], list):
        return {f["id"]: {"offset_ns": int(f["offset_ns"]), "queue": f.get("queue")} for f in data["flows"]}
    out = {}
    for fid, v in data.items():
        out[fid] = {"offset_ns": int(v), "queue": None} if not isinstance(v, dict) else \
            {"offset_ns": int(v["offset_ns"]), "queue": v.get("queue")}
    return out
