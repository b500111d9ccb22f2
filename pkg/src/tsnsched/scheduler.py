"""Exact offline no-wait scheduler and schedule verifier.

The scheduler assigns every flow a dispatch offset on the tick grid.  Each
hop then starts exactly one frame time plus one inter-frame gap after the
previous hop (no waiting in bridges), and every instance ``k`` repeats the
pattern shifted by ``k * period``.

The objective is the PCP-weighted tardiness of each flow's arrival,
measured from the start of its period, against its deadline.  Branch and
bound over offsets finds the minimum; among equal objectives the
lexicographically smallest offset vector (in search order) wins.

Link occupancy for conflict checks is a frame plus its trailing
inter-frame gap, taken modulo the hyperperiod.
"""
from __future__ import annotations

import bisect
import json
import logging
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .gcl import DEFAULT_OMEGA, GateControlList, GateEvent, port_name
from .model import Datapath, Flow, Topology, derive_datapath, hyperperiod, number_ndps, static_queue

logger = logging.getLogger(__name__)


class Infeasible(Exception):
    """No assignment satisfies the scheduling constraints."""


class BudgetExceeded(Infeasible):
    """The flow set needs more gate entries on some port than allowed."""


@dataclass
class FlowSchedule:
    flow_id: str
    queue: int
    hop_starts: np.ndarray  # (phases, hops) absolute transmission starts in [0, HP)

    def __post_init__(self):
        self.hop_starts = np.asarray(self.hop_starts, dtype=np.int64)
        if self.hop_starts.ndim != 2:
            raise ValueError("hop_starts must be a (phases, hops) array")

    @property
    def offset(self) -> int:
        return int(self.hop_starts[0, 0])

    @property
    def phases(self) -> int:
        return self.hop_starts.shape[0]


@dataclass
class ScheduleAssignment:
    hyperperiod: int
    flows: dict[str, FlowSchedule] = field(default_factory=dict)
    objective_z: int = 0

    def offsets(self) -> dict[str, int]:
        return {fid: fs.offset for fid, fs in self.flows.items()}

    def to_dict(self) -> dict:
        return {
            "hyperperiod_ns": self.hyperperiod,
            "objective_z": self.objective_z,
            "flows": [{"id": fid, "queue": fs.queue, "offset_ns": fs.offset,
                       "hop_starts_ns": fs.hop_starts.tolist()}
                      for fid, fs in sorted(self.flows.items())],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, data: Mapping) -> "ScheduleAssignment":
        flows = {f["id"]: FlowSchedule(f["id"], int(f["queue"]), np.array(f["hop_starts_ns"]))
                 for f in data["flows"]}
        return cls(int(data["hyperperiod_ns"]), flows, int(data.get("objective_z", 0)))


@dataclass(frozen=True)
class Violation:
    constraint: int
    flow: str
    ndp: int | None = None
    ndp_name: str | None = None
    times: tuple = ()
    detail: str = ""


def end_to_end_latency(flow: Flow, hops: int, ifg: int) -> int:
    """No-wait latency: ``hops`` frame times and ``hops - 1`` gaps."""
    return hops * flow.duration + (hops - 1) * ifg


def no_wait_hop_starts(flow: Flow, hops: int, ifg: int, offset: int, hp: int) -> np.ndarray:
    phases = hp // flow.period
    rel = np.arange(hops, dtype=np.int64) * (flow.duration + ifg)
    base = offset + np.arange(phases, dtype=np.int64) * flow.period
    return base[:, None] + rel[None, :]


def tardiness(flow: Flow, hop_starts: np.ndarray) -> int:
    """Weighted tardiness of the latest arrival, measured from the phase start."""
    phases = np.arange(hop_starts.shape[0], dtype=np.int64) * flow.period
    arrival = hop_starts[:, -1] + flow.duration - phases
    return flow.weight * int(max(0, int(arrival.max()) - flow.deadline))


def padded_pieces(start: int, length: int, hp: int) -> list[tuple[int, int]]:
    """Split ``[start, start + length)`` taken modulo ``hp`` into in-range pieces."""
    s = start % hp
    e = s + length
    if e <= hp:
        return [(s, e)]
    return [(s, hp), (0, e - hp)]


class Timeline:
    """Disjoint cyclic occupancy of one link, stored unrolled over [-HP, 2HP)."""

    def __init__(self, hp: int):
        self.hp = hp
        self.starts: list[int] = []
        self.ends: list[int] = []

    def conflict(self, start: int, length: int) -> int | None:
        """End of an occupied interval hit by ``[start, start+length)``, or None.

        The returned end is expressed in the same (unreduced) frame as
        ``start``.
        """
        shift = start - start % self.hp
        s = start - shift
        i = bisect.bisect_right(self.ends, s)
        if i < len(self.starts) and self.starts[i] < s + length:
            return self.ends[i] + shift
        return None

    def add(self, start: int, length: int) -> None:
        s = start % self.hp
        for k in (-1, 0, 1):
            a, b = s + k * self.hp, s + length + k * self.hp
            i = bisect.bisect_left(self.starts, a)
            self.starts.insert(i, a)
            self.ends.insert(i, b)


@dataclass
class _Job:
    flow: Flow
    datapath: Datapath
    latency: int
    hop_rel: np.ndarray
    max_offset: int


def _datapaths(flows: Sequence[Flow], topology: Topology,
               queues: Mapping[str, int] | None) -> dict[str, Datapath]:
    out = {}
    for f in flows:
        q = queues[f.id] if queues and f.id in queues else static_queue(f)
        out[f.id] = derive_datapath(f, topology, q)
    return out


def gate_entry_demand(flows: Sequence[Flow], datapaths: Mapping[str, Datapath], hp: int) -> dict:
    """Gate entries each egress port needs: one per instance of every flow."""
    demand: dict[tuple[str, str], int] = {}
    for f in flows:
        for link in datapaths[f.id].links[1:]:
            demand[link] = demand.get(link, 0) + hp // f.period
    return demand


def search_order(flows: Sequence[Flow], topology: Topology) -> list[Flow]:
    """Descending PCP weight, then ascending slack ``D - h*L``, then id."""
    def key(f):
        h = len(topology.route(f.source, f.destination)) - 1
        return (-f.weight, f.deadline - h * f.duration, f.id)
    return sorted(flows, key=key)


def solve_static(flows: Sequence[Flow], topology: Topology, omega: int = DEFAULT_OMEGA,
                 tick: int | None = None, queues: Mapping[str, int] | None = None,
                 fixed: ScheduleAssignment | None = None,
                 node_limit: int | None = None) -> ScheduleAssignment:
    """Minimum weighted-tardiness no-wait schedule for ``flows``.

    ``fixed`` pins already scheduled flows; they block link time but are
    not moved.  Raises :class:`BudgetExceeded` when a port would need more
    than ``omega`` entries and :class:`Infeasible` when no assignment exists.
    """
    if not flows:
        raise ValueError("no flows")
    tick = int(tick or topology.tick)
    fixed_flows = dict(fixed.flows) if fixed else {}
    hp = hyperperiod(flows)
    if fixed and fixed.hyperperiod != hp:
        raise ValueError("fixed assignment uses a different hyperperiod")
    dps = _datapaths(flows, topology, {**{k: v.queue for k, v in fixed_flows.items()}, **(queues or {})})

    demand = gate_entry_demand(flows, dps, hp)
    over = {port_name(p): n for p, n in demand.items() if n > omega}
    if over:
        raise BudgetExceeded(f"gate entries exceed omega={omega}: {over}")

    flow_by_id = {f.id: f for f in flows}
    timelines: dict[tuple[str, str], Timeline] = {}
    z_fixed = 0
    for fid, fs in fixed_flows.items():
        f, dp = flow_by_id[fid], dps[fid]
        for k in range(fs.phases):
            for h, link in enumerate(dp.links):
                tl = timelines.setdefault(link, Timeline(hp))
                pad = f.duration + topology.ifg(link)
                if tl.conflict(int(fs.hop_starts[k, h]), pad) is not None:
                    raise Infeasible(f"fixed flow {fid} conflicts on {port_name(link)}")
                tl.add(int(fs.hop_starts[k, h]), pad)
        z_fixed += tardiness(f, fs.hop_starts)

    jobs: list[_Job] = []
    for f in search_order([f for f in flows if f.id not in fixed_flows], topology):
        dp = dps[f.id]
        ifg = topology.ifg(dp.links[0])
        lat = end_to_end_latency(f, dp.op_count, ifg)
        if lat > f.deadline:
            raise Infeasible(f"flow {f.id}: latency {lat} ns exceeds deadline {f.deadline} ns")
        if lat > f.period:
            raise Infeasible(f"flow {f.id}: latency {lat} ns exceeds period {f.period} ns")
        hop_rel = np.arange(dp.op_count, dtype=np.int64) * (f.duration + ifg)
        jobs.append(_Job(f, dp, lat, hop_rel, ((f.period - lat) // tick) * tick))

    best: dict = {"z": None, "offsets": None}
    chosen: list[int] = []
    nodes = [0]

    def first_conflict(job: _Job, offset: int) -> int | None:
        """Smallest offset shift that clears one conflict, or None if free."""
        for k in range(f_phases(job)):
            base = offset + k * job.flow.period
            for h, link in enumerate(job.datapath.links):
                tl = timelines.get(link)
                if tl is None:
                    continue
                s = base + int(job.hop_rel[h])
                end = tl.conflict(s, job.flow.duration + topology.ifg(link))
                if end is not None:
                    return end - s
        return None

    def f_phases(job):
        return hp // job.flow.period

    def place(job: _Job, offset: int, add: bool) -> None:
        for k in range(f_phases(job)):
            base = offset + k * job.flow.period
            for h, link in enumerate(job.datapath.links):
                tl = timelines.setdefault(link, Timeline(hp))
                s = base + int(job.hop_rel[h])
                pad = job.flow.duration + topology.ifg(link)
                if add:
                    tl.add(s, pad)
                else:
                    _remove(tl, s, pad)

    def dfs(i: int, z: int) -> None:
        nodes[0] += 1
        if node_limit is not None and nodes[0] > node_limit:
            raise Infeasible("search node limit reached")
        if i == len(jobs):
            if best["z"] is None or z < best["z"]:
                best["z"], best["offsets"] = z, list(chosen)
            return
        job = jobs[i]
        offset = 0
        while offset <= job.max_offset:
            cost = job.flow.weight * max(0, offset + job.latency - job.flow.deadline)
            # tardiness only grows with the offset, so the rest of the range is dominated too
            if best["z"] is not None and z + cost >= best["z"]:
                return
            shift = first_conflict(job, offset)
            if shift is not None:
                offset += -(-shift // tick) * tick
                continue
            place(job, offset, True)
            chosen.append(offset)
            dfs(i + 1, z + cost)
            chosen.pop()
            place(job, offset, False)
            offset += tick

    dfs(0, z_fixed)
    if best["z"] is None:
        raise Infeasible("no conflict-free assignment exists")
    logger.debug("solve_static: %d flows, %d search nodes, z=%d", len(flows), nodes[0], best["z"])

    result = ScheduleAssignment(hp, dict(fixed_flows), best["z"])
    for job, offset in zip(jobs, best["offsets"]):
        ifg = topology.ifg(job.datapath.links[0])
        result.flows[job.flow.id] = FlowSchedule(
            job.flow.id, job.datapath.queue_at(1) if job.datapath.op_count > 1 else static_queue(job.flow),
            no_wait_hop_starts(job.flow, job.datapath.op_count, ifg, offset, hp))
    return result


def _remove(tl: Timeline, start: int, length: int) -> None:
    s = start % tl.hp
    for k in (-1, 0, 1):
        a = s + k * tl.hp
        i = bisect.bisect_left(tl.starts, a)
        while tl.starts[i] != a or tl.ends[i] != a + length:
            i += 1
        del tl.starts[i]
        del tl.ends[i]


def objective(assign: ScheduleAssignment, flows: Iterable[Flow]) -> int:
    by_id = {f.id: f for f in flows}
    return sum(tardiness(by_id[fid], fs.hop_starts) for fid, fs in assign.flows.items())


def schedule_datapaths(assign: ScheduleAssignment, flows: Iterable[Flow],
                       topology: Topology) -> dict[str, Datapath]:
    by_id = {f.id: f for f in flows}
    return {fid: derive_datapath(by_id[fid], topology, fs.queue) for fid, fs in assign.flows.items()}


def verify_schedule(assign: ScheduleAssignment, flows: Iterable[Flow],
                    topology: Topology) -> list[Violation]:
    """Check the four scheduling constraints; returns every violation found.

    1. each hop starts no earlier than the previous hop's frame plus gap,
    2. end-to-end latency of every instance is within the deadline,
    3. the offset is non-negative and each instance fits its period,
    4. no two windows on the same link overlap (frame plus trailing gap).
    """
    flows = list(flows)
    by_id = {f.id: f for f in flows}
    hp = assign.hyperperiod
    out: list[Violation] = []
    dps = {}
    for fid, fs in assign.flows.items():
        if fid not in by_id:
            out.append(Violation(0, fid, detail="flow not in flow set"))
            continue
        dps[fid] = derive_datapath(by_id[fid], topology, fs.queue)
    numbers = number_ndps(dps.values(), topology)

    occupancy: dict[tuple[str, str], list] = {}
    for fid, dp in dps.items():
        f, hs = by_id[fid], assign.flows[fid].hop_starts
        if hs.shape != (hp // f.period, dp.op_count):
            out.append(Violation(0, fid, detail=f"hop_starts shape {hs.shape} does not match datapath"))
            continue
        ifg = topology.ifg(dp.links[0])
        if int(hs[0, 0]) < 0:
            out.append(Violation(3, fid, numbers[dp.ndps[0]], dp.ndps[0].name, (int(hs[0, 0]),),
                                 "negative offset"))
        for k in range(hs.shape[0]):
            lo, hi = k * f.period, (k + 1) * f.period
            first, last = int(hs[k, 0]), int(hs[k, -1]) + f.duration
            if first < lo or last > hi:
                out.append(Violation(3, fid, numbers[dp.ndps[0]], dp.ndps[0].name, (first, last),
                                     f"instance {k} leaves its period [{lo},{hi})"))
            for h in range(1, dp.op_count):
                if hs[k, h] < hs[k, h - 1] + f.duration + ifg:
                    out.append(Violation(1, fid, numbers[dp.ndps[h]], dp.ndps[h].name,
                                         (int(hs[k, h - 1]), int(hs[k, h])),
                                         f"instance {k} hop {h} starts before the previous hop ends"))
            if last - first > f.deadline:
                out.append(Violation(2, fid, numbers[dp.ndps[-1]], dp.ndps[-1].name, (first, last),
                                     f"instance {k} latency {last - first} > deadline {f.deadline}"))
            for h, ndp in enumerate(dp.ndps):
                pad = f.duration + topology.ifg(ndp.link)
                for a, b in padded_pieces(int(hs[k, h]), pad, hp):
                    occupancy.setdefault(ndp.link, []).append((a, b, fid, ndp, k))

    for link, windows in occupancy.items():
        windows.sort(key=lambda w: (w[0], w[1]))
        active = None
        for w in windows:
            if active is not None and w[0] < active[1] and not (w[2] == active[2] and w[4] == active[4]):
                out.append(Violation(4, w[2], numbers[w[3]], w[3].name, (active[0], active[1], w[0], w[1]),
                                     f"overlaps {active[2]} on {port_name(link)}"))
            if active is None or w[1] > active[1]:
                active = w
    return out


def build_gcls(assign: ScheduleAssignment, flows: Iterable[Flow], topology: Topology,
               omega: int = DEFAULT_OMEGA) -> dict[str, GateControlList]:
    """Gate events ``[start, start + L)`` for every bridge hop of every instance."""
    by_id = {f.id: f for f in flows}
    gcls = {port_name(p): GateControlList(p, assign.hyperperiod, omega) for p in topology.egress_ports()}
    for fid in sorted(assign.flows):
        fs, f = assign.flows[fid], by_id[fid]
        dp = derive_datapath(f, topology, fs.queue)
        for k in range(fs.phases):
            for h in range(1, dp.op_count):
                start = int(fs.hop_starts[k, h])
                gcls[port_name(dp.links[h])].insert(
                    GateEvent(start, start + f.duration, dp.queue_at(h), k, fid))
    return gcls
