"""Typed model of a TSN network: end systems, bridge queues, flows and datapaths.

All times are integer nanoseconds.  Bridges are expanded into four queue
vertices (``BR1.Q0`` .. ``BR1.Q3``); queue 0 is best effort, queue 1 is held
in reserve for dynamically admitted flows, queue 2 carries AVB and queue 3
carries time-triggered traffic.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

MTU_BYTES = 1500
DEFAULT_RATE_BPS = 1_000_000_000
DEFAULT_TICK_NS = 10
IFG_BYTES = 12

NUM_QUEUES = 4
BE_QUEUE = 0
RESERVED_QUEUE = 1
AVB_QUEUE = 2
TT_QUEUE = 3

FLOW_CSV_HEADER = ("id", "kind", "src", "dst", "size_bytes", "period_ns", "deadline_ns", "pcp")


class TopologyError(ValueError):
    """Raised for malformed topology descriptions or missing routes."""


class FlowFileError(ValueError):
    """Raised when a flows CSV cannot be parsed; carries the offending line."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class FlowKind(str, Enum):
    TT = "TT"
    AVB = "AVB"
    BE = "BE"


class NodeKind(str, Enum):
    TALKER = "talker"
    LISTENER = "listener"
    BRIDGE_QUEUE = "queue"


def transmission_duration(size: int, rate: int = DEFAULT_RATE_BPS) -> int:
    """Time in ns to serialize ``size`` bytes at ``rate`` bit/s, rounded up."""
    if size <= 0 or rate <= 0:
        raise ValueError("size and rate must be positive")
    return -(-int(size) * 8 * 1_000_000_000 // int(rate))


def hyperperiod(flows: Iterable["Flow"] | Iterable[int]) -> int:
    """Least common multiple of the flow periods."""
    periods = [f if isinstance(f, (int, np.integer)) else f.period for f in flows]
    if not periods:
        raise ValueError("hyperperiod of an empty flow set is undefined")
    if any(p <= 0 for p in periods):
        raise ValueError("periods must be positive")
    return math.lcm(*(int(p) for p in periods))


@dataclass(frozen=True)
class Flow:
    id: str
    kind: FlowKind
    source: str
    destination: str
    size: int
    period: int
    deadline: int
    duration: int
    weight: int = 0
    offset: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", FlowKind(self.kind))
        if self.period <= 0 or self.deadline <= 0 or self.duration <= 0:
            raise ValueError(f"flow {self.id}: period, deadline and duration must be positive")
        if not 0 < self.size <= MTU_BYTES:
            raise ValueError(f"flow {self.id}: size {self.size} outside (0, {MTU_BYTES}]")
        if not 0 <= self.weight <= 7:
            raise ValueError(f"flow {self.id}: pcp weight {self.weight} outside [0, 7]")
        if self.offset is not None and (self.offset < 0 or self.offset + self.duration > self.period):
            raise ValueError(f"flow {self.id}: offset {self.offset} does not fit its period")

    @property
    def scheduled(self) -> bool:
        return self.kind is not FlowKind.BE


@dataclass(frozen=True)
class Node:
    id: str
    kind: NodeKind
    switch_id: str | None = None
    queue_id: int | None = None
    scheduled: bool = False
    preemptive: bool = False


@dataclass(frozen=True, order=True)
class NDP:
    """A link plus the queue vertex feeding it (``None`` on talker links)."""

    src: str
    dst: str
    queue: int | None = None

    @property
    def link(self) -> tuple[str, str]:
        return (self.src, self.dst)

    @property
    def name(self) -> str:
        head = self.src if self.queue is None else f"{self.src}.Q{self.queue}"
        return f"[{head},{self.dst}]"


@dataclass(frozen=True)
class Datapath:
    flow_id: str
    ndps: tuple[NDP, ...]

    @property
    def op_count(self) -> int:
        return len(self.ndps)

    @property
    def links(self) -> list[tuple[str, str]]:
        return [n.link for n in self.ndps]

    @property
    def bridges(self) -> list[str]:
        return [n.src for n in self.ndps[1:]]

    @property
    def route(self) -> list[str]:
        return [self.ndps[0].src] + [n.dst for n in self.ndps]

    def queue_at(self, hop: int) -> int | None:
        return self.ndps[hop].queue


def queue_vertex(bridge: str, queue: int) -> str:
    return f"{bridge}.Q{queue}"


@dataclass
class Topology:
    talkers: list[str]
    listeners: list[str]
    bridges: list[str]
    links: dict[tuple[str, str], int]
    routes: dict[tuple[str, str], tuple[str, ...]]
    nodes: list[Node]
    adjacency: np.ndarray
    tick: int = DEFAULT_TICK_NS
    ifg_bytes: int = IFG_BYTES
    link_order: dict[tuple[str, str], int] = field(default_factory=dict)

    def __post_init__(self):
        self.node_index = {n.id: i for i, n in enumerate(self.nodes)}

    @property
    def bridge_count(self) -> int:
        return len(self.bridges)

    def kind_of(self, node_id: str) -> str:
        if node_id in self.talkers:
            return "talker"
        if node_id in self.listeners:
            return "listener"
        if node_id in self.bridges:
            return "bridge"
        raise TopologyError(f"unknown node {node_id!r}")

    def rate(self, link: tuple[str, str]) -> int:
        try:
            return self.links[link]
        except KeyError:
            raise TopologyError(f"no link {link[0]} -> {link[1]}") from None

    def ifg(self, link: tuple[str, str] | None = None) -> int:
        rate = self.rate(link) if link is not None else self.default_rate
        return transmission_duration(self.ifg_bytes, rate) if self.ifg_bytes else 0

    @property
    def default_rate(self) -> int:
        return next(iter(self.links.values()), DEFAULT_RATE_BPS)

    def route(self, src: str, dst: str) -> tuple[str, ...]:
        try:
            return self.routes[(src, dst)]
        except KeyError:
            raise TopologyError(f"no route from {src} to {dst}") from None

    def egress_ports(self) -> list[tuple[str, str]]:
        """Directed bridge egress links, in topology order."""
        return sorted((l for l in self.links if l[0] in self.bridges), key=self.link_order.get)

    def flow(self, id: str, kind: str | FlowKind, src: str, dst: str, size: int,
             period: int, deadline: int, pcp: int = 0, offset: int | None = None) -> Flow:
        """Build a flow whose duration follows from the first link of its route."""
        path = self.route(src, dst)
        duration = transmission_duration(size, self.rate((path[0], path[1])))
        return Flow(id=id, kind=FlowKind(kind), source=src, destination=dst, size=int(size),
                    period=int(period), deadline=int(deadline), duration=duration,
                    weight=int(pcp), offset=offset)

    def signature(self) -> dict:
        return {"bridges": len(self.bridges), "talkers": len(self.talkers),
                "listeners": len(self.listeners), "nodes": len(self.nodes)}


def _link_endpoints(link: Mapping) -> tuple[str, str]:
    a = link.get("a", link.get("src"))
    b = link.get("b", link.get("dst"))
    if a is None or b is None:
        raise TopologyError(f"link {link!r} needs two endpoints")
    return str(a), str(b)


def build_topology(spec: Mapping) -> Topology:
    """Build a :class:`Topology` from a parsed ``{nodes, links, routes}`` mapping.

    Links are full duplex: each entry creates both directions.  Every bridge
    is expanded into four queue vertices and the adjacency matrix connects
    the sender side of each directed link to the receiver side.
    """
    talkers, listeners, bridges = [], [], []
    seen = set()
    for entry in spec.get("nodes", []):
        nid, kind = str(entry["id"]), str(entry["kind"]).lower()
        if nid in seen:
            raise TopologyError(f"duplicate node id {nid!r}")
        seen.add(nid)
        if kind in ("talker", "tk"):
            talkers.append(nid)
        elif kind in ("listener", "lr"):
            listeners.append(nid)
        elif kind in ("bridge", "switch", "br"):
            bridges.append(nid)
        else:
            raise TopologyError(f"node {nid!r} has unknown kind {kind!r}")

    default_rate = int(spec.get("rate_bps", DEFAULT_RATE_BPS))
    links: dict[tuple[str, str], int] = {}
    link_order: dict[tuple[str, str], int] = {}
    for i, entry in enumerate(spec.get("links", [])):
        a, b = _link_endpoints(entry)
        for end in (a, b):
            if end not in seen:
                raise TopologyError(f"link {a}-{b} references unknown node {end!r}")
        if a == b:
            raise TopologyError(f"self loop on {a!r}")
        if (a, b) in links:
            raise TopologyError(f"duplicate link {a}-{b}")
        rate = int(entry.get("rate_bps", default_rate))
        if rate <= 0:
            raise TopologyError(f"link {a}-{b} has non-positive rate")
        links[(a, b)] = links[(b, a)] = rate
        link_order[(a, b)] = 2 * i
        link_order[(b, a)] = 2 * i + 1

    nodes = [Node(t, NodeKind.TALKER) for t in talkers]
    nodes += [Node(l, NodeKind.LISTENER) for l in listeners]
    for br in bridges:
        for q in range(NUM_QUEUES):
            nodes.append(Node(queue_vertex(br, q), NodeKind.BRIDGE_QUEUE, switch_id=br,
                              queue_id=q, scheduled=q != BE_QUEUE, preemptive=q == BE_QUEUE))
    index = {n.id: i for i, n in enumerate(nodes)}
    bridge_set = set(bridges)

    def side(node_id):
        if node_id in bridge_set:
            return [index[queue_vertex(node_id, q)] for q in range(NUM_QUEUES)]
        return [index[node_id]]

    adjacency = np.zeros((len(nodes), len(nodes)), dtype=np.int8)
    for (a, b) in links:
        for i in side(a):
            for j in side(b):
                adjacency[i, j] = 1

    routes: dict[tuple[str, str], tuple[str, ...]] = {}
    for entry in spec.get("routes", []):
        path = tuple(str(p) for p in entry["path"])
        src = str(entry.get("src", path[0]))
        dst = str(entry.get("dst", path[-1]))
        if len(path) < 2 or path[0] != src or path[-1] != dst:
            raise TopologyError(f"route {src}->{dst} path {path} is inconsistent")
        if src not in talkers or dst not in listeners:
            raise TopologyError(f"route {src}->{dst} must run from a talker to a listener")
        if any(p not in bridge_set for p in path[1:-1]):
            raise TopologyError(f"route {src}->{dst} passes through a non-bridge node")
        if len(set(path)) != len(path):
            raise TopologyError(f"route {src}->{dst} contains a cycle")
        for hop in zip(path, path[1:]):
            if hop not in links:
                raise TopologyError(f"route {src}->{dst} uses missing link {hop[0]}-{hop[1]}")
        routes[(src, dst)] = path

    return Topology(talkers=talkers, listeners=listeners, bridges=bridges, links=links,
                    routes=routes, nodes=nodes, adjacency=adjacency,
                    tick=int(spec.get("tick_ns", DEFAULT_TICK_NS)),
                    ifg_bytes=int(spec.get("ifg_bytes", IFG_BYTES)), link_order=link_order)


def load_topology(path: str | Path) -> Topology:
    with open(path) as fh:
        return build_topology(json.load(fh))


def derive_datapath(flow: Flow, topology: Topology,
                    queue_choice: int | Mapping[str, int]) -> Datapath:
    """Decompose the flow's static route into NDPs.

    ``queue_choice`` is either one queue id used at every bridge or a
    mapping from bridge id to queue id.
    """
    path = topology.route(flow.source, flow.destination)
    ndps = [NDP(path[0], path[1], None)]
    for bridge, nxt in zip(path[1:-1], path[2:]):
        q = queue_choice[bridge] if isinstance(queue_choice, Mapping) else queue_choice
        if not 0 <= q < NUM_QUEUES:
            raise ValueError(f"queue {q} does not exist")
        if q == BE_QUEUE and flow.scheduled:
            raise ValueError(f"scheduled flow {flow.id} cannot use the best-effort queue")
        ndps.append(NDP(bridge, nxt, int(q)))
    return Datapath(flow.id, tuple(ndps))


def number_ndps(datapaths: Iterable[Datapath], topology: Topology) -> dict[NDP, int]:
    """Number the NDPs in use, 1-based, by link order then descending queue id."""
    used = {n for dp in datapaths for n in dp.ndps}

    def key(n: NDP):
        return (topology.link_order.get(n.link, 1 << 30), -(n.queue if n.queue is not None else -1))

    return {n: i + 1 for i, n in enumerate(sorted(used, key=key))}


def static_queue(flow: Flow) -> int:
    if flow.kind is FlowKind.TT:
        return TT_QUEUE
    if flow.kind is FlowKind.AVB:
        return AVB_QUEUE
    raise ValueError(f"best-effort flow {flow.id} has no scheduled queue")


def _int_field(row: Mapping, name: str, line: int) -> int:
    raw = row.get(name)
    if raw is None or str(raw).strip() == "":
        raise FlowFileError(f"missing {name}", line)
    try:
        return int(float(raw))
    except ValueError:
        raise FlowFileError(f"{name}={raw!r} is not a number", line) from None


def parse_flows(text: str, topology: Topology) -> list[Flow]:
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None:
        raise FlowFileError("no flows")
    missing = [h for h in FLOW_CSV_HEADER if h not in reader.fieldnames]
    if missing:
        raise FlowFileError(f"missing columns {missing}", 1)
    flows, ids = [], set()
    for line, row in enumerate(reader, start=2):
        fid = (row["id"] or "").strip()
        if not fid:
            raise FlowFileError("empty flow id", line)
        if fid in ids:
            raise FlowFileError(f"duplicate flow id {fid!r}", line)
        ids.add(fid)
        try:
            flows.append(topology.flow(
                fid, row["kind"].strip().upper(), row["src"].strip(), row["dst"].strip(),
                _int_field(row, "size_bytes", line), _int_field(row, "period_ns", line),
                _int_field(row, "deadline_ns", line), _int_field(row, "pcp", line)))
        except FlowFileError:
            raise
        except ValueError as exc:
            raise FlowFileError(str(exc), line) from None
    if not flows:
        raise FlowFileError("no flows")
    return flows


def load_flows(path: str | Path, topology: Topology) -> list[Flow]:
    return parse_flows(Path(path).read_text(), topology)


def flows_to_csv(flows: Sequence[Flow]) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(FLOW_CSV_HEADER)
    for f in flows:
        writer.writerow([f.id, f.kind.value, f.source, f.destination, f.size,
                         f.period, f.deadline, f.weight])
    return out.getvalue()
