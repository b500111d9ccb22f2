"""Admission-control environment for dynamically arriving TT flows.

Each step presents one requested flow.  The agent's raw action in [-1, 1]
is decoded into accept/reject, a queue choice, a talker dispatch time and
one gate opening per bridge and phase.  An accepted flow is admitted only if
it collides with no existing gate window, respects the best-effort guard
band, keeps queues isolated, passes the schedule verifier and every flow
still meets its deadline in a short simulation.  Admission adds one gate
entry per bridge and phase; when the fullest port reaches the entry limit
the epoch ends and the whole flow set is rescheduled offline.
"""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .gcl import DEFAULT_OMEGA, GateControlList, GateEvent, be_gaps, port_name
from .gcn import FlowRow, GcnParams, GraphObs, build_node_features, encode, init_gcn, normalize_adjacency
from .model import (RESERVED_QUEUE, Datapath, Flow, FlowKind, Topology, derive_datapath, hyperperiod,
                    static_queue, transmission_duration)
from .scheduler import (FlowSchedule, Infeasible, ScheduleAssignment, build_gcls, solve_static,
                        verify_schedule)
from .simulator import BeLoad, SimFlow, SimMetrics, Simulator

logger = logging.getLogger(__name__)

DATA_DIR = Path(__file__).parent / "data"


@dataclass(frozen=True)
class EnvConfig:
    omega: int = DEFAULT_OMEGA
    eval_hyperperiods: int = 4
    guard_band: int | None = None       # ns; default 64 B + IFG at the link rate
    max_requests: int = 200             # per epoch, then the epoch is truncated
    strict_be_containment: bool = False
    be_frames_per_hp: float = 0.0
    queue_capacity: int = 16
    fallback_node_limit: int = 200_000
    decision_log: bool = False

    def __post_init__(self):
        if self.omega < 1:
            raise ValueError("omega must be at least 1")
        if self.eval_hyperperiods < 1 or self.max_requests < 1:
            raise ValueError("evaluation window and request cap must be at least 1")


@dataclass(frozen=True)
class FlowTemplate:
    kind: FlowKind
    source: str
    destination: str
    size: int
    period: int
    deadline: int
    pcp: int


def parse_flow_mix(text: str) -> list[FlowTemplate]:
    rows = list(csv.DictReader(io.StringIO(text)))
    if not rows:
        raise ValueError("flow mix is empty")
    out = []
    for line, r in enumerate(rows, start=2):
        try:
            out.append(FlowTemplate(FlowKind(r.get("kind", "TT").strip().upper()), r["src"].strip(),
                                    r["dst"].strip(), int(r["size_bytes"]), int(r["period_ns"]),
                                    int(r["deadline_ns"]), int(r.get("pcp", 0) or 0)))
        except (KeyError, ValueError) as exc:
            raise ValueError(f"flow mix line {line}: {exc}") from None
    return out


def load_flow_mix(path: str | Path | None = None) -> list[FlowTemplate]:
    return parse_flow_mix(Path(path or DATA_DIR / "flow_mix.csv").read_text())


# -- action decoding ---------------------------------------------------------

@dataclass
class DecodedAction:
    accept: bool
    queue: int
    dispatch: int
    gate_opens: np.ndarray          # (bridges, phases), absolute ns in [0, HP)
    valid: bool = True
    reason: str = ""

    def hop_starts(self, period: int) -> np.ndarray:
        """``(phases, hops)`` transmission starts: talker dispatch then one per bridge."""
        n = self.gate_opens.shape[1]
        first = self.dispatch + np.arange(n, dtype=np.int64) * period
        return np.column_stack([first, self.gate_opens.T]).astype(np.int64)


def dispatch_bound(period: int, duration: int, bridges: int, ifg: int) -> int:
    """Latest dispatch time that still leaves room for every bridge hop."""
    return period - (bridges + 1) * duration - bridges * ifg


def gate_bounds(phase: int, bridge: int, period: int, duration: int, bridges: int, ifg: int,
                dispatch: int, previous_open: int | None) -> tuple[int, int]:
    """Feasible opening interval of ``bridge`` (1-based) in ``phase`` (1-based)."""
    if bridge == 1:
        lo = dispatch + (phase - 1) * period + duration + ifg
    else:
        lo = previous_open + duration + ifg
    hi = phase * period - (bridges - bridge + 1) * duration - (bridges - bridge) * ifg
    return lo, hi


def _affine(u: float, lo: int, hi: int, tick: int) -> int:
    v = lo + int(round(u * (hi - lo) / tick)) * tick
    return min(v, hi)


def decode_action(raw: np.ndarray, flow: Flow, hp: int, m: int, n: int, ifg: int,
                  tick: int = 10, reserved_queue: int = RESERVED_QUEUE) -> DecodedAction:
    """Map a raw action in [-1, 1]^(3 + m n) onto accept, queue, dispatch and gate openings.

    Coordinates after the first two are decoded in order; each gate bound
    depends on values already decoded.  An empty interval marks the action
    structurally invalid (the caller treats it as a rejection).
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape != (3 + m * n,):
        raise ValueError(f"action must have {3 + m * n} entries, got {raw.shape}")
    if hp % n:
        raise ValueError(f"{n} phases do not divide the hyperperiod {hp}")
    period = hp // n
    u = (np.clip(raw, -1.0, 1.0) + 1.0) / 2.0
    accept = bool(raw[0] > 0)
    queue = reserved_queue if raw[1] > 0 else static_queue(flow)
    opens = np.zeros((m, n), dtype=np.int64)
    hi = dispatch_bound(period, flow.duration, m, ifg)
    if hi < 0:
        return DecodedAction(False, queue, 0, opens, False, "flow does not fit its period")
    dispatch = _affine(u[2], 0, hi, tick)
    for k in range(1, n + 1):
        for j in range(1, m + 1):
            lo, hi = gate_bounds(k, j, period, flow.duration, m, ifg, dispatch,
                                 int(opens[j - 2, k - 1]) if j > 1 else None)
            if lo > hi:
                return DecodedAction(False, queue, dispatch, opens, False,
                                     f"empty bound for bridge {j} phase {k}")
            opens[j - 1, k - 1] = _affine(u[3 + (k - 1) * m + (j - 1)], lo, hi, tick)
    return DecodedAction(accept, queue, dispatch, opens)


# -- reward terms ------------------------------------------------------------

Window = tuple[str, int, int]   # (egress port, start, length)


def reward_O(flows: Iterable[Flow], metrics: SimMetrics) -> int:
    """1 unless some flow's latency exceeds its deadline (a dropped frame counts as a miss)."""
    for f in flows:
        st = metrics.flows.get(f.id)
        if st is None:
            continue
        if st.dropped or any(lat > f.deadline for lat in st.latencies):
            return 0
    return 1


def reward_S(candidate: Sequence[Window], gcls: Mapping[str, GateControlList]) -> int:
    """1 unless a candidate window intersects a scheduled gate event on its port."""
    for port, start, length in candidate:
        g = gcls.get(port)
        if g is None:
            continue
        for ev in g.events:
            if start < ev.close and start + length > ev.open:
                return 0
    return 1


def reward_B(candidate: Sequence[Window], gcls: Mapping[str, GateControlList], hp: int,
             guard_band: int, strict: bool = False) -> int:
    """1 if every candidate window satisfies the guard-band test against some BE gap.

    The default test is the overlap form ``start < c - Lg and start + L > o + Lg``;
    ``strict`` demands containment in ``[o + Lg, c - Lg]`` instead.  Gaps no
    longer than two guard bands offer no usable window and never match.
    """
    for port, start, length in candidate:
        g = gcls.get(port)
        gaps = [(o, c) for o, c in be_gaps(g.events if g is not None else [], hp) if c - o > 2 * guard_band]
        if strict:
            ok = any(start >= o + guard_band and start + length <= c - guard_band for o, c in gaps)
        else:
            ok = any(start < c - guard_band and start + length > o + guard_band for o, c in gaps)
        if not ok:
            return 0
    return 1


def gcl_penalty(beta: int, omega: int) -> float:
    return beta / omega


def drop_penalty(metrics: SimMetrics) -> float:
    fd, fc = metrics.dropped, metrics.contained
    return fd / (fd + fc) if fd + fc else 0.0


def jitter_penalty(metrics: SimMetrics) -> float:
    """Mean coefficient of variation of per-flow latency; flows with zero mean add nothing."""
    ratios = []
    for st in metrics.flows.values():
        if st.latencies:
            mu, sigma = st.jitter
            ratios.append(sigma / mu if mu else 0.0)
    return float(np.mean(ratios)) if ratios else 0.0


@dataclass
class RewardBreakdown:
    r_O: int
    r_S: int
    r_B: int
    accept: int
    gcl_penalty: float
    drop_penalty: float
    jitter_penalty: float
    admitted: bool = False

    @property
    def total(self) -> float:
        gate = float(self.admitted) * self.r_O * self.r_S * self.r_B * self.accept
        return gate - self.gcl_penalty - self.drop_penalty - self.jitter_penalty


# -- schedule helpers --------------------------------------------------------

def bridge_windows(flow: Flow, datapath: Datapath, hop_starts: np.ndarray) -> list[Window]:
    """Gate windows ``[start, start + L)`` of every bridge hop of every instance."""
    return [(port_name(datapath.links[h]), int(hop_starts[k, h]), flow.duration)
            for k in range(hop_starts.shape[0]) for h in range(1, datapath.op_count)]


def queue_residences(flow: Flow, datapath: Datapath, hop_starts: np.ndarray):
    """Per bridge hop: ``(link, queue, arrival, departure_end)`` for every instance."""
    out = []
    for k in range(hop_starts.shape[0]):
        for h in range(1, datapath.op_count):
            out.append((datapath.links[h], datapath.queue_at(h),
                        int(hop_starts[k, h - 1]) + flow.duration, int(hop_starts[k, h]) + flow.duration))
    return out


def residences_collide(new, existing) -> bool:
    for link, q, a, b in new:
        for link2, q2, a2, b2 in existing.get((link, q), ()):
            if a < b2 and a2 < b:
                return True
    return False


def flow_rows(flows: Mapping[str, Flow], assign: ScheduleAssignment, metrics: SimMetrics | None,
              incoming: Flow | None) -> list[FlowRow]:
    rows = []
    for fid in sorted(assign.flows):
        f, fs = flows[fid], assign.flows[fid]
        hs = fs.hop_starts
        latency = int(hs[0, -1]) + f.duration - int(hs[0, 0])
        observed = 0.0
        if metrics is not None and fid in metrics.flows and metrics.flows[fid].latencies:
            observed = metrics.flows[fid].jitter[0]
        rows.append(FlowRow(f, int(hs[0, 0]), int(hs[0, 0]) + latency,
                            latency - hs.shape[1] * f.duration, observed, False))
    if incoming is not None:
        rows.append(FlowRow(incoming, pending=True))
    return rows


def observe_graph(topology: Topology, flows: Mapping[str, Flow], assign: ScheduleAssignment,
                  gcls: Mapping[str, GateControlList], metrics: SimMetrics | None, incoming: Flow | None,
                  omega: int, count_scale: float = 1.0, a_norm: np.ndarray | None = None) -> GraphObs:
    if metrics is None:
        raise ValueError("state needs metrics from the last simulation window")
    counts = {q: (s.contained, s.dropped) for q, s in metrics.queues.items()}
    return build_node_features(topology, flow_rows(flows, assign, metrics, incoming), gcls, counts,
                               assign.hyperperiod, omega, count_scale, a_norm)


def assemble_state(topology: Topology, flows: Mapping[str, Flow], assign: ScheduleAssignment,
                   gcls: Mapping[str, GateControlList], metrics: SimMetrics | None, incoming: Flow | None,
                   params: GcnParams, omega: int = DEFAULT_OMEGA, count_scale: float = 1.0) -> np.ndarray:
    """Encode the network, its schedule and runtime counters into the 22-dim state."""
    return encode(observe_graph(topology, flows, assign, gcls, metrics, incoming, omega, count_scale), params)


@dataclass
class FallbackResult:
    assignment: ScheduleAssignment
    gcls: dict[str, GateControlList]
    shed: list[str]
    violations: list
    beta: int


# -- environment -------------------------------------------------------------

class TsnEnv:
    """One admission-control episode per epoch; single threaded."""

    def __init__(self, topology: Topology, static_flows: Sequence[Flow],
                 mix: Sequence[FlowTemplate], config: EnvConfig | None = None, seed: int = 0,
                 encoder: GcnParams | None = None):
        self.topology = topology
        self.config = cfg = config or EnvConfig()
        self.mix = list(mix)
        if not self.mix:
            raise ValueError("flow mix is empty")
        self.static_flows = list(static_flows)
        self.hp = hyperperiod([f.period for f in self.static_flows] + [t.period for t in self.mix])
        self.bridges_max = max(len(topology.route(t.source, t.destination)) - 2 for t in self.mix)
        self.phases_max = self.hp // min(t.period for t in self.mix)
        self.action_dim = 3 + self.bridges_max * self.phases_max
        self.ifg = topology.ifg()
        self.guard_band = cfg.guard_band if cfg.guard_band is not None else \
            transmission_duration(64, topology.default_rate) + self.ifg
        self.arrivals = np.random.default_rng(seed)
        self.encoder = encoder if encoder is not None else init_gcn(np.random.default_rng(seed + 7919))
        self.a_norm = normalize_adjacency(topology.adjacency)
        self.count_scale = 1.0
        self.decisions: list[list] = []
        self.epoch = 0
        self._static = self._solve_static()
        self.reset()

    # -- state ---------------------------------------------------------

    def _solve_static(self):
        if not self.static_flows:
            assign = ScheduleAssignment(self.hp)
            gcls = build_gcls(assign, [], self.topology, self.config.omega)
            return assign, gcls, self._simulate({}, assign, gcls)
        assign = solve_static(self.static_flows, self.topology, self.config.omega)
        if assign.hyperperiod != self.hp:
            assign = _stretch(assign, {f.id: f for f in self.static_flows}, self.hp)
        gcls = build_gcls(assign, self.static_flows, self.topology, self.config.omega)
        flows = {f.id: f for f in self.static_flows}
        return assign, gcls, self._simulate(flows, assign, gcls)

    def _simulate(self, flows: Mapping[str, Flow], assign: ScheduleAssignment,
                  gcls: Mapping[str, GateControlList], extra: tuple | None = None) -> SimMetrics:
        sim_flows = [SimFlow(flows[fid], derive_datapath(flows[fid], self.topology, fs.queue), fs.offset)
                     for fid, fs in sorted(assign.flows.items())]
        sim = Simulator(self.topology, sim_flows, gcls, hp=self.hp,
                        be_load=BeLoad(self.config.be_frames_per_hp), seed=self.epoch,
                        queue_capacity=self.config.queue_capacity, guard_band=self.guard_band)
        if extra is not None:
            flow, dp, offset, events = extra
            sim.apply_runtime_update(events, {flow.id: SimFlow(flow, dp, offset)})
        sim.run_until(self.config.eval_hyperperiods * self.hp)
        return sim.metrics()

    def reset(self) -> np.ndarray:
        """Start a new epoch from the static schedule."""
        assign, gcls, metrics = self._static
        self.epoch += 1
        self.flows: dict[str, Flow] = {f.id: f for f in self.static_flows}
        self.assign = ScheduleAssignment(self.hp, dict(assign.flows), assign.objective_z)
        self.gcls = {k: g.copy() for k, g in gcls.items()}
        self.metrics = self.epoch_metrics = metrics
        self.residences: dict = {}
        for fid, fs in self.assign.flows.items():
            self._add_residences(self.flows[fid], fs)
        self.beta = max((g.length for g in self.gcls.values()), default=0)
        self.requested = 0
        self.admitted = 0
        self.admit_order: list[str] = []
        self.last_fallback: FallbackResult | None = None
        self.incoming = self._draw()
        self._refresh()
        return self.state

    def _add_residences(self, flow: Flow, fs: FlowSchedule) -> None:
        dp = derive_datapath(flow, self.topology, fs.queue)
        for link, q, a, b in queue_residences(flow, dp, fs.hop_starts):
            self.residences.setdefault((link, q), []).append((link, q, a, b))

    def _draw(self) -> Flow:
        t = self.mix[int(self.arrivals.integers(len(self.mix)))]
        return self.topology.flow(f"DYN{self.requested + 1}", t.kind, t.source, t.destination,
                                  t.size, t.period, t.deadline, t.pcp)

    def _refresh(self) -> None:
        per_talker: dict[str, int] = {}
        for f in self.flows.values():
            per_talker[f.source] = per_talker.get(f.source, 0) + 1
        counts = [self.metrics.contained, self.metrics.dropped] + list(per_talker.values())
        counts += [max((q.contained for q in self.metrics.queues.values()), default=0)]
        self.count_scale = max(self.count_scale, *counts)
        self.graph = observe_graph(self.topology, self.flows, self.assign, self.gcls, self.metrics,
                                   self.incoming, self.config.omega, self.count_scale, self.a_norm)
        self.state = encode(self.graph, self.encoder)

    def flow_dimensions(self, flow: Flow) -> tuple[int, int]:
        """(bridges on the route, phases in the hyperperiod) for ``flow``."""
        m = len(self.topology.route(flow.source, flow.destination)) - 2
        return m, self.hp // flow.period

    # -- step ----------------------------------------------------------

    def step(self, raw_action: np.ndarray):
        raw_action = np.asarray(raw_action, dtype=np.float64)
        if raw_action.shape != (self.action_dim,):
            raise ValueError(f"action must have {self.action_dim} entries")
        prev_state = self.state
        flow = self.incoming
        self.requested += 1
        m, n = self.flow_dimensions(flow)
        dec = decode_action(raw_action[:3 + m * n], flow, self.hp, m, n, self.ifg, self.topology.tick)
        accept = dec.accept and dec.valid
        dp = derive_datapath(flow, self.topology, dec.queue)
        hs = dec.hop_starts(flow.period)
        windows = bridge_windows(flow, dp, hs)
        r_s = reward_S(windows, self.gcls)
        r_b = reward_B(windows, self.gcls, self.hp, self.guard_band, self.config.strict_be_containment)
        r_o = reward_O(self.flows.values(), self.metrics)
        admitted, overflow, violations, reason = False, False, [], "rejected"
        isolated = True
        if accept:
            need: dict[str, int] = {}
            for port, _, _ in windows:
                need[port] = need.get(port, 0) + 1
            if any(self.gcls[p].length + c > self.config.omega for p, c in need.items()):
                overflow, reason = True, "gate budget exhausted"
            elif r_s and r_b:
                isolated = not residences_collide(queue_residences(flow, dp, hs), self.residences)
                fs = FlowSchedule(flow.id, dec.queue, hs)
                merged = ScheduleAssignment(self.hp, {**self.assign.flows, flow.id: fs}, self.assign.objective_z)
                all_flows = {**self.flows, flow.id: flow}
                violations = verify_schedule(merged, all_flows.values(), self.topology)
                if isolated and not violations:
                    events: dict[str, list[GateEvent]] = {}
                    for k in range(n):
                        for h in range(1, dp.op_count):
                            s = int(hs[k, h])
                            events.setdefault(port_name(dp.links[h]), []).append(
                                GateEvent(s, s + flow.duration, dec.queue, k, flow.id))
                    trial = self._simulate(self.flows, self.assign, self.gcls, (flow, dp, dec.dispatch, events))
                    r_o = reward_O(all_flows.values(), trial)
                    if r_o:
                        self._commit(flow, fs, events, trial)
                        admitted, reason = True, "admitted"
                    else:
                        reason = "deadline miss in simulation"
                else:
                    reason = "queue isolation" if not isolated else "schedule verification"
            else:
                reason = "gate conflict" if not r_s else "guard band"
        elif dec.accept:
            reason = dec.reason

        if overflow:
            self.beta = self.config.omega
        else:
            self.beta = max(self.beta, max((g.length for g in self.gcls.values()), default=0))
        done = self.beta >= self.config.omega
        breakdown = RewardBreakdown(r_o, r_s, r_b, int(accept), gcl_penalty(self.beta, self.config.omega),
                                    drop_penalty(self.metrics), jitter_penalty(self.metrics), admitted)
        info = {"flow": flow, "decoded": dec, "breakdown": breakdown, "admitted": admitted,
                "reason": reason, "beta": self.beta, "violations": violations, "prev_state": prev_state,
                "assignment": self.assign, "flows": self.flows,
                "deadlines_met": reward_O(self.flows.values(), self.metrics) == 1,
                "truncated": not done and self.requested >= self.config.max_requests,
                "fallback": None}
        if self.config.decision_log:
            self.decisions.append([self.epoch, self.requested, flow.id, int(accept), dec.queue, dec.dispatch,
                                   int(admitted), reason, self.beta, f"{breakdown.total:.6f}"])
        self.epoch_metrics = self.metrics
        if done:
            info["fallback"] = self.fallback_reschedule()
        self.incoming = self._draw()
        self._refresh()
        return self.state, breakdown.total, done, info

    def _commit(self, flow: Flow, fs: FlowSchedule, events, metrics: SimMetrics) -> None:
        for port, evs in events.items():
            for ev in evs:
                self.gcls[port].insert(ev)
        self.flows[flow.id] = flow
        self.assign.flows[flow.id] = fs
        self._add_residences(flow, fs)
        self.metrics = metrics
        self.admitted += 1
        self.admit_order.append(flow.id)

    # -- fallback ------------------------------------------------------

    def fallback_reschedule(self) -> FallbackResult:
        """Re-solve every flow offline; shed the lowest-PCP flows until it fits."""
        survivors = dict(self.flows)
        queues = {fid: fs.queue for fid, fs in self.assign.flows.items()}
        order = {fid: i for i, fid in enumerate(self.admit_order)}
        shed = []
        while survivors:
            try:
                assign = solve_static(list(survivors.values()), self.topology, self.config.omega,
                                      queues={k: queues[k] for k in survivors},
                                      node_limit=self.config.fallback_node_limit)
                break
            except Infeasible as exc:
                victim = min(survivors.values(), key=lambda f: (f.weight, -order.get(f.id, -1), f.id))
                logger.info("fallback: shedding %s (pcp %d): %s", victim.id, victim.weight, exc)
                shed.append(victim.id)
                del survivors[victim.id]
        else:
            assign = ScheduleAssignment(self.hp)
        if assign.hyperperiod != self.hp:
            assign = _stretch(assign, survivors, self.hp)
        gcls = build_gcls(assign, survivors.values(), self.topology, self.config.omega)
        violations = verify_schedule(assign, survivors.values(), self.topology)
        self.flows, self.assign, self.gcls = survivors, assign, gcls
        self.residences = {}
        for fid, fs in assign.flows.items():
            self._add_residences(survivors[fid], fs)
        self.metrics = self._simulate(survivors, assign, gcls)
        beta = max((g.length for g in gcls.values()), default=0)
        self.last_fallback = FallbackResult(assign, gcls, shed, violations, beta)
        return self.last_fallback

    # -- reporting -----------------------------------------------------

    def epoch_summary(self) -> dict:
        metrics = self.epoch_metrics
        return {"total_flows": len(self.static_flows) + self.admitted,
                "requested_flows": self.requested, "admitted": self.admitted,
                "admission_rate": self.admitted / self.requested if self.requested else 0.0,
                "avg_latency_ns": metrics.mean_latency(),
                "jitter_std_ns": metrics.mean_jitter_std(), "beta": self.beta,
                "shed": list(self.last_fallback.shed) if self.last_fallback else []}

    def decision_log_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "request", "flow", "accept", "queue", "dispatch_ns", "admitted", "reason",
                    "beta", "reward"])
        w.writerows(self.decisions)
        return buf.getvalue()


def _stretch(assign: ScheduleAssignment, flows: Mapping[str, Flow], hp: int) -> ScheduleAssignment:
    """Repeat a schedule solved on a shorter hyperperiod over ``hp``."""
    if hp % assign.hyperperiod:
        raise ValueError("target hyperperiod is not a multiple")
    reps = hp // assign.hyperperiod
    out = ScheduleAssignment(hp, objective_z=assign.objective_z)
    for fid, fs in assign.flows.items():
        shift = np.repeat(np.arange(reps, dtype=np.int64) * assign.hyperperiod, fs.phases)[:, None]
        out.flows[fid] = FlowSchedule(fid, fs.queue, np.tile(fs.hop_starts, (reps, 1)) + shift)
    return out
