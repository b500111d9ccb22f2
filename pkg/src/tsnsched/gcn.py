"""Graph convolutional encoder: typed TSN graph -> fixed 22-dimensional state.

Each node type has its own input layer (talkers, listeners, scheduled
queues, best-effort queues).  Two Kipf-style convolutions (64 and 32 units,
ReLU) follow, then mean pooling over nodes and a dense projection to 22.

Categorical fields (ids, destination, queue id, preemptivity) are hashed
into 64 buckets and looked up in a learned 4-wide embedding table.  Per-flow
rows of a talker or listener are averaged so every node type has a fixed
arity whatever the number of flows.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .gcl import GateControlList, be_gaps
from .model import MTU_BYTES, BE_QUEUE, Flow, NodeKind, Topology, queue_vertex
from .nn import Adam, glorot

STATE_DIM = 22
BUCKETS = 64
EMBED = 4
INPUT_WIDTH = 32
CONV1 = 64
CONV2 = 32

NODE_TYPES = ("talker", "listener", "sched_queue", "be_queue")
NUMERIC = {"talker": 10, "listener": 1, "sched_queue": 7, "be_queue": 5}
CATEGORICAL = {"talker": 3, "listener": 3, "sched_queue": 4, "be_queue": 4}


def normalize_adjacency(a: np.ndarray) -> np.ndarray:
    """Symmetric normalisation ``D^-1/2 (A + I) D^-1/2`` of the undirected graph."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"adjacency must be square, got {a.shape}")
    sym = np.maximum(a, a.T)
    np.fill_diagonal(sym, 0.0)
    a_hat = sym + np.eye(a.shape[0])
    d = 1.0 / np.sqrt(a_hat.sum(axis=1))
    return a_hat * d[:, None] * d[None, :]


def bucket(key: str) -> int:
    return zlib.crc32(key.encode()) % BUCKETS


def histogram(keys: Sequence[str]) -> list[tuple[int, float]]:
    """Averaged one-hot over hash buckets as sparse ``(bucket, weight)`` pairs."""
    counts: dict[int, float] = {}
    for k in keys:
        b = bucket(k)
        counts[b] = counts.get(b, 0.0) + 1.0
    return [(b, c / len(keys)) for b, c in sorted(counts.items())]


@dataclass
class GraphObs:
    """Encoder input for one graph or for a batch of graphs on one topology.

    Categorical fields are sparse: ``cat_idx[t]`` rows are
    ``(graph, row, field, bucket)`` with weights in ``cat_w[t]``.  ``numeric[t]``
    is ``(n_t, k_t)`` for a single graph and ``(B, n_t, k_t)`` for a batch.
    """

    adjacency: np.ndarray
    index: dict[str, np.ndarray]
    numeric: dict[str, np.ndarray]
    cat_idx: dict[str, np.ndarray]
    cat_w: dict[str, np.ndarray]
    batch: int | None = None

    @property
    def node_count(self) -> int:
        return self.adjacency.shape[0]

    def dense_cats(self, t: str) -> np.ndarray:
        """Categorical distributions of type ``t`` as a dense ``(B, n_t, c_t, BUCKETS)`` array."""
        out = np.zeros((self.batch or 1, len(self.index[t]), CATEGORICAL[t], BUCKETS))
        idx = self.cat_idx[t]
        np.add.at(out, (idx[:, 0], idx[:, 1], idx[:, 2], idx[:, 3]), self.cat_w[t])
        return out


def features_to_dict(obs: GraphObs) -> dict:
    """JSON-friendly snapshot of a single graph's features, for debugging."""
    return {t: {"nodes": obs.index[t].tolist(), "numeric": obs.numeric[t].tolist(),
                "categorical": [[int(i) for i in row[1:]] + [float(w)]
                                for row, w in zip(obs.cat_idx[t], obs.cat_w[t])]}
            for t in NODE_TYPES}


def stack_obs(observations: Sequence[GraphObs]) -> GraphObs:
    """Batch single graphs that share one topology (same adjacency and node typing)."""
    first = observations[0]
    for o in observations:
        if o.batch is not None:
            raise ValueError("stack_obs expects single graphs")
        if o.adjacency is not first.adjacency and not np.array_equal(o.adjacency, first.adjacency):
            raise ValueError("cannot batch graphs with different adjacency")
    cat_idx, cat_w = {}, {}
    for t in NODE_TYPES:
        parts = []
        for b, o in enumerate(observations):
            idx = o.cat_idx[t].copy()
            idx[:, 0] = b
            parts.append(idx)
        cat_idx[t] = np.concatenate(parts) if parts else np.zeros((0, 4), np.int64)
        cat_w[t] = np.concatenate([o.cat_w[t] for o in observations])
    return GraphObs(first.adjacency, first.index,
                    {t: np.stack([o.numeric[t] for o in observations]) for t in NODE_TYPES},
                    cat_idx, cat_w, batch=len(observations))


@dataclass
class FlowRow:
    """What a talker (and its listener) knows about one flow."""

    flow: Flow
    start: int = 0
    end: int = 0
    bridge_delay: int = 0
    observed_latency: float = 0.0
    pending: bool = False


def build_node_features(topology: Topology, rows: Sequence[FlowRow],
                        gcls: Mapping[str, GateControlList],
                        queue_counts: Mapping[str, tuple[int, int]], hp: int, omega: int,
                        count_scale: float = 1.0, a_norm: np.ndarray | None = None) -> GraphObs:
    """Fill the per-node feature table.  Missing queue counts read as zero."""
    scale = max(float(count_scale), 1.0)
    by_talker: dict[str, list[FlowRow]] = {}
    by_listener: dict[str, list[FlowRow]] = {}
    for r in rows:
        by_talker.setdefault(r.flow.source, []).append(r)
        by_listener.setdefault(r.flow.destination, []).append(r)

    # gate windows grouped by queue vertex, BE windows are the free gaps
    windows: dict[str, list[tuple[int, int]]] = {}
    for name, g in gcls.items():
        bridge = name.partition("->")[0]
        for ev in g.events:
            windows.setdefault(queue_vertex(bridge, ev.queue), []).append((ev.open, ev.close))
        windows.setdefault(queue_vertex(bridge, BE_QUEUE), []).extend(be_gaps(g.events, hp))

    index = {t: [] for t in NODE_TYPES}
    numeric = {t: [] for t in NODE_TYPES}
    cats = {t: [] for t in NODE_TYPES}

    def add_cats(t, fields):
        row = len(index[t])
        for fi, keys in enumerate(fields):
            for b, w in histogram(keys):
                cats[t].append((0, row, fi, b, w))

    for i, node in enumerate(topology.nodes):
        if node.kind is NodeKind.TALKER:
            rs = by_talker.get(node.id, [])
            per_flow = np.array([[r.flow.weight / 7.0, r.flow.size / MTU_BYTES, r.flow.period / hp,
                                  r.flow.deadline / hp, r.start / hp, r.end / hp, r.bridge_delay / hp,
                                  r.observed_latency / hp, float(r.pending)] for r in rs]).reshape(-1, 9)
            mean = per_flow.mean(axis=0) if rs else np.zeros(9)
            numeric["talker"].append(np.append(mean, len(rs) / scale))
            add_cats("talker", [[f"node:{node.id}"], [f"flow:{r.flow.id}" for r in rs],
                                [f"node:{r.flow.destination}" for r in rs]])
            index["talker"].append(i)
        elif node.kind is NodeKind.LISTENER:
            rs = by_listener.get(node.id, [])
            numeric["listener"].append([len(rs) / scale])
            add_cats("listener", [[f"node:{node.id}"], [f"flow:{r.flow.id}" for r in rs],
                                  [f"node:{r.flow.source}" for r in rs]])
            index["listener"].append(i)
        else:
            ws = windows.get(node.id, [])
            contained, dropped = queue_counts.get(node.id, (0, 0))
            opens = np.array([w[0] for w in ws], dtype=np.float64)
            closes = np.array([w[1] for w in ws], dtype=np.float64)
            stats = [len(ws) / omega, opens.mean() / hp if ws else 0.0, closes.mean() / hp if ws else 0.0]
            kind = "be_queue" if node.queue_id == BE_QUEUE else "sched_queue"
            if kind == "sched_queue":
                span = [opens.min() / hp if ws else 0.0, closes.max() / hp if ws else 0.0]
                numeric[kind].append(span + [contained / scale, dropped / scale] + stats)
            else:
                numeric[kind].append([contained / scale, dropped / scale] + stats)
            add_cats(kind, [[f"node:{node.id}"], [f"switch:{node.switch_id}"],
                            [f"queue:{node.queue_id}"], [f"preempt:{int(node.preemptive)}"]])
            index[kind].append(i)

    if a_norm is None:
        a_norm = normalize_adjacency(topology.adjacency)
    return GraphObs(
        a_norm,
        {t: np.array(index[t], dtype=np.int64) for t in NODE_TYPES},
        {t: np.array(numeric[t], dtype=np.float64).reshape(-1, NUMERIC[t]) for t in NODE_TYPES},
        {t: np.array([c[:4] for c in cats[t]], dtype=np.int64).reshape(-1, 4) for t in NODE_TYPES},
        {t: np.array([c[4] for c in cats[t]], dtype=np.float64) for t in NODE_TYPES})


@dataclass
class GcnParams:
    embed: np.ndarray
    proj_w: dict[str, np.ndarray]
    proj_b: dict[str, np.ndarray]
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    wo: np.ndarray
    bo: np.ndarray

    def arrays(self) -> list[np.ndarray]:
        out = [self.embed]
        for t in NODE_TYPES:
            out += [self.proj_w[t], self.proj_b[t]]
        return out + [self.w1, self.b1, self.w2, self.b2, self.wo, self.bo]

    def copy(self) -> "GcnParams":
        return GcnParams(self.embed.copy(), {k: v.copy() for k, v in self.proj_w.items()},
                         {k: v.copy() for k, v in self.proj_b.items()}, self.w1.copy(), self.b1.copy(),
                         self.w2.copy(), self.b2.copy(), self.wo.copy(), self.bo.copy())

    def zeros_like(self) -> "GcnParams":
        c = self.copy()
        for a in c.arrays():
            a[...] = 0.0
        return c

    def to_dict(self) -> dict:
        names = ["embed"] + [f"{k}_{t}" for t in NODE_TYPES for k in ("proj_w", "proj_b")] + \
            ["w1", "b1", "w2", "b2", "wo", "bo"]
        return {n: {"shape": list(a.shape), "values": a.ravel().tolist()} for n, a in zip(names, self.arrays())}

    @classmethod
    def from_dict(cls, data: dict) -> "GcnParams":
        def arr(n):
            return np.array(data[n]["values"], dtype=np.float64).reshape(data[n]["shape"])
        return cls(arr("embed"), {t: arr(f"proj_w_{t}") for t in NODE_TYPES},
                   {t: arr(f"proj_b_{t}") for t in NODE_TYPES},
                   arr("w1"), arr("b1"), arr("w2"), arr("b2"), arr("wo"), arr("bo"))


def init_gcn(rng: np.random.Generator, out_dim: int = STATE_DIM) -> GcnParams:
    proj_w, proj_b = {}, {}
    for t in NODE_TYPES:
        d = NUMERIC[t] + CATEGORICAL[t] * EMBED
        proj_w[t] = glorot(rng, d, INPUT_WIDTH)
        proj_b[t] = np.zeros(INPUT_WIDTH)
    return GcnParams(rng.normal(0.0, 0.5, size=(BUCKETS, EMBED)), proj_w, proj_b,
                     glorot(rng, INPUT_WIDTH, CONV1), np.zeros(CONV1),
                     glorot(rng, CONV1, CONV2), np.zeros(CONV2),
                     glorot(rng, CONV2, out_dim), np.zeros(out_dim))


@dataclass
class GcnCache:
    single: bool
    inputs: dict = field(default_factory=dict)
    pre: dict = field(default_factory=dict)
    c1: np.ndarray | None = None
    z1: np.ndarray | None = None
    c2: np.ndarray | None = None
    z2: np.ndarray | None = None
    pooled: np.ndarray | None = None


def _flat(x: np.ndarray) -> np.ndarray:
    return x.reshape(-1, x.shape[-1])


def _embed(obs: GraphObs, t: str, table: np.ndarray, batch: int) -> np.ndarray:
    out = np.zeros((batch, len(obs.index[t]), CATEGORICAL[t], EMBED))
    idx = obs.cat_idx[t]
    if len(idx):
        np.add.at(out, (idx[:, 0], idx[:, 1], idx[:, 2]), obs.cat_w[t][:, None] * table[idx[:, 3]])
    return out.reshape(batch, len(obs.index[t]), -1)


def encode_with_cache(obs: GraphObs, params: GcnParams) -> tuple[np.ndarray, GcnCache]:
    single = obs.batch is None
    batch = 1 if single else obs.batch
    n = obs.node_count
    covered = sum(len(obs.index[t]) for t in NODE_TYPES)
    if covered != n:
        raise ValueError(f"features cover {covered} of {n} nodes")

    cache = GcnCache(single)
    h0 = np.zeros((batch, n, INPUT_WIDTH))
    for t in NODE_TYPES:
        idx = obs.index[t]
        if len(idx) == 0:
            continue
        num = obs.numeric[t][None] if single else obs.numeric[t]
        x = np.concatenate([num, _embed(obs, t, params.embed, batch)], axis=2)
        z = x @ params.proj_w[t] + params.proj_b[t]
        cache.inputs[t], cache.pre[t] = x, z
        h0[:, idx] = np.maximum(z, 0.0)

    a = obs.adjacency
    cache.c1 = np.matmul(a, h0)
    cache.z1 = cache.c1 @ params.w1 + params.b1
    h1 = np.maximum(cache.z1, 0.0)
    cache.c2 = np.matmul(a, h1)
    cache.z2 = cache.c2 @ params.w2 + params.b2
    h2 = np.maximum(cache.z2, 0.0)
    cache.pooled = h2.mean(axis=1)
    out = cache.pooled @ params.wo + params.bo
    return (out[0] if single else out), cache


def encode(obs: GraphObs, params: GcnParams) -> np.ndarray:
    """The 22-dimensional graph state (or a ``(B, 22)`` batch)."""
    return encode_with_cache(obs, params)[0]


def encode_backward(obs: GraphObs, params: GcnParams, cache: GcnCache, dout: np.ndarray) -> GcnParams:
    """Parameter gradients of a scalar loss given its gradient w.r.t. the encoding."""
    dout = np.asarray(dout, dtype=np.float64)
    if cache.single:
        dout = dout[None]
    g = params.zeros_like()
    n = obs.node_count
    a = obs.adjacency
    g.wo[...] = cache.pooled.T @ dout
    g.bo[...] = dout.sum(axis=0)
    dpool = dout @ params.wo.T
    dz2 = np.repeat(dpool[:, None, :] / n, n, axis=1) * (cache.z2 > 0)
    g.w2[...] = _flat(cache.c2).T @ _flat(dz2)
    g.b2[...] = dz2.sum(axis=(0, 1))
    dh1 = np.matmul(a.T, dz2 @ params.w2.T)
    dz1 = dh1 * (cache.z1 > 0)
    g.w1[...] = _flat(cache.c1).T @ _flat(dz1)
    g.b1[...] = dz1.sum(axis=(0, 1))
    dh0 = np.matmul(a.T, dz1 @ params.w1.T)
    for t in NODE_TYPES:
        idx = obs.index[t]
        if len(idx) == 0:
            continue
        dz = dh0[:, idx] * (cache.pre[t] > 0)
        g.proj_w[t][...] = _flat(cache.inputs[t]).T @ _flat(dz)
        g.proj_b[t][...] = dz.sum(axis=(0, 1))
        dx = dz @ params.proj_w[t].T
        demb = dx[..., NUMERIC[t]:].reshape(dx.shape[0], dx.shape[1], CATEGORICAL[t], EMBED)
        ci = obs.cat_idx[t]
        if len(ci):
            np.add.at(g.embed, ci[:, 3], obs.cat_w[t][:, None] * demb[ci[:, 0], ci[:, 1], ci[:, 2]])
    return g


def pooled_feature_target(obs: GraphObs) -> np.ndarray:
    """Per-type mean of the numeric features: the reconstruction target."""
    return np.concatenate([obs.numeric[t].mean(axis=-2) if obs.numeric[t].shape[-2] else
                           np.zeros(obs.numeric[t].shape[:-2] + (NUMERIC[t],)) for t in NODE_TYPES], axis=-1)


def pretrain_reconstruction(params: GcnParams, observations: Sequence[GraphObs], epochs: int = 50,
                            lr: float = 1e-3, seed: int = 0) -> list[float]:
    """Optional MSE pretraining: a linear decoder rebuilds pooled node features from the state.

    Not used by default; the encoder is normally trained through the critic loss.
    """
    rng = np.random.default_rng(seed)
    batch = stack_obs(observations)
    target = pooled_feature_target(batch)
    dec_w = glorot(rng, STATE_DIM, target.shape[1])
    dec_b = np.zeros(target.shape[1])
    opt = Adam(params.arrays() + [dec_w, dec_b], lr=lr)
    losses = []
    for _ in range(epochs):
        s, cache = encode_with_cache(batch, params)
        pred = s @ dec_w + dec_b
        diff = pred - target
        losses.append(float(np.mean(diff ** 2)))
        dpred = 2.0 * diff / diff.size
        g = encode_backward(batch, params, cache, dpred @ dec_w.T)
        opt.step(params.arrays() + [dec_w, dec_b], g.arrays() + [s.T @ dpred, dpred.sum(axis=0)])
    return losses
