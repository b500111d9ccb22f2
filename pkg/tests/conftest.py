import numpy as np
import pytest

from tsnsched.env import DATA_DIR
from tsnsched.model import build_topology, load_flows, load_topology


@pytest.fixture(scope="session")
def topo():
    return load_topology(DATA_DIR / "two_bridge_topology.json")


@pytest.fixture(scope="session")
def static_flows(topo):
    return load_flows(DATA_DIR / "static_flows.csv", topo)


def line_topology(bridges: int, talkers=("TK1",), listeners=("LR1",), ifg_bytes=12, tick=10,
                  rate=1_000_000_000):
    """Talkers -> BR1 -> ... -> BRm -> listeners, with every talker/listener pair routed."""
    brs = [f"BR{i + 1}" for i in range(bridges)]
    nodes = [{"id": t, "kind": "talker"} for t in talkers] + [{"id": l, "kind": "listener"} for l in listeners]
    nodes += [{"id": b, "kind": "bridge"} for b in brs]
    links = [{"a": t, "b": brs[0]} for t in talkers]
    links += [{"a": a, "b": b} for a, b in zip(brs, brs[1:])]
    links += [{"a": brs[-1], "b": l} for l in listeners]
    routes = [{"src": t, "dst": l, "path": [t, *brs, l]} for t in talkers for l in listeners]
    return build_topology({"nodes": nodes, "links": links, "routes": routes, "tick_ns": tick,
                           "ifg_bytes": ifg_bytes, "rate_bps": rate})


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
