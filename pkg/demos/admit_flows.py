"""Offer dynamic flows to the admission environment by hand.

The action vector is [accept, queue, dispatch, gate times...] in [-1, 1].
Gates at -1 sit at the earliest legal time after the previous hop.

Run: python3 demos/admit_flows.py
"""
import numpy as np

from tsnsched.env import DATA_DIR, TsnEnv, load_flow_mix
from tsnsched.model import load_flows, load_topology


def main():
    topo = load_topology(DATA_DIR / "two_bridge_topology.json")
    env = TsnEnv(topo, load_flows(DATA_DIR / "static_flows.csv", topo), load_flow_mix(), seed=3)
    rng = np.random.default_rng(3)
    print(f"action dimension {env.action_dim}, start beta {env.beta}")
    for _ in range(8):
        flow = env.incoming
        a = -np.ones(env.action_dim)
        a[0] = 1.0                              # accept
        a[1:3] = rng.uniform(-1.0, 1.0, 2)       # queue choice and dispatch offset
        _, reward, done, info = env.step(a)
        dec = info["decoded"]
        print(f"{flow.id:8s} period {flow.period // 1000:>5d} us  dispatch {dec.dispatch:>7d} ns  "
              f"queue {dec.queue}  -> {info['reason']:<28s} beta {info['beta']:>3d}  reward {reward:+.3f}")
        if done:
            fb = info["fallback"]
            print(f"budget exhausted: fallback shed {fb.shed}, {len(fb.violations)} violations, beta {fb.beta}")
            break

    # an explicit rejection leaves the schedule untouched
    _, reward, _, info = env.step(-np.ones(env.action_dim))
    print(f"rejected {info['flow'].id}: reward {reward:+.3f}")
    print(env.epoch_summary())


if __name__ == "__main__":
    main()
