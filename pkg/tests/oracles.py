"""Independent brute-force references used by the tests."""
from __future__ import annotations

import math
from functools import reduce

import numpy as np

from tsnsched.model import derive_datapath, static_queue


def exhaustive_min_tardiness(flows, topo, tick):
    """Enumerate every offset vector on the tick grid; return the optimum or None.

    Link time is tracked as cyclic bitmasks over slots of the common grain.
    """
    hp = reduce(math.lcm, (f.period for f in flows))
    ifg = topo.ifg()
    grain = reduce(math.gcd, [tick, ifg or tick] + [f.duration for f in flows] + [f.period for f in flows])
    slots = hp // grain
    per_flow = []
    for f in flows:
        dp = derive_datapath(f, topo, static_queue(f))
        hops = dp.op_count
        lat = hops * f.duration + (hops - 1) * ifg
        if lat > f.deadline or lat > f.period:
            return None
        options = []
        for off in range(0, f.period - lat + 1, tick):
            masks = {}
            for k in range(hp // f.period):
                for h, link in enumerate(dp.links):
                    start = off + k * f.period + h * (f.duration + ifg)
                    for t in range(start, start + f.duration + ifg, grain):
                        bit = 1 << ((t % hp) // grain)
                        if masks.get(link, 0) & bit:
                            masks = None
                            break
                        masks[link] = masks.get(link, 0) | bit
                    if masks is None:
                        break
                if masks is None:
                    break
            if masks is not None:
                options.append((f.weight * max(0, off + lat - f.deadline), masks))
        per_flow.append(options)
    assert slots < 10_000
    best = [None]

    def rec(i, used, z):
        if i == len(per_flow):
            if best[0] is None or z < best[0]:
                best[0] = z
            return
        for cost, masks in per_flow[i]:
            if any(used.get(l, 0) & m for l, m in masks.items()):
                continue
            nxt = dict(used)
            for l, m in masks.items():
                nxt[l] = nxt.get(l, 0) | m
            rec(i + 1, nxt, z + cost)

    rec(0, {}, 0)
    return best[0]


def occupancy(events, hp):
    """Boolean per-nanosecond occupancy of scheduled windows on one port."""
    occ = np.zeros(hp, dtype=bool)
    for ev in events:
        occ[ev.open:ev.close] = True
    return occ


def free_runs(occ):
    runs, start = [], None
    for t, busy in enumerate(occ):
        if not busy and start is None:
            start = t
        if busy and start is not None:
            runs.append((start, t))
            start = None
    if start is not None:
        runs.append((start, len(occ)))
    return runs


def scan_reward_S(candidate, gcls, hp):
    for port, start, length in candidate:
        g = gcls.get(port)
        if g is None:
            continue
        occ = occupancy(g.events, hp)
        if occ[max(start, 0):min(start + length, hp)].any():
            return 0
    return 1


def scan_reward_B(candidate, gcls, hp, guard, strict=False):
    for port, start, length in candidate:
        g = gcls.get(port)
        occ = occupancy(g.events if g is not None else [], hp)
        ok = False
        for o, c in free_runs(occ):
            usable = np.zeros(hp + length + 1, dtype=bool)
            usable[max(o + guard, 0):max(c - guard, 0)] = True
            cand = np.arange(start, start + length)
            if strict:
                ok = bool(usable[cand].all())
            else:
                ok = bool(usable[cand].any())
            if ok:
                break
        if not ok:
            return 0
    return 1


def scan_reward_O(flows, metrics):
    for f in flows:
        st = metrics.flows.get(f.id)
        if st is None:
            continue
        if st.dropped:
            return 0
        for lat in st.latencies:
            if lat - f.deadline > 0:
                return 0
    return 1
