"""Brute-force reference implementations used as test oracles.

Everything here is a plain loop over elements, types and constraints with
Python floats. Nothing is shared with the vectorized library code apart
from the input containers.
"""

from __future__ import annotations

import math


def cell(v, count):
    """Half-open cell index of ``v`` on a grid with ``count`` cells (last one closed)."""
    j = int(math.floor(v * count + 1e-9))
    return min(max(j, 0), count - 1)


def joint(weights, probs, members, t):
    s = 0.0
    for x in members:
        s += weights[x] * probs[x][t]
    return s


def ma_cw(weights, nat, pred, groups, k):
    out = {}
    for gid, members in groups:
        for t in range(k):
            out[(gid, t)] = joint(weights, nat, members, t) - joint(weights, pred, members, t)
    return out


def ma_threshold(weights, nat, pred, groups, k):
    out = {}
    for gid, members in groups:
        for tau in range(1, k):
            s = 0.0
            for x in members:
                for t in range(tau, k):
                    s += weights[x] * (nat[x][t] - pred[x][t])
            out[(gid, tau)] = s
    return out


def mc_cw(weights, nat, pred, groups, k, count):
    out = {}
    for gid, members in groups:
        for t in range(k):
            for j in range(count):
                level = [x for x in members if cell(pred[x][t], count) == j]
                if not level:
                    continue
                out[(gid, t, (j + 0.5) / count)] = joint(weights, nat, level, t) - joint(weights, pred, level, t)
    return out


def mc_full(weights, nat, pred, groups, k, count):
    out = {}
    for gid, members in groups:
        cells = {}
        for x in members:
            key = tuple((cell(pred[x][t], count) + 0.5) / count for t in range(k))
            cells.setdefault(key, []).append(x)
        for key, level in cells.items():
            for t in range(k):
                out[(gid, t, key)] = joint(weights, nat, level, t) - joint(weights, pred, level, t)
    return out


def mass(weights, members):
    return sum(weights[x] for x in members)


def mad(weights, nat, pred, accept, groups):
    out = {}
    for gid, members in groups:
        d = mass(weights, members)
        s = 0.0
        for x in members:
            s += weights[x] * (accept(nat[x]) - accept(pred[x]))
        out[gid] = s / d
    return out


def loss_min(table, y):
    s = 0.0
    for t, p in enumerate(y):
        s += p * (table[t][1] - table[t][0])
    return 1.0 if s < -1e-12 else 0.0


def exp_loss(weights, nat, h, table):
    total = 0.0
    for x, w in enumerate(weights):
        for t, p in enumerate(nat[x]):
            total += w * p * (h[x] * table[t][1] + (1.0 - h[x]) * table[t][0])
    return total


def mac(weights, nat, h, table, groups):
    out = {}
    for gid, members in groups:
        d = mass(weights, members)
        s = 0.0
        for x in members:
            s += weights[x] * (loss_min(table, nat[x]) - h[x])
        out[gid] = s / d
    return out


def loss_gap(weights, nat, h, table, H):
    return exp_loss(weights, nat, h, table) - min(exp_loss(weights, nat, g, table) for g in H)


def project_bisect(v, iters=200):
    """Simplex projection by bisection on the shift ``theta``."""
    lo, hi = min(v) - 1.0, max(v)
    for _ in range(iters):
        mid = (lo + hi) / 2
        if sum(max(a - mid, 0.0) for a in v) > 1.0:
            lo = mid
        else:
            hi = mid
    theta = (lo + hi) / 2
    return [max(a - theta, 0.0) for a in v]
