"""Exact small-instance solvers and the nearest-neighbour + 2-opt baseline."""

import numpy as np

from .errors import ContractError, SizeError
from .instances import CVRP, TSP, distance_matrix

MAX_EXACT_TSP = 15
MAX_EXACT_CVRP = 8


def _path_table(d, nodes):
    """Held-Karp over ``nodes`` starting from node 0.

    ``cost[mask, j]`` is the shortest path 0 -> ... -> nodes[j] visiting
    exactly the nodes in ``mask``; ``parent`` holds the predecessor slot.
    """
    m = len(nodes)
    size = 1 << m
    cost = np.full((size, m), np.inf)
    parent = np.full((size, m), -1, dtype=np.int64)
    nodes = np.asarray(nodes)
    for j in range(m):
        cost[1 << j, j] = d[0, nodes[j]]
    sub_d = d[np.ix_(nodes, nodes)]
    for mask in range(1, size):
        bits = np.flatnonzero([(mask >> j) & 1 for j in range(m)])
        if len(bits) < 2:
            continue
        prev = mask ^ (1 << bits)
        # cand[jj, kk]: reach bits[kk] first, then step to bits[jj]
        cand = cost[prev][:, bits] + sub_d[np.ix_(bits, bits)].T
        best = cand.argmin(axis=1)
        cost[mask, bits] = cand[np.arange(len(bits)), best]
        parent[mask, bits] = bits[best]
    return cost, parent


def _unwind(parent, mask, j, nodes):
    path = []
    while j >= 0:
        path.append(int(nodes[j]))
        mask, j = mask ^ (1 << j), parent[mask, j]
    return path[::-1]


def exact_tsp(inst):
    """Optimal closed tour by Held-Karp; returns (length, order starting at node 0)."""
    n = inst.num_nodes
    if inst.problem != TSP:
        raise ContractError("exact_tsp needs a TSP instance")
    if n > MAX_EXACT_TSP:
        raise SizeError(f"exact TSP limited to {MAX_EXACT_TSP} nodes (got {n}); use the nn2opt baseline")
    d = distance_matrix(inst)
    if n == 2:
        return float(2 * d[0, 1]), np.array([0, 1])
    nodes = list(range(1, n))
    cost, parent = _path_table(d, nodes)
    full = (1 << len(nodes)) - 1
    closing = cost[full] + d[nodes, 0]
    j = int(closing.argmin())
    return float(closing[j]), np.array([0] + _unwind(parent, full, j, nodes))


def exact_cvrp(inst):
    """Optimal CVRP by set partitioning over capacity-feasible routes.

    Each route cost is an exact TSP through the depot (Held-Karp table shared
    by all subsets). Returns (length, order with depot returns).
    """
    if inst.problem != CVRP:
        raise ContractError("exact_cvrp needs a CVRP instance")
    m = inst.n
    if m > MAX_EXACT_CVRP:
        raise SizeError(f"exact CVRP limited to {MAX_EXACT_CVRP} customers (got {m})")
    d = distance_matrix(inst)
    nodes = list(range(1, m + 1))
    cost, parent = _path_table(d, nodes)
    size = 1 << m
    dem = inst.demands[1:]
    load = np.array([dem[[j for j in range(m) if (s >> j) & 1]].sum() for s in range(size)])
    closing = cost + d[nodes, 0][None, :]
    route = closing.min(axis=1)
    route_end = closing.argmin(axis=1)
    route[load > inst.capacity] = np.inf
    route[0] = np.inf

    best = np.full(size, np.inf)
    choice = np.zeros(size, dtype=np.int64)
    best[0] = 0.0
    for s in range(1, size):
        low = s & -s
        rest = s ^ low
        sub = rest
        while True:
            t = sub | low
            val = route[t] + best[s ^ t]
            if val < best[s]:
                best[s], choice[s] = val, t
            if sub == 0:
                break
            sub = (sub - 1) & rest
    order = [0]
    s = size - 1
    while s:
        t = int(choice[s])
        order += _unwind(parent, t, int(route_end[t]), nodes) + [0]
        s ^= t
    return float(best[size - 1]), np.array(order)


def nearest_neighbor(d, start=0):
    n = len(d)
    tour = [start]
    free = np.ones(n, dtype=bool)
    free[start] = False
    for _ in range(n - 1):
        row = np.where(free, d[tour[-1]], np.inf)
        nxt = int(row.argmin())
        tour.append(nxt)
        free[nxt] = False
    return np.array(tour)


def closed_length(d, tour):
    return float(d[tour[:-1], tour[1:]].sum() + d[tour[-1], tour[0]])


def two_opt(d, tour, history=None, eps=1e-12):
    """First-improvement 2-opt until no move shortens the tour.

    ``history`` (a list) receives the tour length after every accepted move.
    """
    tour = np.array(tour)
    n = len(tour)
    if n < 4:
        return tour
    improved = True
    while improved:
        improved = False
        for i in range(n - 2):
            a, b = tour[i], tour[i + 1]
            js = np.arange(i + 2, n if i > 0 else n - 1)
            if len(js) == 0:
                continue
            c, e = tour[js], tour[(js + 1) % n]
            delta = d[a, c] + d[b, e] - d[a, b] - d[c, e]
            hit = np.flatnonzero(delta < -eps)
            if len(hit):
                j = js[hit[0]]
                tour[i + 1:j + 1] = tour[i + 1:j + 1][::-1]
                improved = True
                if history is not None:
                    history.append(closed_length(d, tour))
    return tour


def nn_2opt(inst, history=None):
    """Nearest neighbour from node 0 then 2-opt; TSP only. Returns (length, order)."""
    if inst.problem != TSP:
        raise ContractError("the nn2opt baseline is defined for TSP")
    d = distance_matrix(inst)
    tour = two_opt(d, nearest_neighbor(d, 0), history)
    return closed_length(d, tour), tour


def heuristic_baseline(inst):
    return nn_2opt(inst)[0]


def gap(obj, ref):
    """Optimality gap in percent."""
    if ref <= 0:
        raise ContractError(f"reference objective must be positive, got {ref}")
    return (obj - ref) / ref * 100.0
