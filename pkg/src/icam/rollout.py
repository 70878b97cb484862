"""Solution construction: masking rules, multi-start rollouts and ×8 inference."""

import time
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ContractError
from .instances import CVRP, TSP, augment_x8, distance_matrix
from .model import Batch

MODE_LABELS = {
    "single": "greedy-single",
    "multi": "greedy-multi",
    "sample": "sample",
    "aug8": "augmented×8",
}


@dataclass
class Trajectory:
    order: np.ndarray
    step_logps: np.ndarray
    length: float

    @property
    def ret(self):
        return -self.length


@dataclass
class RolloutBatch:
    instance_id: str
    trajectories: list
    mode: str
    seconds: float = 0.0

    def best(self):
        return min(self.trajectories, key=lambda t: t.length)

    def lengths(self):
        return np.array([t.length for t in self.trajectories])


@dataclass
class Construction:
    """Raw batched rollout output.

    ``orders`` (B, P, T) padded with trailing depots for CVRP; ``logp`` (B, P)
    is the differentiable solution log-probability when built with grad.
    """

    orders: np.ndarray
    logp: Tensor
    step_logps: np.ndarray
    lengths: np.ndarray
    starts: np.ndarray = None


@dataclass
class DecoderContext:
    step: int
    first: int
    last: int
    visited: np.ndarray
    remaining: int = None
    extra: dict = field(default_factory=dict)


# ---------------------------------------------------------------- masking rules

def cvrp_mask(visited, cur, load, demand_int, done):
    """Excluded nodes for CVRP (B, P, M).

    Visited customers and customers whose demand exceeds the remaining load
    are excluded; the depot is excluded right after a depot visit; finished
    trajectories may only sit at the depot.
    """
    mask = visited | (demand_int[:, None, :] > load[..., None])
    mask[..., 0] = cur == 0
    if done.any():
        mask[done] = True
        mask[done, 0] = False
    return mask


def default_starts(batch, count=None):
    """(B, P) first decisions: node p for TSP, customer p + 1 for CVRP."""
    lo = 0 if batch.problem == TSP else 1
    pool = np.arange(lo, batch.num_nodes)
    count = len(pool) if count is None else count
    return np.broadcast_to(np.resize(pool, count), (batch.size, count)).copy()


def _select(lp, mask, how, rng):
    z = np.where(mask, -np.inf, lp)
    if how == "greedy":
        return z.argmax(-1)
    p = np.exp(z)
    c = np.cumsum(p, axis=-1)
    r = rng.random(c.shape[:-1] + (1,)) * c[..., -1:]
    idx = (c <= r).sum(-1)
    bad = idx >= c.shape[-1]
    if bad.any():
        # r rounded up to the total: take the last admissible node
        idx[bad] = (c.shape[-1] - 1) - np.argmax(~mask[bad][:, ::-1], axis=-1)
    return idx


def sequence_lengths(coords, orders):
    """Closed-walk lengths of (B, P, T) node sequences over (B, M, 2) coordinates."""
    bidx = np.arange(coords.shape[0])[:, None, None]
    pts = coords[bidx, orders]
    legs = np.sqrt(((pts[..., 1:, :] - pts[..., :-1, :]) ** 2).sum(-1)).sum(-1)
    close = np.sqrt(((pts[..., 0, :] - pts[..., -1, :]) ** 2).sum(-1))
    return legs + close


def construct(model, batch, starts=None, select="greedy", rng=None, actions=None, on_step=None):
    """Roll out P trajectories per instance in lock step.

    ``select`` is ``"greedy"`` (argmax, ties to the lowest index),
    ``"sample"`` (needs ``rng``) or ``"forced"`` (replays ``actions`` (B, P, T)).
    ``on_step(t, probs, mask)`` sees exact step distributions, for checking.
    """
    if select == "sample" and rng is None:
        raise ContractError("sampling needs an rng")
    if select == "forced" and actions is None:
        raise ContractError("forced selection needs actions")
    starts = default_starts(batch) if starts is None else np.asarray(starts)
    B, P = starts.shape
    M = batch.num_nodes
    bidx, pidx = np.arange(B)[:, None], np.arange(P)[None, :]
    enc = model.encode(batch)
    dec = model.decoder(batch, enc, starts)

    visited = np.zeros((B, P, M), dtype=bool)
    visited[bidx, pidx, starts] = True
    if batch.problem == TSP:
        cur = starts.copy()
        orders = [starts]
        steps = M - 1
        load = done = None
    else:
        cur = starts.copy()
        orders = [np.zeros_like(starts), starts]
        load = batch.capacity[:, None] - batch.demand_int[bidx, starts]
        done = visited[..., 1:].all(-1)
        steps = None

    total, picks, t = None, [], 0
    while (t < steps) if steps is not None else not done.all():
        if batch.problem == TSP:
            mask = visited.copy()
            u = dec.logits(cur, mask)
        else:
            mask = cvrp_mask(visited, cur, load, batch.demand_int, done)
            u = dec.logits(cur, mask, load / batch.capacity[:, None])
        lp = ag.log_softmax_masked(u, mask)
        if on_step is not None:
            on_step(t, ag.softmax_masked(u.data, mask).data, mask)
        if select == "forced":
            if t >= actions.shape[-1]:
                raise ContractError("forced actions end before the solution is complete")
            chosen = np.asarray(actions[..., t])
            if np.any(mask[bidx, pidx, chosen]):
                raise ContractError(f"action at decision {t} is infeasible")
        else:
            chosen = _select(lp.data, mask, select, rng)
        term = ag.index(lp, (bidx, pidx, chosen))
        total = term if total is None else total + term
        picks.append(term.data)
        visited[bidx, pidx, chosen] = True
        if batch.problem == CVRP:
            at_depot = chosen == 0
            load = np.where(at_depot, batch.capacity[:, None], load - batch.demand_int[bidx, chosen])
            done = visited[..., 1:].all(-1)
        cur = chosen
        orders.append(chosen)
        t += 1

    if select == "forced" and t != actions.shape[-1]:
        raise ContractError("forced actions continue past a complete solution")
    if batch.problem == CVRP:
        orders.append(np.zeros_like(starts))
    orders = np.stack(orders, axis=-1)
    if total is None:
        total = Tensor(np.zeros((B, P)))
    step_logps = np.stack(picks, axis=-1) if picks else np.zeros((B, P, 0))
    return Construction(orders, total, step_logps, sequence_lengths(batch.coords, orders), starts)


# ---------------------------------------------------------------- single-instance API

def trim_order(problem, order):
    order = np.asarray(order)
    if problem == TSP:
        return order.copy()
    # drop padding: consecutive depot repeats
    keep = np.ones(len(order), dtype=bool)
    keep[1:] = ~((order[1:] == 0) & (order[:-1] == 0))
    return order[keep]


def validate_order(inst, order):
    """Raise ContractError naming the first violated feasibility rule."""
    order = [int(v) for v in order]
    M = inst.num_nodes
    if any(v < 0 or v >= M for v in order):
        raise ContractError(f"node index out of range in {order}")
    if inst.problem == TSP:
        if sorted(order) != list(range(M)):
            seen = set()
            for pos, v in enumerate(order):
                if v in seen:
                    raise ContractError(f"node {v} visited twice (position {pos})")
                seen.add(v)
            raise ContractError(f"nodes never visited: {sorted(set(range(M)) - seen)}")
        return
    if not order or order[0] != 0 or order[-1] != 0:
        raise ContractError("a CVRP solution must start and end at the depot")
    seen, load = set(), 0
    for pos, v in enumerate(order[1:], 1):
        if v == 0:
            if order[pos - 1] == 0:
                raise ContractError(f"empty route at position {pos}")
            load = 0
            continue
        if v in seen:
            raise ContractError(f"customer {v} visited twice (position {pos})")
        seen.add(v)
        load += int(inst.demands[v])
        if load > inst.capacity:
            raise ContractError(f"capacity exceeded at position {pos} (load {load} > {inst.capacity})")
    missing = set(range(1, M)) - seen
    if missing:
        raise ContractError(f"customers never visited: {sorted(missing)}")


def tour_length(inst, order, validate=True):
    """Closed tour length (TSP) or total route length including depot legs (CVRP)."""
    if validate:
        validate_order(inst, order)
    d = distance_matrix(inst)
    order = np.asarray(order)
    return float(d[order[:-1], order[1:]].sum() + d[order[-1], order[0]])


def _mode_setup(batch, mode):
    if mode == "single":
        return "greedy", default_starts(batch, 1)
    if mode == "multi":
        return "greedy", default_starts(batch)
    if mode == "sample":
        return "sample", default_starts(batch)
    raise ContractError(f"unknown rollout mode {mode!r}")


def _trajectories(inst, con, b):
    out = []
    for p in range(con.orders.shape[1]):
        order = trim_order(inst.problem, con.orders[b, p])
        out.append(Trajectory(order, con.step_logps[b, p].copy(), float(con.lengths[b, p])))
    return out


def rollout_many(model, instances, mode="multi", seed=None, chunk=64):
    """Roll out a list of instances (grouped by size, batched), preserving order."""
    if mode == "aug8":
        return [solve_augmented(model, inst)[2] for inst in instances]
    rng = np.random.default_rng(seed) if mode == "sample" else None
    results = [None] * len(instances)
    groups = {}
    for i, inst in enumerate(instances):
        groups.setdefault(inst.num_nodes, []).append(i)
    with ag.no_grad():
        for idxs in groups.values():
            for lo in range(0, len(idxs), chunk):
                part = idxs[lo:lo + chunk]
                t0 = time.perf_counter()
                batch = Batch.from_instances([instances[i] for i in part])
                how, starts = _mode_setup(batch, mode)
                con = construct(model, batch, starts, how, rng)
                per = (time.perf_counter() - t0) / len(part)
                for b, i in enumerate(part):
                    results[i] = RolloutBatch(instances[i].id, _trajectories(instances[i], con, b), MODE_LABELS[mode], per)
    return results


def rollout(model, inst, mode="multi", seed=None):
    return rollout_many(model, [inst], mode, seed)[0]


def solve_augmented(model, inst, mode="multi"):
    """Solve all 8 dihedral images; lengths are measured on the original instance.

    Returns (best trajectory, per-image table, RolloutBatch of image bests).
    """
    t0 = time.perf_counter()
    images = augment_x8(inst)
    per_image = rollout_many(model, images, mode)
    table, bests = [], []
    for k, rb in enumerate(per_image):
        best = min(rb.trajectories, key=lambda tr: tr.length)
        length = tour_length(inst, best.order, validate=False)
        bests.append(Trajectory(best.order, best.step_logps, length))
        table.append({"image": k, "length": length, "image_length": best.length})
    winner = min(bests, key=lambda tr: tr.length)
    rb = RolloutBatch(inst.id, bests, MODE_LABELS["aug8"], time.perf_counter() - t0)
    return winner, table, rb


def log_prob_of_solution(model, inst, order):
    """Differentiable ``sum_t log p(pi_t | X, pi_<t)`` along a given feasible solution."""
    validate_order(inst, order)
    order = np.asarray(order)
    batch = Batch.from_instances([inst])
    if inst.problem == TSP:
        starts, actions = order[:1], order[1:]
    else:
        starts, actions = order[1:2], order[2:-1]
    con = construct(model, batch, starts[None, :], "forced", actions=actions[None, None, :])
    return ag.reshape(con.logp, ())


def decoder_step(model, inst, ctx):
    """Next-node distribution (M,) for a single partial solution."""
    batch = Batch.from_instances([inst])
    enc = model.encode(batch)
    first = np.array([[ctx.first]])
    dec = model.decoder(batch, enc, first)
    cur = np.array([[ctx.last]])
    visited = np.asarray(ctx.visited, dtype=bool)[None, None, :]
    if inst.problem == TSP:
        mask = visited.copy()
        u = dec.logits(cur, mask)
    else:
        load = np.array([[ctx.remaining]])
        done = visited[..., 1:].all(-1)
        mask = cvrp_mask(visited, cur, load, batch.demand_int, done)
        u = dec.logits(cur, mask, load / batch.capacity[:, None])
    return ag.softmax_masked(u, mask)[0, 0], u.data[0, 0], mask[0, 0]
