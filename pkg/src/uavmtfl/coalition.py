"""UAV-EV association by coalition formation.

A partition assigns each UAV to one EV (task). Starting from any valid
partition, UAVs transfer to another cluster or swap with a UAV of another
cluster whenever that strictly raises the network utility

    U = lam * sum_m alpha_m * sum_{n in S_m} rho_n - (1 - lam) * T*

where T* is the min-max round time of the induced bandwidth allocation.
Strict improvement over a finite set of partitions guarantees termination.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .allocation import AllocationError, UavLoad, solve


@dataclass(frozen=True)
class Partition:
    assignment: tuple
    n_clusters: int

    def __post_init__(self):
        object.__setattr__(self, "assignment", tuple(int(a) for a in self.assignment))
        if any(not 0 <= a < self.n_clusters for a in self.assignment):
            raise ValueError("assignment refers to a cluster that does not exist")

    @classmethod
    def from_clusters(cls, clusters) -> "Partition":
        n = sum(len(c) for c in clusters)
        a = [-1] * n
        for m, members in enumerate(clusters):
            for u in members:
                if a[u] != -1:
                    raise ValueError(f"UAV {u} appears in two clusters")
                a[u] = m
        if -1 in a:
            raise ValueError("clusters do not cover every UAV")
        return cls(tuple(a), len(clusters))

    @property
    def clusters(self) -> list[frozenset]:
        out = [set() for _ in range(self.n_clusters)]
        for n, m in enumerate(self.assignment):
            out[m].add(n)
        return [frozenset(c) for c in out]

    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.n_clusters)

    def is_valid(self, delta) -> bool:
        return bool(np.all(self.sizes() >= np.asarray(delta)))

    def moved(self, uav: int, target: int) -> "Partition":
        a = list(self.assignment)
        a[uav] = target
        return Partition(tuple(a), self.n_clusters)

    def swapped(self, u: int, v: int) -> "Partition":
        a = list(self.assignment)
        a[u], a[v] = a[v], a[u]
        return Partition(tuple(a), self.n_clusters)

    def beta(self) -> np.ndarray:
        """Association indicators, shape (M, N)."""
        b = np.zeros((self.n_clusters, len(self.assignment)), dtype=int)
        b[list(self.assignment), np.arange(len(self.assignment))] = 1
        return b


@dataclass
class UtilityContext:
    task_weights: np.ndarray
    rho: np.ndarray
    lam: float
    loads_builder: Callable[[Partition], list]
    delta: tuple = ()
    cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.task_weights = np.asarray(self.task_weights, dtype=float)
        self.rho = np.asarray(self.rho, dtype=float)
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")
        if not self.delta:
            self.delta = (1,) * len(self.task_weights)

    @property
    def n_tasks(self) -> int:
        return len(self.task_weights)

    @property
    def n_uavs(self) -> int:
        return len(self.rho)


def association_score(partition: Partition, ctx: UtilityContext) -> float:
    return float(np.sum(ctx.task_weights[list(partition.assignment)] * ctx.rho))


def round_time(partition: Partition, ctx: UtilityContext) -> float:
    return solve(ctx.loads_builder(partition)).t_star


def utility(partition: Partition, ctx: UtilityContext) -> float:
    """Network utility; ``-inf`` when the allocation is infeasible."""
    key = partition.assignment
    if key in ctx.cache:
        return ctx.cache[key]
    value = ctx.lam * association_score(partition, ctx)
    if ctx.lam < 1.0:
        try:
            value -= (1.0 - ctx.lam) * round_time(partition, ctx)
        except AllocationError:
            value = -math.inf
    ctx.cache[key] = value
    return value


@dataclass(frozen=True)
class Move:
    kind: str
    actors: tuple
    before: float
    after: float


def transfer_move(partition: Partition, uav: int, target: int, ctx: UtilityContext):
    """Try moving ``uav`` to ``target``; returns (accepted, partition, move or None)."""
    source = partition.assignment[uav]
    if target == source or partition.sizes()[source] <= ctx.delta[source]:
        return False, partition, None
    cand = partition.moved(uav, target)
    before, after = utility(partition, ctx), utility(cand, ctx)
    if after > before:
        return True, cand, Move("transfer", (uav, source, target), before, after)
    return False, partition, None


def exchange_move(partition: Partition, uav_a: int, uav_b: int, ctx: UtilityContext):
    """Try swapping the clusters of two UAVs; returns (accepted, partition, move or None)."""
    if partition.assignment[uav_a] == partition.assignment[uav_b]:
        return False, partition, None
    cand = partition.swapped(uav_a, uav_b)
    before, after = utility(partition, ctx), utility(cand, ctx)
    if after > before:
        return True, cand, Move("exchange", (uav_a, uav_b), before, after)
    return False, partition, None


def _candidate_moves(partition: Partition, ctx: UtilityContext):
    N, M = ctx.n_uavs, ctx.n_tasks
    for n in range(N):
        for m in range(M):
            if m != partition.assignment[n]:
                yield "transfer", (n, m)
    for a, b in itertools.combinations(range(N), 2):
        if partition.assignment[a] != partition.assignment[b]:
            yield "exchange", (a, b)


def _try(kind, actors, partition, ctx):
    if kind == "transfer":
        return transfer_move(partition, *actors, ctx)
    return exchange_move(partition, *actors, ctx)


def is_stable(partition: Partition, ctx: UtilityContext) -> tuple[bool, int]:
    """Exhaustive one-move check; returns (stable, number of moves examined)."""
    checked = 0
    for kind, actors in _candidate_moves(partition, ctx):
        checked += 1
        if _try(kind, actors, partition, ctx)[0]:
            return False, checked
    return True, checked


@dataclass
class StabilizeResult:
    partition: Partition
    log: list
    truncated: bool
    sweeps: int
    certificate: int  # moves examined in the final, clean sweep
    utility: float = math.nan


def stabilize(initial: Partition, ctx: UtilityContext, max_sweeps: int = 100) -> StabilizeResult:
    """First-improvement hill climbing: transfers UAV by UAV, then pairwise exchanges."""
    if not initial.is_valid(ctx.delta):
        raise ValueError("initial partition violates the minimum cluster sizes")
    part, log = initial, []
    for sweep in range(1, max_sweeps + 1):
        changed = False
        checked = 0
        for n in range(ctx.n_uavs):
            for m in range(ctx.n_tasks):
                checked += 1
                ok, part, mv = transfer_move(part, n, m, ctx)
                if ok:
                    log.append(mv)
                    changed = True
        for a, b in itertools.combinations(range(ctx.n_uavs), 2):
            checked += 1
            ok, part, mv = exchange_move(part, a, b, ctx)
            if ok:
                log.append(mv)
                changed = True
        if not changed:
            return StabilizeResult(part, log, False, sweep, checked, utility(part, ctx))
    return StabilizeResult(part, log, True, max_sweeps, 0, utility(part, ctx))


def brute_force_optimum(n_uavs: int, ctx: UtilityContext, limit: int = 2_000_000) -> Partition:
    """Exact argmax of the utility over every valid partition (first in lexicographic order)."""
    M = ctx.n_tasks
    if M**n_uavs > limit:
        raise ValueError(f"{M}^{n_uavs} partitions exceed the enumeration limit {limit}")
    best, best_u = None, -math.inf
    for a in itertools.product(range(M), repeat=n_uavs):
        p = Partition(a, M)
        if not p.is_valid(ctx.delta):
            continue
        u = utility(p, ctx)
        if best is None or u > best_u:
            best, best_u = p, u
    if best is None:
        raise ValueError("no partition satisfies the minimum cluster sizes")
    return best


def random_partition(n_uavs: int, n_clusters: int, rng: np.random.Generator, delta=None) -> Partition:
    """Uniformly random assignment honouring the minimum cluster sizes."""
    delta = (1,) * n_clusters if delta is None else tuple(delta)
    if sum(delta) > n_uavs:
        raise ValueError("not enough UAVs for the minimum cluster sizes")
    order = rng.permutation(n_uavs)
    a = np.empty(n_uavs, dtype=int)
    pos = 0
    for m, k in enumerate(delta):
        a[order[pos : pos + k]] = m
        pos += k
    a[order[pos:]] = rng.integers(0, n_clusters, size=n_uavs - pos)
    return Partition(tuple(a), n_clusters)


def nearest_partition(distances: np.ndarray, delta=None) -> Partition:
    """Each UAV joins its nearest EV; under-filled clusters take the closest spare UAVs."""
    M, N = distances.shape
    delta = (1,) * M if delta is None else tuple(delta)
    a = np.argmin(distances, axis=0)
    while True:
        sizes = np.bincount(a, minlength=M)
        short = [m for m in range(M) if sizes[m] < delta[m]]
        if not short:
            break
        m = short[0]
        spare = [n for n in range(N) if sizes[a[n]] > delta[a[n]]]
        if not spare:
            raise ValueError("not enough UAVs for the minimum cluster sizes")
        n = min(spare, key=lambda u: (distances[m, u] - distances[a[u], u], u))
        a[n] = m
    return Partition(tuple(a), M)


def move_log_json(log: list[Move]) -> str:
    return json.dumps(
        [{"kind": mv.kind, "actors": list(mv.actors), "before": mv.before, "after": mv.after} for mv in log]
    )


def loads_builder_for(gains: np.ndarray, q_bits, t_comp: np.ndarray, power, n0: float, bandwidth_hz: float):
    """Loads builder from an (M, N) gain matrix and (M, N) computation times."""
    power = np.broadcast_to(np.asarray(power, dtype=float), (gains.shape[1],))

    def build(partition: Partition) -> list[UavLoad]:
        return [
            UavLoad(float(q_bits[m]), float(t_comp[m, n]), float(power[n]), float(gains[m, n]), n0, bandwidth_hz)
            for n, m in enumerate(partition.assignment)
        ]

    return build
