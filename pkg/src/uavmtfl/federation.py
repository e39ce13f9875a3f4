"""Round driver: association, allocation, local SGD, aggregation and fusion.

One round:

1. task weights from the loss and Shapley trackers;
2. UAV-EV association (coalition game, random or nearest);
3. bandwidth allocation and the per-UAV energy check;
4. K local SGD steps per UAV from its EV's broadcast model;
5. per-task aggregation of the cumulative gradients;
6. fusion of the task extractors, weighted by associated data;
7. EV-side validation, Shapley values and tracker updates.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import allocation, attention, coalition, nn
from .channel import ChannelParams, ComputeProfile, Topology, max_feasible_power

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# aggregation and fusion


def aggregate_task(uploads, shared_prev, head_prev, eta: float):
    """Apply the data-weighted mean of the uploaded cumulative gradients.

    ``uploads`` is a list of ``(Gradients, D_n)``. Returns the task's updated
    extractor and head parameter tuples.
    """
    if not uploads:
        raise ValueError("no uploads to aggregate")
    total = float(sum(d for _, d in uploads))
    if total <= 0:
        raise ValueError("total associated data is zero")
    weights = [d / total for _, d in uploads]
    shared = []
    for i, w0 in enumerate(shared_prev):
        g = sum(w * up.shared[i] for w, (up, _) in zip(weights, uploads))
        shared.append(w0 - eta * g)
    head = []
    for i, w0 in enumerate(head_prev):
        g = sum(w * up.head[i] for w, (up, _) in zip(weights, uploads))
        head.append(w0 - eta * g)
    return tuple(shared), tuple(head)


def fuse_extractors(per_task) -> tuple:
    """Weighted mean of task extractors; ``per_task`` is a list of ``(params, D_m)``."""
    if not per_task:
        raise ValueError("nothing to fuse")
    total = float(sum(d for _, d in per_task))
    if total <= 0:
        raise ValueError("total associated data is zero")
    shapes = [tuple(a.shape for a in p) for p, _ in per_task]
    if any(s != shapes[0] for s in shapes):
        raise ValueError("extractor shapes differ between tasks")
    if len(per_task) == 1:
        return tuple(per_task[0][0])
    out = []
    for i in range(len(per_task[0][0])):
        out.append(sum((d / total) * p[i] for p, d in per_task))
    return tuple(out)


# ---------------------------------------------------------------------------
# convergence-bound diagnostic


@dataclass(frozen=True)
class DiagnosticConstants:
    sigma_s: float
    sigma_u: float
    eps_s: float
    eps_u: float
    l_s: float
    l_u: float
    l_su: float
    l_us: float
    low_confidence: bool = False

    def __post_init__(self):
        for name in ("sigma_s", "sigma_u", "eps_s", "eps_u", "l_s", "l_u", "l_su", "l_us"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


def omegas(c: DiagnosticConstants, eta: float, K: int) -> tuple[float, float, float, float]:
    o1 = (4 * eta * K + 16 * K**2 * c.l_su) * c.eps_s**2 + 4 * eta * K * c.eps_u**2
    o2 = 8 * K**2 * c.sigma_s * c.l_su * c.eps_s + 4 * K * c.eps_s**2
    o4 = ((K + 1) * (c.l_u * c.eps_u + c.l_us * c.eps_s) / 2 + c.sigma_u) ** 2 + (
        (K + 1) * (c.l_s * c.eps_s + c.l_su * c.eps_u) / 2 + c.sigma_s
    ) ** 2
    o3 = K * c.sigma_s * (c.eps_s + 2 * K * c.sigma_s * c.l_su) + eta * K / 2 * o4
    return o1, o2, o3, o4


def convergence_bound(consts: DiagnosticConstants, eta: float, K: int, d_assoc: float, d_total: float,
                   grad_norm_sq: float | None = None) -> float:
    """Computable part of the per-round loss-change bound for one task.

    Returns ``(D - D_assoc)^2 / D^2 * O1 + (D - D_assoc) / D * O2 + O3``. When
    an estimate of ``|grad_s F|^2 + |grad_u F|^2`` is supplied, the descent term
    ``-eta K / 2 * grad_norm_sq`` is added.
    """
    if d_total <= 0 or not 0 <= d_assoc <= d_total:
        raise ValueError("need 0 <= D_assoc <= D and D > 0")
    limit_den = K**2 * (consts.l_u + 2 * consts.l_su)
    if limit_den > 0 and eta >= 2.0 / limit_den:
        warnings.warn(f"learning rate {eta} violates the bound's condition eta < {2.0 / limit_den:.3g}")
    o1, o2, o3, _ = omegas(consts, eta, K)
    gap = (d_total - d_assoc) / d_total
    bound = gap**2 * o1 + gap * o2 + o3
    if grad_norm_sq is not None:
        bound -= eta * K / 2 * grad_norm_sq
    return bound


def _norm(v):
    return float(np.sqrt(np.dot(v, v)))


def estimate_constants(grad_fn, shared: np.ndarray, head: np.ndarray, batches, rng: np.random.Generator,
                       n_probe: int = 8, radius: float = 1e-3) -> DiagnosticConstants:
    """Empirical stand-ins for the bound's constants (estimates, not certified bounds).

    ``grad_fn(shared, head, batch) -> (g_shared, g_head)`` works on flat
    vectors. Noise levels come from the spread of per-batch gradients, gradient
    norms from their maximum, and Lipschitz constants from power-iteration
    style probes of gradient differences on the pooled batches.
    """
    if len(batches) < 2:
        raise ValueError("need at least two batches")
    gs, gu = zip(*(grad_fn(shared, head, b) for b in batches))
    gs, gu = np.array(gs), np.array(gu)
    ms, mu = gs.mean(axis=0), gu.mean(axis=0)
    sigma_s = math.sqrt(np.mean(np.sum((gs - ms) ** 2, axis=1)))
    sigma_u = math.sqrt(np.mean(np.sum((gu - mu) ** 2, axis=1)))
    eps_s = float(np.max(np.linalg.norm(gs, axis=1)))
    eps_u = float(np.max(np.linalg.norm(gu, axis=1)))

    def pooled(s, h):
        parts = [grad_fn(s, h, b) for b in batches]
        return np.mean([p[0] for p in parts], axis=0), np.mean([p[1] for p in parts], axis=0)

    base_s, base_u = pooled(shared, head)

    def probe(move_shared: bool):
        """Max gradient-change ratios when perturbing one block; returns (to shared grad, to head grad)."""
        dim = shared.size if move_shared else head.size
        direction = rng.normal(size=dim)
        best_s = best_u = 0.0
        for _ in range(n_probe):
            direction /= max(_norm(direction), 1e-300)
            step = radius * direction
            s2, h2 = (shared + step, head) if move_shared else (shared, head + step)
            ds, du = pooled(s2, h2)
            ds, du = ds - base_s, du - base_u
            best_s = max(best_s, _norm(ds) / radius)
            best_u = max(best_u, _norm(du) / radius)
            nxt = ds if move_shared else du
            direction = nxt.copy() if _norm(nxt) > 0 else rng.normal(size=dim)
        return best_s, best_u

    l_s, l_us = probe(True)
    l_su, l_u = probe(False)
    # few or identical batches give a degenerate spread estimate
    flat = sigma_s <= 1e-12 * max(eps_s, 1.0) and sigma_u <= 1e-12 * max(eps_u, 1.0)
    low = len(batches) < 3 or flat
    return DiagnosticConstants(sigma_s, sigma_u, eps_s, eps_u, l_s, l_u, l_su, l_us, low)


def model_grad_fn(model: nn.SplitModel, task: int):
    """Flat-vector gradient function of the task's cross-entropy for :func:`estimate_constants`."""
    s_shapes = [a.shape for a in model.shared]
    h_shapes = [a.shape for a in model.heads[task]]

    def unflat(v, shapes):
        out, i = [], 0
        for s in shapes:
            k = int(np.prod(s))
            out.append(v[i : i + k].reshape(s))
            i += k
        return out

    def fn(shared_vec, head_vec, batch):
        x, y = batch
        m = model.replace(shared=unflat(shared_vec, s_shapes)).with_head(task, unflat(head_vec, h_shapes))
        logits, cache = nn.forward(m, task, x)
        g = nn.backward(m, task, cache, y)
        return np.concatenate([a.ravel() for a in g.shared]), np.concatenate([a.ravel() for a in g.head])

    flat_s = np.concatenate([a.ravel() for a in model.shared])
    flat_h = np.concatenate([a.ravel() for a in model.heads[task]])
    return fn, flat_s, flat_h


# ---------------------------------------------------------------------------
# round driver


@dataclass
class Environment:
    """Everything a round needs besides the evolving model state."""

    arch: nn.Architecture
    strategy: object  # config.StrategySpec
    topology: Topology
    channel: ChannelParams
    profile: ComputeProfile
    gains: np.ndarray  # (M, N)
    q_bits: np.ndarray  # (M,)
    uav_sizes: np.ndarray  # (N,)
    eta: float
    lam: float
    p_max: float
    e_max: float
    delta: tuple
    seed: int
    shapley_every: int = 1
    train_x: np.ndarray | None = None
    train_y: np.ndarray | None = None
    uav_indices: list = field(default_factory=list)
    val: list = field(default_factory=list)  # per EV: (x, y)

    @property
    def n_uavs(self) -> int:
        return len(self.uav_sizes)

    @property
    def n_tasks(self) -> int:
        return len(self.q_bits)

    @property
    def rho(self) -> np.ndarray:
        return self.uav_sizes / self.uav_sizes.sum()

    @property
    def t_comp(self) -> np.ndarray:
        p = self.profile
        return p.local_steps * p.batch_size * np.asarray(p.cycles_per_sample) / np.asarray(p.cpu_hz)[None, :]

    @property
    def e_comp(self) -> np.ndarray:
        p = self.profile
        f = np.asarray(p.cpu_hz)[None, :]
        return p.energy_coeff * p.local_steps * p.batch_size * np.asarray(p.cycles_per_sample) * f * f

    @property
    def timing_only(self) -> bool:
        return self.train_x is None


@dataclass
class GlobalState:
    shared: tuple  # per task; all entries are the same object when extractors are shared
    heads: tuple
    norm_stats: tuple
    round: int
    loss_tracker: attention.LossTracker
    shapley_tracker: attention.ShapleyTracker

    def model(self, arch: nn.Architecture, task: int) -> nn.SplitModel:
        return nn.SplitModel(arch, self.shared[task], self.heads, self.norm_stats)


def initial_state(env: Environment, varpi: float, kappa: float, calibration_x=None) -> GlobalState:
    rng = np.random.default_rng([env.seed, 0x1A17])
    model = nn.init_model(env.arch, rng)
    if calibration_x is not None and len(calibration_x):
        model = nn.calibrate_norm(model, calibration_x)
    M = env.n_tasks
    return GlobalState(
        (model.shared,) * M,
        model.heads,
        model.norm_stats,
        0,
        attention.LossTracker.start(M, varpi),
        attention.ShapleyTracker.start(M, kappa),
    )


@dataclass
class RoundRecord:
    round: int
    assignment: tuple
    weights: attention.TaskWeights
    gamma_cum: np.ndarray
    i_cum: np.ndarray
    phi: np.ndarray
    losses: np.ndarray
    accuracies: np.ndarray
    data_assoc: np.ndarray
    gammas: np.ndarray
    powers: np.ndarray
    t_round: float
    energies: np.ndarray
    dropped: tuple
    utility: float
    stable: bool = True
    certificate: int = 0
    moves: int = 0

    @property
    def gamma_sum(self) -> float:
        return float(np.sum(self.gammas))


def _round_rng(env: Environment, t: int, *tags) -> np.random.Generator:
    return np.random.default_rng([env.seed, t, *tags])


def associate(env: Environment, weights: np.ndarray, t: int):
    """Pick this round's partition; returns (partition, StabilizeResult or None, context)."""
    builder = coalition.loads_builder_for(
        env.gains, env.q_bits, env.t_comp, env.p_max, env.channel.n0, env.channel.bandwidth_hz
    )
    ctx = coalition.UtilityContext(weights, env.rho, env.lam, builder, env.delta)
    kind = env.strategy.association
    if kind == "nearest":
        return coalition.nearest_partition(env.topology.distances(), env.delta), None, ctx
    start = coalition.random_partition(env.n_uavs, env.n_tasks, _round_rng(env, t, 0xA5), env.delta)
    if kind == "random":
        return start, None, ctx
    if kind == "game":
        res = coalition.stabilize(start, ctx)
        return res.partition, res, ctx
    raise ValueError(f"unknown association {kind!r}")


def allocate(env: Environment, partition: coalition.Partition):
    """Bandwidth and power for the scheduled UAVs with the energy-budget fallback.

    Power starts at p_max. A UAV over budget has its power lowered to the
    largest feasible value and the allocation is re-solved; a UAV that cannot
    fit at any power is dropped from the round. Returns (gammas, powers,
    t_round, energies, dropped).
    """
    N = env.n_uavs
    a = np.array(partition.assignment)
    cols = np.arange(N)
    t_comp = env.t_comp[a, cols]
    e_comp = env.e_comp[a, cols]
    gains = env.gains[a, cols]
    q = env.q_bits[a]
    power = np.full(N, env.p_max)
    active = np.ones(N, dtype=bool)
    gammas = np.zeros(N)
    t_round = 0.0
    for _ in range(4):
        idx = np.flatnonzero(active)
        if len(idx) == 0:
            break
        loads = [
            allocation.UavLoad(q[n], t_comp[n], power[n], gains[n], env.channel.n0, env.channel.bandwidth_hz)
            for n in idx
        ]
        if env.strategy.bandwidth == "equal":
            res = allocation.equal_allocation(loads)
        else:
            res = allocation.solve(loads)
        gammas = np.zeros(N)
        gammas[idx] = res.gammas
        t_round = res.t_star
        changed = False
        for k, n in enumerate(idx):
            e = e_comp[n] + power[n] * q[n] / loads[k].rate(gammas[n])
            if e <= env.e_max * (1 + 1e-12):
                continue
            p = max_feasible_power(q[n], gammas[n], gains[n], env.e_max - e_comp[n], env.p_max, env.channel)
            if p is None:
                active[n] = False
            else:
                power[n] = p
            changed = True
        if not changed:
            break
    energies = np.zeros(N)
    for n in np.flatnonzero(active):
        ld = allocation.UavLoad(q[n], t_comp[n], power[n], gains[n], env.channel.n0, env.channel.bandwidth_hz)
        energies[n] = e_comp[n] + power[n] * q[n] / ld.rate(gammas[n])
    over = active & (energies > env.e_max * (1 + 1e-9))
    if np.any(over):
        active &= ~over
        energies[over] = 0.0
    dropped = tuple(int(n) for n in np.flatnonzero(~active))
    power[~active] = 0.0
    return gammas, power, t_round, energies, dropped


def _batches(env: Environment, uav: int, t: int, task: int):
    idx = env.uav_indices[uav]
    rng = _round_rng(env, t, 0xB7, uav)
    k = min(env.profile.batch_size, len(idx))
    for _ in range(env.profile.local_steps):
        pick = idx[rng.choice(len(idx), size=k, replace=False)]
        yield env.train_x[pick], env.train_y[pick, task]


def local_update(env: Environment, state: GlobalState, uav: int, task: int, t: int):
    """K local steps from the broadcast model; returns (cumulative gradient, mean batch loss)."""
    w0 = state.model(env.arch, task)
    wk, losses = nn.local_train(w0, task, _batches(env, uav, t, task), env.eta)
    g = nn.cumulative_gradient(w0, wk, env.eta, task, env.profile.local_steps)
    return g, (float(np.mean(losses)) if losses else math.nan)


def evaluate(env: Environment, state: GlobalState) -> tuple[np.ndarray, np.ndarray]:
    losses, accs = np.zeros(env.n_tasks), np.zeros(env.n_tasks)
    for m, (x, y) in enumerate(env.val):
        losses[m], accs[m] = nn.accuracy(state.model(env.arch, m), m, x, y[:, m])
    return losses, accs


def shapley_oracle(env: Environment, old_shared, task_extractors, data_assoc, heads, norm_stats):
    """Utility ``v_i(C)``: EV i's validation accuracy with the extractor fused from the tasks in C."""
    cache = {}

    def extractor(C):
        members = [(task_extractors[k], data_assoc[k]) for k in sorted(C) if data_assoc[k] > 0]
        return fuse_extractors(members) if members else old_shared

    def v(i, C):
        key = (i, C)
        if key not in cache:
            x, y = env.val[i]
            model = nn.SplitModel(env.arch, extractor(C), heads, norm_stats)
            cache[key] = nn.accuracy(model, i, x, y[:, i])[1]
        return cache[key]

    return v


def run_round(state: GlobalState, env: Environment):
    """Advance one round; returns (new state, RoundRecord)."""
    t = state.round
    M = env.n_tasks
    weights = attention.task_weights(state.loss_tracker, state.shapley_tracker)
    partition, stab, ctx = associate(env, weights.psi, t)
    gammas, powers, t_round, energies, dropped = allocate(env, partition)
    util = coalition.utility(partition, ctx)
    a = partition.assignment

    data_assoc = np.zeros(M)
    for n, m in enumerate(a):
        if n not in dropped:
            data_assoc[m] += env.uav_sizes[n]

    phi = np.zeros(M)
    if env.timing_only:
        losses = accs = np.full(M, math.nan)
        new_state = GlobalState(state.shared, state.heads, state.norm_stats, t + 1,
                                state.loss_tracker, state.shapley_tracker)
    else:
        uploads = [[] for _ in range(M)]
        for n in range(env.n_uavs):
            if n in dropped:
                continue
            g, _ = local_update(env, state, n, a[n], t)
            uploads[a[n]].append((g, float(env.uav_sizes[n])))
        task_shared, heads = [], list(state.heads)
        for m in range(M):
            if uploads[m]:
                s, h = aggregate_task(uploads[m], state.shared[m], state.heads[m], env.eta)
                task_shared.append(s)
                heads[m] = h
            else:
                task_shared.append(state.shared[m])
        heads = tuple(heads)
        if env.strategy.share_extractor:
            members = [(task_shared[m], data_assoc[m]) for m in range(M) if data_assoc[m] > 0]
            fused = fuse_extractors(members) if members else state.shared[0]
            shared = (fused,) * M
        else:
            shared = tuple(task_shared)
        new_state = GlobalState(shared, heads, state.norm_stats, t + 1,
                                state.loss_tracker, state.shapley_tracker)
        losses, accs = evaluate(env, new_state)
        new_state.loss_tracker = attention.update_loss_ema(state.loss_tracker, losses)
        uses_shapley = env.strategy.association == "game" and env.strategy.share_extractor
        if uses_shapley and env.shapley_every > 0 and t % env.shapley_every == 0:
            v = shapley_oracle(env, state.shared[0], task_shared, data_assoc, heads, state.norm_stats)
            phi = attention.shapley(v, M)
            new_state.shapley_tracker = attention.update_shapley_ema(state.shapley_tracker, phi)

    record = RoundRecord(
        round=t,
        assignment=a,
        weights=weights,
        gamma_cum=state.loss_tracker.gamma_cum,
        i_cum=state.shapley_tracker.i_cum,
        phi=phi,
        losses=losses,
        accuracies=accs,
        data_assoc=data_assoc,
        gammas=gammas,
        powers=powers,
        t_round=t_round,
        energies=energies,
        dropped=dropped,
        utility=util,
        stable=stab is None or not stab.truncated,
        certificate=stab.certificate if stab else 0,
        moves=len(stab.log) if stab else 0,
    )
    if dropped:
        log.info("round %d: UAVs %s dropped for exceeding the energy budget", t, list(dropped))
    return new_state, record
