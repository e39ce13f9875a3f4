"""Build a simulated network from a config, run it, and write the artifacts.

Outputs of :func:`run_experiment` in ``out_dir``:

``metrics.csv``
    one row per (round, task); columns in :data:`METRICS_COLUMNS`.
``summary.json``
    final and round-averaged metrics, total time and stability certificates.
``config.txt``
    the resolved configuration, loadable with ``--config``.
``*.png``
    accuracy and round-time figures.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import dataset, nn
from .channel import ChannelParams, ComputeProfile, gain_matrix, random_topology
from .config import ConfigError, ExperimentConfig, serialize_config
from .federation import Environment, RoundRecord, initial_state, run_round

log = logging.getLogger(__name__)

METRICS_COLUMNS = {
    "round": "round index t, starting at 0",
    "task": "task / EV index m",
    "loss": "validation cross-entropy of task m after the round (empty in timing-only mode)",
    "accuracy": "validation accuracy of task m after the round (empty in timing-only mode)",
    "psi": "combined attention weight used for this round's association",
    "psi_loss": "loss-history softmax component",
    "psi_shapley": "Shapley softmax component",
    "phi": "task Shapley value measured this round (0 when not computed)",
    "n_uavs": "UAVs associated with task m this round",
    "data_assoc": "training samples associated with task m this round",
    "gamma_sum": "sum of bandwidth fractions over scheduled UAVs",
    "t_round": "round completion time T_t in seconds",
    "t_total": "cumulative completion time up to and including this round",
    "energy_max": "largest per-UAV energy this round in joules",
    "dropped": "UAVs excluded for exceeding the energy budget (semicolon separated)",
    "utility": "network utility of the chosen association",
    "energy_uav<n>": "per-UAV energy this round in joules, one column per UAV",
}


class DataFallbackWarning(UserWarning):
    pass


@dataclass
class LoadedData:
    images: np.ndarray
    labels: np.ndarray
    source: str


def load_data(config: ExperimentConfig) -> LoadedData:
    """Modified digits from IDX files or the synthetic generator.

    A missing or unreadable IDX source falls back to synthetic digits with a
    warning, unless ``strict_data`` is set.
    """
    corpus, source = None, "synthetic"
    if config.data == "idx":
        try:
            if not config.idx_images or not config.idx_labels:
                raise dataset.DataError("idx_images and idx_labels must both be set")
            corpus = dataset.load_idx(config.idx_images, config.idx_labels)
            source = "idx"
            if len(corpus) > config.n_samples:
                corpus = dataset.DigitCorpus(corpus.images[: config.n_samples], corpus.labels[: config.n_samples])
        except (OSError, dataset.DataError) as exc:
            if config.strict_data:
                raise
            import warnings

            warnings.warn(f"falling back to synthetic digits: {exc}", DataFallbackWarning, stacklevel=2)
            corpus = None
    if corpus is None:
        corpus = dataset.synthetic_digits(config.n_samples, config.seed)
    mt = dataset.modify(corpus, config.seed)
    return LoadedData(mt.images, mt.labels, source)


def _task_classes(config: ExperimentConfig) -> tuple:
    if config.n_tasks > 2:
        raise ConfigError("n_tasks: the modified-digit data carries two tasks (digit, angle)")
    return (10,) * config.n_tasks


def build_environment(config: ExperimentConfig, data: LoadedData | None = None):
    """Return ``(Environment, calibration inputs or None)`` for ``config``."""
    M, N = config.n_tasks, config.n_uavs
    classes = _task_classes(config)
    arch = nn.ARCHITECTURES[config.arch]((28, 28, 3), classes)
    channel = ChannelParams(
        config.los_a, config.los_b, config.eta_los_db, config.eta_nlos_db,
        config.carrier_hz, config.n0_dbm_hz, config.bandwidth_hz,
    )
    topo = random_topology(M, N, np.random.default_rng([config.seed, 0x70]), config.radius, config.altitude)
    crng = np.random.default_rng([config.seed, 0xC0])
    cycles = crng.uniform(config.c_min, config.c_max, size=(M, N))
    cpu = crng.uniform(config.f_min_hz, config.f_max_hz, size=N)
    profile = ComputeProfile(cycles, cpu, config.energy_coeff, config.local_steps, config.batch_size)
    probe = nn.init_model(arch, np.random.default_rng(0))
    q_bits = np.array([probe.n_params(m) * config.bits_per_param for m in range(M)], dtype=float)

    pspec = dataset.PartitionSpec(config.alpha1, config.alpha2, config.seed)
    train_x = train_y = None
    uav_indices, val, calib = [], [], None
    if config.timing_only:
        n_train = config.n_samples - M * config.val_per_ev
        sizes = dataset.dirichlet_sizes(n_train, N, config.alpha1, np.random.default_rng([config.seed, 0xD1]))
    else:
        if data is None:
            data = load_data(config)
        labels = data.labels[:, :M]
        val_sets, rest = dataset.ev_validation_split(len(labels), M, config.val_per_ev, config.seed)
        parts = dataset.dirichlet_partition(labels[rest], N, pspec)
        uav_indices = [rest[p.indices] for p in parts]
        sizes = np.array([len(ix) for ix in uav_indices])
        train_x, train_y = data.images, labels
        val = [(data.images[v], labels[v]) for v in val_sets]
        calib = np.concatenate([x for x, _ in val]) if val else None
    if np.any(sizes < 1):
        raise ConfigError("n_samples: too small for every UAV to receive data")

    env = Environment(
        arch=arch,
        strategy=config.strategy_spec,
        topology=topo,
        channel=channel,
        profile=profile,
        gains=gain_matrix(topo, channel),
        q_bits=q_bits,
        uav_sizes=np.asarray(sizes, dtype=float),
        eta=config.eta,
        lam=config.lam,
        p_max=config.p_max,
        e_max=config.e_max,
        delta=config.deltas,
        seed=config.seed,
        shapley_every=config.shapley_every,
        train_x=train_x,
        train_y=train_y,
        uav_indices=uav_indices,
        val=val,
    )
    return env, calib


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    return "" if math.isnan(x) else repr(x)


def metrics_header(n_uavs: int) -> list[str]:
    base = [c for c in METRICS_COLUMNS if c != "energy_uav<n>"]
    return base + [f"energy_uav{n}" for n in range(n_uavs)]


def metrics_rows(rec: RoundRecord, t_total: float):
    counts = np.bincount(rec.assignment, minlength=len(rec.data_assoc))
    for m in range(len(rec.data_assoc)):
        yield [
            _fmt(rec.round), _fmt(m), _fmt(rec.losses[m]), _fmt(rec.accuracies[m]),
            _fmt(rec.weights.psi[m]), _fmt(rec.weights.psi_loss[m]), _fmt(rec.weights.psi_shapley[m]),
            _fmt(rec.phi[m]), _fmt(counts[m]), _fmt(rec.data_assoc[m]), _fmt(rec.gamma_sum),
            _fmt(rec.t_round), _fmt(t_total), _fmt(np.max(rec.energies)),
            ";".join(str(n) for n in rec.dropped), _fmt(rec.utility),
        ] + [_fmt(e) for e in rec.energies]


@dataclass
class RunResult:
    records: list
    accuracy: np.ndarray  # (rounds, M)
    t_rounds: np.ndarray
    out_dir: Path | None

    @property
    def total_time(self) -> float:
        return float(np.sum(self.t_rounds))

    def summary(self) -> dict:
        acc = self.accuracy
        mean_acc = acc.mean(axis=1) if acc.size else np.array([])
        trained = acc.size and not np.all(np.isnan(acc))
        out = {
            "rounds": len(self.records),
            "total_time": self.total_time,
            "mean_round_time": float(np.mean(self.t_rounds)) if len(self.t_rounds) else math.nan,
            "dropped_uav_rounds": int(sum(len(r.dropped) for r in self.records)),
            "stable_rounds": int(sum(r.stable for r in self.records)),
            "stability_certificates": [int(r.certificate) for r in self.records],
        }
        if trained:
            out.update(
                final_accuracy=[float(a) for a in acc[-1]],
                final_average_accuracy=float(mean_acc[-1]),
                average_accuracy=float(np.mean(mean_acc)),
                mean_task_variance=float(np.mean(acc.var(axis=1))),
            )
        return out


def run_experiment(config: ExperimentConfig, out_dir=None, data: LoadedData | None = None,
                   figures: bool = True, progress=None) -> RunResult:
    """Run ``config.rounds`` rounds; write artifacts to ``out_dir`` when given."""
    started = time.perf_counter()
    env, calib = build_environment(config, data)
    state = initial_state(env, config.varpi, config.kappa, calib)
    out = Path(out_dir) if out_dir is not None else None
    writer = fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(serialize_config(config))
        fh = open(out / "metrics.csv", "w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(metrics_header(env.n_uavs))
    records, t_total = [], 0.0
    try:
        for _ in range(config.rounds):
            state, rec = run_round(state, env)
            t_total += rec.t_round
            records.append(rec)
            if writer is not None:
                writer.writerows(metrics_rows(rec, t_total))
            if out is not None and config.checkpoint_every and state.round % config.checkpoint_every == 0:
                save_state(state, env, out / "checkpoints", state.round)
            if progress is not None:
                progress(rec)
    finally:
        if fh is not None:
            fh.close()
    result = RunResult(
        records,
        np.array([r.accuracies for r in records]).reshape(len(records), env.n_tasks),
        np.array([r.t_round for r in records]),
        out,
    )
    if out is not None:
        summary = {"strategy": config.strategy, "seed": config.seed, **result.summary()}
        (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
        if figures:
            from .report import plot_run

            plot_run(result, out)
    log.info("%s seed %d: %d rounds in %.1f s", config.strategy, config.seed, config.rounds,
             time.perf_counter() - started)
    return result


def save_state(state, env: Environment, directory: Path, round_: int) -> list[Path]:
    """One checkpoint per task (extractors may differ when they are not shared)."""
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for m in range(env.n_tasks):
        p = directory / f"round{round_:04d}_task{m}.npz"
        nn.save_checkpoint(state.model(env.arch, m), p)
        paths.append(p)
    return paths


def read_metrics(path) -> tuple[np.ndarray, np.ndarray]:
    """(accuracy[rounds, M], t_round[rounds]) from a metrics CSV."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path}: no rows")
    rounds = max(int(r["round"]) for r in rows) + 1
    tasks = max(int(r["task"]) for r in rows) + 1
    acc = np.full((rounds, tasks), math.nan)
    t = np.zeros(rounds)
    for r in rows:
        i, m = int(r["round"]), int(r["task"])
        acc[i, m] = float(r["accuracy"]) if r["accuracy"] else math.nan
        t[i] = float(r["t_round"])
    return acc, t
