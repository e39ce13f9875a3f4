"""Task attention weights: loss-history softmax plus task Shapley softmax."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np


def softmax(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    z = np.exp(v - v.max())
    return z / z.sum()


@dataclass(frozen=True)
class LossTracker:
    """Exponential moving average of each task's loss."""

    gamma_cum: np.ndarray
    varpi: float = 0.8

    def __post_init__(self):
        if not 0.0 <= self.varpi < 1.0:
            raise ValueError("varpi must lie in [0, 1)")
        object.__setattr__(self, "gamma_cum", np.asarray(self.gamma_cum, dtype=float))

    @classmethod
    def start(cls, n_tasks: int, varpi: float = 0.8) -> "LossTracker":
        return cls(np.zeros(n_tasks), varpi)


@dataclass(frozen=True)
class ShapleyTracker:
    """Exponential moving average of each task's Shapley value."""

    i_cum: np.ndarray
    kappa: float = 0.8

    def __post_init__(self):
        if not 0.0 <= self.kappa < 1.0:
            raise ValueError("kappa must lie in [0, 1)")
        object.__setattr__(self, "i_cum", np.asarray(self.i_cum, dtype=float))

    @classmethod
    def start(cls, n_tasks: int, kappa: float = 0.8) -> "ShapleyTracker":
        return cls(np.zeros(n_tasks), kappa)


def update_loss_ema(tracker: LossTracker, losses) -> LossTracker:
    losses = np.asarray(losses, dtype=float)
    if not np.all(np.isfinite(losses)):
        raise ValueError("losses must be finite")
    w = tracker.varpi
    return LossTracker(w * tracker.gamma_cum + (1.0 - w) * losses, w)


def loss_weights(tracker: LossTracker) -> np.ndarray:
    return softmax(tracker.gamma_cum)


def update_shapley_ema(tracker: ShapleyTracker, phi) -> ShapleyTracker:
    phi = np.asarray(phi, dtype=float)
    if not np.all(np.isfinite(phi)):
        raise ValueError("Shapley values must be finite")
    k = tracker.kappa
    return ShapleyTracker(k * tracker.i_cum + (1.0 - k) * phi, k)


def shapley_weights(tracker: ShapleyTracker) -> np.ndarray:
    return softmax(tracker.i_cum)


def shapley(utility: Callable[[int, frozenset], float], n_tasks: int) -> np.ndarray:
    """Task Shapley values averaged over every beneficiary task.

    ``utility(i, C)`` is task i's validation accuracy after the extractor is
    updated with the gradients of the EVs in ``C``. For task m::

        phi_m = 1/M^2 sum_i sum_j sum_{|C|=j, m not in C} (v_i(C + m) - v_i(C)) / binom(M-1, j)

    Each utility is evaluated once.
    """
    M = n_tasks
    if M > 12:
        raise ValueError("exact enumeration is limited to 12 tasks")
    cache: dict = {}

    def v(i, C):
        key = (i, C)
        if key not in cache:
            val = float(utility(i, C))
            if not 0.0 <= val <= 1.0 or math.isnan(val):
                raise ValueError(f"utility v_{i}({sorted(C)}) = {val} is not an accuracy in [0, 1]")
            cache[key] = val
        return cache[key]

    phi = np.zeros(M)
    for m in range(M):
        others = [k for k in range(M) if k != m]
        total = 0.0
        for j in range(M):
            w = 1.0 / math.comb(M - 1, j)
            for combo in itertools.combinations(others, j):
                C = frozenset(combo)
                Cm = C | {m}
                for i in range(M):
                    total += w * (v(i, Cm) - v(i, C))
        phi[m] = total / M**2
    return phi


@dataclass(frozen=True)
class TaskWeights:
    psi: np.ndarray
    psi_loss: np.ndarray
    psi_shapley: np.ndarray


def combine(psi_loss, psi_shap) -> TaskWeights:
    a = np.asarray(psi_loss, dtype=float)
    b = np.asarray(psi_shap, dtype=float)
    s = a + b
    return TaskWeights(s / s.sum(), a, b)


def task_weights(loss_tracker: LossTracker, shapley_tracker: ShapleyTracker) -> TaskWeights:
    return combine(loss_weights(loss_tracker), shapley_weights(shapley_tracker))
