"""Shared oracles for the test suite."""

import numpy as np

from uavmtfl import nn


def flat_params(model, task):
    return list(model.shared) + list(model.heads[task])


def numeric_gradients(model, task, x, y, h=1e-5):
    """Central finite differences of the mean cross-entropy for every parameter."""
    grads = []
    n_shared = len(model.shared)
    params = flat_params(model, task)
    for k, p in enumerate(params):
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            vals = []
            for sign in (1.0, -1.0):
                q = p.copy()
                q[idx] += sign * h
                if k < n_shared:
                    shared = list(model.shared)
                    shared[k] = q
                    m = model.replace(shared=tuple(shared))
                else:
                    head = list(model.heads[task])
                    head[k - n_shared] = q
                    m = model.with_head(task, tuple(head))
                logits, _ = nn.forward(m, task, x)
                vals.append(nn.loss(logits, y))
            g[idx] = (vals[0] - vals[1]) / (2 * h)
        grads.append(g)
    return grads


def max_relative_error(analytic, numeric):
    worst = 0.0
    for a, n in zip(analytic, numeric):
        den = max(np.max(np.abs(a)), np.max(np.abs(n)), 1e-8)
        worst = max(worst, float(np.max(np.abs(a - n)) / den))
    return worst


def random_instance(rng, kind):
    """Small random model exercising one layer type, with inputs and labels."""
    if kind == "dense":
        arch = nn.Architecture((5,), [["dense", 4], ["relu"]], [["dense", 3], ["relu"]], (3, 2))
        x = rng.normal(size=(6, 5))
    elif kind == "conv":
        arch = nn.Architecture((5, 5, 2), [["conv", 3, 3, 1, 1], ["relu"], ["conv", 2, 2, 2, 0], ["flatten"]],
                               [], (3, 2))
        x = rng.normal(size=(4, 5, 5, 2))
    elif kind == "norm":
        arch = nn.Architecture((4, 4, 2), [["conv", 3, 2, 2, 0], ["norm"], ["relu"], ["flatten"]],
                               [["dense", 4], ["relu"]], (3, 2))
        x = rng.normal(size=(5, 4, 4, 2))
    else:
        raise ValueError(kind)
    model = nn.init_model(arch, rng)
    if kind == "norm":
        model = nn.calibrate_norm(model, x)
        # move scale/shift off their initial values so their gradients are generic
        shared = list(model.shared)
        shared[2] = shared[2] + rng.normal(0, 0.3, size=shared[2].shape)
        shared[3] = shared[3] + rng.normal(0, 0.3, size=shared[3].shape)
        model = model.replace(shared=tuple(shared))
    # zero-initialised biases can put a ReLU input exactly on its kink, where
    # central differences see half the slope; random biases avoid that
    def jitter(params):
        return tuple(p + rng.normal(0, 0.1, p.shape) if p.ndim == 1 else p for p in params)

    model = model.replace(shared=jitter(model.shared))
    for t in range(len(model.heads)):
        model = model.with_head(t, jitter(model.heads[t]))
    y = rng.integers(0, 3, size=len(x))
    return model, x, y


def tiny_config(**kw):
    """A fast configuration for round-level tests."""
    from uavmtfl.config import ExperimentConfig

    base = dict(arch="small", n_samples=1200, val_per_ev=100, batch_size=40, n_uavs=4, rounds=3, local_steps=2)
    base.update(kw)
    return ExperimentConfig(**base)
