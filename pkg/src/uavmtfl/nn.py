"""Small numpy engine for the split multi-task model.

A :class:`SplitModel` holds one shared feature extractor and one head per
task. Parameters are immutable snapshots: every update returns a new model
and arrays are marked read-only, so models can be handed to several UAVs
without copying.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

CHECKPOINT_VERSION = 1

_tokens = itertools.count(1)


class ModelError(ValueError):
    """Shape or consistency problem inside the model."""


class NonFiniteGradient(FloatingPointError):
    pass


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.setflags(write=False)
    return a


# ---------------------------------------------------------------------------
# layers


class Dense:
    kind = "dense"
    n_params = 2

    def __init__(self, out: int):
        self.out = int(out)

    def spec(self):
        return ["dense", self.out]

    def out_shape(self, in_shape):
        if len(in_shape) != 1:
            raise ModelError(f"dense layer expects flat input, got shape {in_shape}")
        return (self.out,)

    def init(self, in_shape, rng):
        fan_in = in_shape[0]
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, self.out))
        return [w, np.zeros(self.out)]

    def forward(self, params, x, stats=None):
        w, b = params
        if x.shape[1] != w.shape[0]:
            raise ModelError(f"dense layer expects {w.shape[0]} inputs, got {x.shape[1]}")
        return x @ w + b, x

    def backward(self, params, cache, dy):
        w, _ = params
        x = cache
        return dy @ w.T, [x.T @ dy, dy.sum(axis=0)]


class Conv2d:
    """2-D convolution on channels-last (batch, height, width, channels) input via im2col."""

    kind = "conv"
    n_params = 2

    def __init__(self, out: int, kernel: int = 3, stride: int = 1, pad: int = 1):
        self.out, self.kernel, self.stride, self.pad = int(out), int(kernel), int(stride), int(pad)

    def spec(self):
        return ["conv", self.out, self.kernel, self.stride, self.pad]

    def _hw(self, h, w):
        k, s, p = self.kernel, self.stride, self.pad
        return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1

    def out_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ModelError(f"conv layer expects (H, W, C) input, got shape {in_shape}")
        ho, wo = self._hw(in_shape[0], in_shape[1])
        if ho < 1 or wo < 1:
            raise ModelError(f"conv layer output would be empty for input {in_shape}")
        return (ho, wo, self.out)

    def init(self, in_shape, rng):
        fan_in = in_shape[2] * self.kernel**2
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, self.out))
        return [w, np.zeros(self.out)]

    def forward(self, params, x, stats=None):
        w, b = params
        n, h, wd, c = x.shape
        if c * self.kernel**2 != w.shape[0]:
            raise ModelError(f"conv layer expects {w.shape[0] // self.kernel**2} channels, got {c}")
        k, s, p = self.kernel, self.stride, self.pad
        ho, wo = self._hw(h, wd)
        xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0))) if p else x
        # (n, ho, wo, c, k, k) view; weight rows are ordered (c, k, k)
        view = sliding_window_view(xp, (k, k), axis=(1, 2))[:, : s * ho : s, : s * wo : s]
        cols = view.reshape(n * ho * wo, -1)
        y = (cols @ w + b).reshape(n, ho, wo, self.out)
        return y, (cols, x.shape, ho, wo)

    def backward(self, params, cache, dy, need_dx=True):
        w, _ = params
        cols, xshape, ho, wo = cache
        n, h, wd, c = xshape
        k, s, p = self.kernel, self.stride, self.pad
        dy2 = dy.reshape(-1, self.out)
        gw = cols.T @ dy2
        gb = dy2.sum(axis=0)
        if not need_dx:
            return None, [gw, gb]
        dcols = (dy2 @ w.T).reshape(n, ho, wo, c, k, k)
        dxp = np.zeros((n, h + 2 * p, wd + 2 * p, c))
        for i in range(k):
            for j in range(k):
                dxp[:, i : i + s * ho : s, j : j + s * wo : s] += dcols[..., i, j]
        dx = dxp[:, p : p + h, p : p + wd] if p else dxp
        return dx, [gw, gb]


class AffineNorm:
    """Per-channel normalisation with frozen running statistics.

    ``y = scale * (x - mean) / sqrt(var + eps) + shift`` over the last
    (channel) axis. Only ``scale`` and ``shift`` are trained; ``mean``/``var``
    are set once by :func:`calibrate_norm` and never move during local
    training.
    """

    kind = "norm"
    n_params = 2
    eps = 1e-5

    def spec(self):
        return ["norm"]

    def out_shape(self, in_shape):
        return tuple(in_shape)

    def init(self, in_shape, rng):
        return [np.ones(in_shape[-1]), np.zeros(in_shape[-1])]

    def forward(self, params, x, stats):
        scale, shift = params
        mean, var = stats
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * inv
        return xhat * scale + shift, (xhat, inv)

    def backward(self, params, cache, dy):
        scale, _ = params
        xhat, inv = cache
        axes = tuple(range(dy.ndim - 1))
        return dy * (scale * inv), [(dy * xhat).sum(axis=axes), dy.sum(axis=axes)]


class ReLU:
    kind = "relu"
    n_params = 0

    def spec(self):
        return ["relu"]

    def out_shape(self, in_shape):
        return tuple(in_shape)

    def init(self, in_shape, rng):
        return []

    def forward(self, params, x, stats=None):
        mask = x > 0
        return x * mask, mask

    def backward(self, params, cache, dy):
        return dy * cache, []


class Flatten:
    kind = "flatten"
    n_params = 0

    def spec(self):
        return ["flatten"]

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def init(self, in_shape, rng):
        return []

    def forward(self, params, x, stats=None):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, params, cache, dy):
        return dy.reshape(cache), []


_LAYERS = {"dense": Dense, "conv": Conv2d, "norm": AffineNorm, "relu": ReLU, "flatten": Flatten}


def layer_from_spec(spec: Sequence) -> object:
    kind, *args = spec
    try:
        return _LAYERS[kind](*args)
    except KeyError:
        raise ModelError(f"unknown layer kind {kind!r}") from None


# ---------------------------------------------------------------------------
# architecture and model


@dataclass(frozen=True)
class Architecture:
    """Layer layout of the shared extractor and of every task head.

    ``head`` lists the hidden layers of a head; each head ends with a dense
    layer sized to ``classes[m]``.
    """

    input_shape: tuple
    shared: tuple
    head: tuple
    classes: tuple

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "shared", tuple(tuple(s) for s in self.shared))
        object.__setattr__(self, "head", tuple(tuple(s) for s in self.head))
        object.__setattr__(self, "classes", tuple(int(c) for c in self.classes))
        shape = self.input_shape
        shared_layers = []
        for i, s in enumerate(self.shared):
            layer = layer_from_spec(s)
            try:
                shape = layer.out_shape(shape)
            except ModelError as exc:
                raise ModelError(f"shared layer {i} ({layer.kind}): {exc}") from None
            shared_layers.append(layer)
        object.__setattr__(self, "feature_shape", shape)
        heads = []
        for m, n_cls in enumerate(self.classes):
            hshape = shape
            layers = []
            for i, s in enumerate(tuple(self.head) + (("dense", n_cls),)):
                layer = layer_from_spec(s)
                try:
                    hshape = layer.out_shape(hshape)
                except ModelError as exc:
                    raise ModelError(f"head {m} layer {i} ({layer.kind}): {exc}") from None
                layers.append(layer)
            heads.append(layers)
        object.__setattr__(self, "shared_layers", shared_layers)
        object.__setattr__(self, "head_layers", heads)

    @property
    def n_tasks(self) -> int:
        return len(self.classes)

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "shared": [list(s) for s in self.shared],
            "head": [list(s) for s in self.head],
            "classes": list(self.classes),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        return cls(d["input_shape"], d["shared"], d["head"], d["classes"])


def small_architecture(input_shape=(28, 28, 3), classes=(10, 10), hidden: int = 64) -> Architecture:
    """Two dense shared layers and a single dense head; the test default."""
    shared = [["flatten"], ["dense", hidden], ["relu"], ["dense", hidden], ["relu"]]
    if len(input_shape) == 1:
        shared = shared[1:]
    return Architecture(input_shape, shared, [], classes)


def conv_architecture(input_shape=(28, 28, 3), classes=(10, 10), width: int = 8) -> Architecture:
    """Three strided conv layers, each followed by a norm layer, and four dense layers per head."""
    c = width
    shared = [
        ["conv", c, 2, 2, 0], ["norm"], ["relu"],
        ["conv", 2 * c, 2, 2, 0], ["norm"], ["relu"],
        ["conv", 2 * c, 3, 2, 1], ["norm"], ["relu"],
        ["flatten"],
    ]
    head = [["dense", 64], ["relu"], ["dense", 32], ["relu"], ["dense", 32], ["relu"]]
    return Architecture(input_shape, shared, head, classes)


ARCHITECTURES = {"small": small_architecture, "conv": conv_architecture}


@dataclass(frozen=True)
class SplitModel:
    arch: Architecture
    shared: tuple
    heads: tuple
    norm_stats: tuple = ()
    token: int = field(default_factory=lambda: next(_tokens), compare=False)

    def __post_init__(self):
        object.__setattr__(self, "shared", tuple(_frozen(a) for a in self.shared))
        object.__setattr__(self, "heads", tuple(tuple(_frozen(a) for a in h) for h in self.heads))
        object.__setattr__(
            self, "norm_stats", tuple((_frozen(m), _frozen(v)) for m, v in self.norm_stats)
        )
        n_norm = sum(1 for layer in self.arch.shared_layers if layer.kind == "norm")
        if len(self.norm_stats) != n_norm:
            raise ModelError(f"expected {n_norm} norm statistics, got {len(self.norm_stats)}")
        if len(self.heads) != self.arch.n_tasks:
            raise ModelError(f"expected {self.arch.n_tasks} heads, got {len(self.heads)}")

    def replace(self, shared=None, heads=None, norm_stats=None) -> "SplitModel":
        return SplitModel(
            self.arch,
            self.shared if shared is None else shared,
            self.heads if heads is None else heads,
            self.norm_stats if norm_stats is None else norm_stats,
        )

    def with_head(self, task: int, head) -> "SplitModel":
        heads = list(self.heads)
        heads[task] = head
        return self.replace(heads=tuple(heads))

    def n_params(self, task: int | None = None) -> int:
        """Trainable parameters in the extractor plus one head (task 0 by default)."""
        head = self.heads[0 if task is None else task]
        return int(sum(a.size for a in self.shared) + sum(a.size for a in head))


def init_model(arch: Architecture, rng: np.random.Generator) -> SplitModel:
    shape = arch.input_shape
    shared, stats = [], []
    for layer in arch.shared_layers:
        shared.extend(layer.init(shape, rng))
        if layer.kind == "norm":
            stats.append((np.zeros(shape[-1]), np.ones(shape[-1])))
        shape = layer.out_shape(shape)
    heads = []
    for layers in arch.head_layers:
        hshape, params = arch.feature_shape, []
        for layer in layers:
            params.extend(layer.init(hshape, rng))
            hshape = layer.out_shape(hshape)
        heads.append(params)
    return SplitModel(arch, shared, heads, stats)


def zeros_like_model(model: SplitModel) -> SplitModel:
    return model.replace(
        shared=tuple(np.zeros_like(a) for a in model.shared),
        heads=tuple(tuple(np.zeros_like(a) for a in h) for h in model.heads),
    )


# ---------------------------------------------------------------------------
# forward / backward


@dataclass
class Cache:
    token: int
    task: int
    shared: list
    head: list


def _split(layers, params):
    out, i = [], 0
    for layer in layers:
        out.append(params[i : i + layer.n_params])
        i += layer.n_params
    return out


def extract_features(model: SplitModel, x: np.ndarray) -> np.ndarray:
    feats, _ = _run_shared(model, x)
    return feats


def _run_shared(model, x):
    arch = model.arch
    if tuple(x.shape[1:]) != arch.input_shape:
        raise ModelError(f"input shape {tuple(x.shape[1:])} does not match {arch.input_shape}")
    caches, stats = [], iter(model.norm_stats)
    for i, (layer, p) in enumerate(zip(arch.shared_layers, _split(arch.shared_layers, model.shared))):
        try:
            x, c = layer.forward(p, x, next(stats) if layer.kind == "norm" else None)
        except ModelError as exc:
            raise ModelError(f"shared layer {i} ({layer.kind}): {exc}") from None
        caches.append(c)
    return x, caches


def forward(model: SplitModel, task: int, x: np.ndarray):
    """Logits of ``task`` for inputs ``x`` plus the cache needed by :func:`backward`."""
    if not 0 <= task < model.arch.n_tasks:
        raise ModelError(f"task {task} out of range for {model.arch.n_tasks} tasks")
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] == 0:
        raise ModelError("empty batch")
    h, shared_cache = _run_shared(model, x)
    layers = model.arch.head_layers[task]
    head_cache = []
    for i, (layer, p) in enumerate(zip(layers, _split(layers, model.heads[task]))):
        try:
            h, c = layer.forward(p, h)
        except ModelError as exc:
            raise ModelError(f"head {task} layer {i} ({layer.kind}): {exc}") from None
        head_cache.append(c)
    return h, Cache(model.token, task, shared_cache, head_cache)


def predict(model: SplitModel, task: int, x: np.ndarray, batch: int = 2000) -> np.ndarray:
    out = [forward(model, task, x[i : i + batch])[0] for i in range(0, len(x), batch)]
    return np.concatenate(out)


def _check_labels(logits, labels):
    labels = np.asarray(labels)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ModelError(f"{logits.shape[0]} logit rows but {labels.shape[0]} labels")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ModelError(f"label outside [0, {logits.shape[1]})")
    return labels.astype(np.int64)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def loss(logits: np.ndarray, labels) -> float:
    """Mean softmax cross-entropy."""
    labels = _check_labels(logits, labels)
    lp = log_softmax(logits)
    return float(-lp[np.arange(len(labels)), labels].mean())


def loss_grad(logits: np.ndarray, labels) -> np.ndarray:
    labels = _check_labels(logits, labels)
    g = np.exp(log_softmax(logits))
    g[np.arange(len(labels)), labels] -= 1.0
    return g / len(labels)


@dataclass(frozen=True)
class Gradients:
    """Gradient (or cumulative gradient) for the extractor and one task head."""

    task: int
    shared: tuple
    head: tuple
    steps: int = 1

    def __add__(self, other: "Gradients") -> "Gradients":
        if other.task != self.task:
            raise ModelError("cannot add gradients of different tasks")
        return Gradients(
            self.task,
            tuple(a + b for a, b in zip(self.shared, other.shared)),
            tuple(a + b for a, b in zip(self.head, other.head)),
            self.steps + other.steps,
        )

    def norm_sq(self) -> tuple[float, float]:
        return (
            float(sum(np.sum(a * a) for a in self.shared)),
            float(sum(np.sum(a * a) for a in self.head)),
        )


# Tests and accumulators both use this name for the K-step sum.
GradientAccumulator = Gradients


def backward(model: SplitModel, task: int, cache: Cache, labels) -> Gradients:
    """Gradient of the mean cross-entropy of ``task`` w.r.t. the extractor and that head."""
    if cache.token != model.token or cache.task != task:
        raise ModelError("stale cache: it was produced by a different model or task")
    arch = model.arch
    layers = arch.head_layers[task]
    # logits are the output of the last head layer; recompute them from its cache
    w, b = model.heads[task][-2:]
    logits = cache.head[-1] @ w + b
    dy = loss_grad(logits, labels)
    head_grads = []
    for layer, p, c in reversed(list(zip(layers, _split(layers, model.heads[task]), cache.head))):
        dy, g = layer.backward(p, c, dy)
        head_grads[:0] = g
    shared_grads = []
    sl = arch.shared_layers
    for i, layer, p, c in reversed(list(zip(range(len(sl)), sl, _split(sl, model.shared), cache.shared))):
        if i == 0 and layer.kind == "conv":
            dy, g = layer.backward(p, c, dy, need_dx=False)
        else:
            dy, g = layer.backward(p, c, dy)
        shared_grads[:0] = g
    return Gradients(task, tuple(shared_grads), tuple(head_grads))


def sgd_step(model: SplitModel, task: int, grads: Gradients, eta: float) -> SplitModel:
    if eta <= 0:
        raise ValueError("learning rate must be positive")
    for g in grads.shared + grads.head:
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for task {task}")
    shared = tuple(w - eta * g for w, g in zip(model.shared, grads.shared))
    head = tuple(w - eta * g for w, g in zip(model.heads[task], grads.head))
    return model.replace(shared=shared).with_head(task, head)


def local_train(model: SplitModel, task: int, batches, eta: float, record: bool = False):
    """Run one SGD step per ``(inputs, labels)`` batch.

    Returns the final model and the batch losses; with ``record=True`` also
    the per-step gradients.
    """
    losses, grads_seen = [], []
    for x, y in batches:
        logits, cache = forward(model, task, x)
        losses.append(loss(logits, y))
        g = backward(model, task, cache, y)
        if record:
            grads_seen.append(g)
        model = sgd_step(model, task, g, eta)
    if record:
        return model, losses, grads_seen
    return model, losses


def cumulative_gradient(w0: SplitModel, wk: SplitModel, eta: float, task: int, steps: int = 0) -> Gradients:
    """``(w0 - wk) / eta`` split into extractor and ``task`` head parts."""
    if eta <= 0:
        raise ValueError("learning rate must be positive")
    if w0.arch != wk.arch:
        raise ModelError("architecture mismatch")
    return Gradients(
        task,
        tuple((a - b) / eta for a, b in zip(w0.shared, wk.shared)),
        tuple((a - b) / eta for a, b in zip(w0.heads[task], wk.heads[task])),
        steps,
    )


def calibrate_norm(model: SplitModel, x: np.ndarray) -> SplitModel:
    """Set every norm layer's statistics from the activations it sees on ``x``.

    Statistics are computed layer by layer, so each layer sees inputs already
    normalised by the layers before it.
    """
    arch = model.arch
    stats = list(model.norm_stats)
    h = np.asarray(x, dtype=np.float64)
    k = 0
    for layer, p in zip(arch.shared_layers, _split(arch.shared_layers, model.shared)):
        if layer.kind == "norm":
            axes = tuple(range(h.ndim - 1))
            stats[k] = (h.mean(axis=axes), h.var(axis=axes))
            h, _ = layer.forward(p, h, stats[k])
            k += 1
        else:
            h, _ = layer.forward(p, h)
    return model.replace(norm_stats=tuple(stats))


def accuracy(model: SplitModel, task: int, x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """(mean loss, accuracy) of ``task`` on ``(x, y)``."""
    if len(x) == 0:
        return float("nan"), float("nan")
    logits = predict(model, task, x)
    return loss(logits, y), float(np.mean(logits.argmax(axis=1) == y))


# ---------------------------------------------------------------------------
# checkpoints
#
# Layout (numpy .npz): "header" holds a JSON document
#   {"version": 1, "arch": {...}, "shared": n, "heads": [n0, n1, ...], "norm": k}
# and arrays are stored as "shared/<i>", "head<m>/<i>", "norm/<k>/mean",
# "norm/<k>/var" in layer order.


def save_checkpoint(model: SplitModel, path) -> None:
    header = {
        "version": CHECKPOINT_VERSION,
        "arch": model.arch.to_dict(),
        "shared": len(model.shared),
        "heads": [len(h) for h in model.heads],
        "norm": len(model.norm_stats),
    }
    arrays = {"header": np.array(json.dumps(header, sort_keys=True))}
    for i, a in enumerate(model.shared):
        arrays[f"shared/{i}"] = a
    for m, h in enumerate(model.heads):
        for i, a in enumerate(h):
            arrays[f"head{m}/{i}"] = a
    for k, (mu, var) in enumerate(model.norm_stats):
        arrays[f"norm/{k}/mean"] = mu
        arrays[f"norm/{k}/var"] = var
    with open(Path(path), "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> SplitModel:
    with np.load(Path(path)) as z:
        header = json.loads(str(z["header"]))
        if header.get("version") != CHECKPOINT_VERSION:
            raise ModelError(f"unsupported checkpoint version {header.get('version')}")
        arch = Architecture.from_dict(header["arch"])
        shared = [z[f"shared/{i}"] for i in range(header["shared"])]
        heads = [[z[f"head{m}/{i}"] for i in range(n)] for m, n in enumerate(header["heads"])]
        stats = [(z[f"norm/{k}/mean"], z[f"norm/{k}/var"]) for k in range(header["norm"])]
    return SplitModel(arch, shared, heads, stats)
