"""Modified-digit multi-task data: IDX loading, rotation/dye, Dirichlet splits.

Each sample carries two labels: the digit class and the rotation-angle
index ``i`` (rotation of ``36 * i`` degrees).
"""

from __future__ import annotations

import gzip
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

N_ANGLES = 10
ANGLE_STEP_DEG = 36.0

# fixed palette; a sample's colour pair is picked by (digit + angle) mod 10
PALETTE = np.array(
    [
        [0.90, 0.10, 0.10],
        [0.95, 0.55, 0.05],
        [0.95, 0.90, 0.10],
        [0.20, 0.80, 0.20],
        [0.05, 0.75, 0.75],
        [0.15, 0.35, 0.95],
        [0.55, 0.20, 0.85],
        [0.95, 0.35, 0.70],
        [0.60, 0.40, 0.20],
        [0.85, 0.85, 0.85],
    ]
)
BACKGROUND_DIM = 0.35


class DataError(ValueError):
    pass


@dataclass
class DigitCorpus:
    """Grey-scale digits in [0, 1], shape (n, H, W), with digit labels."""

    images: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.labels)


@dataclass
class MultiTaskSet:
    """Dyed, rotated images (n, H, W, 3) and labels (n, 2) = [digit, angle index]."""

    images: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "MultiTaskSet":
        return MultiTaskSet(self.images[idx], self.labels[idx])


@dataclass
class UAVDataset:
    owner: int
    indices: np.ndarray

    @property
    def size(self) -> int:
        return len(self.indices)


@dataclass(frozen=True)
class PartitionSpec:
    alpha1: float = 1.0
    alpha2: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.alpha1 <= 0 or self.alpha2 <= 0:
            raise DataError("Dirichlet concentrations must be positive")


# ---------------------------------------------------------------------------
# IDX files


def _open(path):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def read_idx(path) -> np.ndarray:
    """Read an unsigned-byte IDX file into a uint8 array of its stated shape."""
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise DataError(f"{path}: truncated header at byte offset {len(raw)}")
    zero, dtype, ndim = raw[0:2], raw[2], raw[3]
    if zero != b"\x00\x00" or dtype != 0x08 or ndim not in (1, 3):
        magic = struct.unpack(">I", raw[:4])[0]
        raise DataError(f"{path}: bad magic 0x{magic:08x} at byte offset 0")
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise DataError(f"{path}: truncated dimension header at byte offset {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    expected = head + int(np.prod(dims))
    if len(raw) < expected:
        raise DataError(
            f"{path}: truncated data at byte offset {len(raw)} (expected {expected} bytes)"
        )
    return np.frombuffer(raw, dtype=np.uint8, count=expected - head, offset=head).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    a = np.asarray(array)
    if a.dtype != np.uint8 or a.ndim not in (1, 3):
        raise DataError("IDX writer handles uint8 arrays of rank 1 or 3")
    with open(path, "wb") as fh:
        fh.write(bytes([0, 0, 0x08, a.ndim]))
        fh.write(struct.pack(f">{a.ndim}I", *a.shape))
        fh.write(a.tobytes())


def load_idx(images_path, labels_path) -> DigitCorpus:
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim != 3:
        raise DataError(f"{images_path}: expected an image file (magic 0x00000803)")
    if labels.ndim != 1:
        raise DataError(f"{labels_path}: expected a label file (magic 0x00000801)")
    if len(images) != len(labels):
        raise DataError(f"{len(images)} images but {len(labels)} labels")
    return DigitCorpus(images.astype(np.float64) / 255.0, labels.astype(np.int64))


# ---------------------------------------------------------------------------
# synthetic fallback digits

_GLYPHS = {
    0: [[(0.5 + 0.24 * np.cos(t), 0.5 + 0.36 * np.sin(t)) for t in np.linspace(0, 2 * np.pi, 13)]],
    1: [[(0.38, 0.24), (0.52, 0.1), (0.52, 0.9)]],
    2: [[(0.25, 0.3), (0.35, 0.15), (0.6, 0.1), (0.75, 0.25), (0.7, 0.45), (0.25, 0.9), (0.78, 0.9)]],
    3: [[(0.25, 0.15), (0.7, 0.15), (0.45, 0.45), (0.7, 0.6), (0.7, 0.8), (0.5, 0.9), (0.25, 0.85)]],
    4: [[(0.65, 0.9), (0.65, 0.1), (0.2, 0.65), (0.8, 0.65)]],
    5: [[(0.75, 0.1), (0.3, 0.1), (0.28, 0.45), (0.6, 0.42), (0.75, 0.6), (0.7, 0.82), (0.5, 0.9), (0.25, 0.85)]],
    6: [[(0.7, 0.12), (0.4, 0.3), (0.28, 0.6), (0.35, 0.85), (0.6, 0.88), (0.72, 0.7), (0.6, 0.52), (0.35, 0.55)]],
    7: [[(0.22, 0.12), (0.78, 0.12), (0.42, 0.9)]],
    8: [
        [(0.5 + 0.18 * np.cos(t), 0.29 + 0.18 * np.sin(t)) for t in np.linspace(0, 2 * np.pi, 11)],
        [(0.5 + 0.21 * np.cos(t), 0.69 + 0.21 * np.sin(t)) for t in np.linspace(0, 2 * np.pi, 11)],
    ],
    9: [
        [(0.5 + 0.2 * np.cos(t), 0.32 + 0.19 * np.sin(t)) for t in np.linspace(0, 2 * np.pi, 11)],
        [(0.7, 0.32), (0.62, 0.9)],
    ],
}


def _segments(strokes):
    segs = []
    for poly in strokes:
        p = np.asarray(poly, dtype=float)
        segs.append(np.stack([p[:-1], p[1:]], axis=1))
    return np.concatenate(segs)


_GLYPH_SEGMENTS = {d: _segments(s) for d, s in _GLYPHS.items()}


def _render(segs: np.ndarray, grid: np.ndarray, thick: float, soft: float) -> np.ndarray:
    a, b = segs[:, 0], segs[:, 1]
    ab = b - a
    denom = np.maximum((ab * ab).sum(axis=1), 1e-12)
    ap = grid[:, None, :] - a[None]
    t = np.clip((ap * ab[None]).sum(axis=2) / denom, 0.0, 1.0)
    d = np.linalg.norm(ap - t[..., None] * ab[None], axis=2).min(axis=1)
    return np.clip((thick - d) / soft + 0.5, 0.0, 1.0)


def synthetic_digits(n: int, seed: int = 0, size: int = 28) -> DigitCorpus:
    """Stroke-rendered digits with random affine jitter, thickness and noise."""
    rng = np.random.default_rng([seed, 0x5EED])
    labels = rng.integers(0, 10, size=n)
    c = (np.arange(size) + 0.5) / size
    yy, xx = np.meshgrid(c, c, indexing="ij")
    grid = np.stack([xx.ravel(), yy.ravel()], axis=1)
    images = np.empty((n, size, size))
    for i, d in enumerate(labels):
        segs = _GLYPH_SEGMENTS[int(d)] - 0.5
        segs = segs + rng.uniform(-0.025, 0.025, size=segs.shape)
        rot = np.deg2rad(rng.uniform(-8, 8))
        sc = rng.uniform(0.8, 1.05, size=2)
        shear = rng.uniform(-0.15, 0.15)
        A = np.array([[np.cos(rot), -np.sin(rot)], [np.sin(rot), np.cos(rot)]])
        A = A @ np.array([[sc[0], shear], [0.0, sc[1]]])
        segs = segs @ A.T + 0.5 + rng.uniform(-0.06, 0.06, size=2)
        img = _render(segs, grid, rng.uniform(0.045, 0.085), 1.0 / size)
        images[i] = img.reshape(size, size)
    images += rng.normal(0.0, 0.03, size=images.shape)
    np.clip(images, 0.0, 1.0, out=images)
    return DigitCorpus(images, labels.astype(np.int64))


# ---------------------------------------------------------------------------
# rotation and dye


def _mix64(x: np.ndarray) -> np.ndarray:
    """splitmix64 finaliser; gives per-(seed, index) draws independent of corpus size."""
    x = x.astype(np.uint64)
    with np.errstate(over="ignore"):
        x = (x + np.uint64(0x9E3779B97F4A7C15))
        x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


def angle_indices(n: int, seed: int) -> np.ndarray:
    with np.errstate(over="ignore"):
        keys = np.arange(n, dtype=np.uint64) + np.uint64(seed) * np.uint64(0x100000001B3)
    return (_mix64(keys) % np.uint64(N_ANGLES)).astype(np.int64)


def rotation_map(shape, angle_deg: float) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-neighbour source coordinates for a rotation about the image centre.

    Returns (rows, cols) index arrays; entries of -1 fall outside the image.
    """
    h, w = shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    th = np.deg2rad(angle_deg)
    cos, sin = np.cos(th), np.sin(th)
    r, c = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    dy, dx = r - cy, c - cx
    sr = np.rint(cy + cos * dy - sin * dx).astype(np.int64)
    sc = np.rint(cx + sin * dy + cos * dx).astype(np.int64)
    outside = (sr < 0) | (sr >= h) | (sc < 0) | (sc >= w)
    sr[outside] = -1
    sc[outside] = -1
    return sr, sc


def rotate(images: np.ndarray, angle_idx) -> np.ndarray:
    """Rotate (n, H, W) images by ``36 * angle_idx`` degrees (per-sample indices allowed)."""
    images = np.asarray(images)
    idx = np.broadcast_to(np.asarray(angle_idx), (len(images),))
    out = np.zeros_like(images)
    for a in np.unique(idx):
        sel = np.flatnonzero(idx == a)
        sr, sc = rotation_map(images.shape[1:], ANGLE_STEP_DEG * a)
        inside = sr >= 0
        block = images[sel]
        rotated = np.zeros_like(block)
        rotated[:, inside] = block[:, sr[inside], sc[inside]]
        out[sel] = rotated
    return out


def dye_colors(digits: np.ndarray, angles: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    k = (np.asarray(digits) + np.asarray(angles)) % 10
    return PALETTE[k], BACKGROUND_DIM * PALETTE[(k + 5) % 10]


def dye(gray: np.ndarray, fg: np.ndarray, bg: np.ndarray) -> np.ndarray:
    """Blend background and foreground colours by grey level; output (n, H, W, 3)."""
    v = gray[..., None]
    return bg[:, None, None, :] + (fg - bg)[:, None, None, :] * v


def modify(corpus: DigitCorpus, seed: int) -> MultiTaskSet:
    if len(corpus) == 0:
        raise DataError("cannot modify an empty corpus")
    angles = angle_indices(len(corpus), seed)
    fg, bg = dye_colors(corpus.labels, angles)
    images = dye(rotate(corpus.images, angles), fg, bg)
    return MultiTaskSet(images, np.stack([corpus.labels, angles], axis=1).astype(np.int64))


# ---------------------------------------------------------------------------
# splits


def _largest_remainder(weights: np.ndarray, total: int) -> np.ndarray:
    w = np.asarray(weights, dtype=float)
    share = w / w.sum() * total
    counts = np.floor(share).astype(np.int64)
    short = total - counts.sum()
    if short > 0:
        order = np.lexsort((np.arange(len(w)), -(share - counts)))
        counts[order[:short]] += 1
    return counts


def dirichlet_sizes(total: int, n: int, alpha1: float, rng: np.random.Generator) -> np.ndarray:
    """Dataset sizes from ``Dir(alpha1) * total``; rounding shortfall goes to the largest shares."""
    share = rng.dirichlet(np.full(n, alpha1))
    sizes = np.floor(share * total).astype(np.int64)
    short = total - sizes.sum()
    order = np.lexsort((np.arange(n), -share))
    sizes[order[: int(short)]] += 1
    return sizes


def dirichlet_partition(labels: np.ndarray, n_uavs: int, spec: PartitionSpec) -> list[UAVDataset]:
    """Split sample indices across UAVs with Dirichlet size and label skew.

    Sizes follow ``Dir(alpha1)``. For each UAV, digit and angle proportions are
    drawn independently from ``Dir(alpha2)`` and their product is the target
    joint (digit, angle) mix; the UAV then takes that mix from the remaining
    pool, topping up from whatever classes are left when its targets run out.
    """
    labels = np.asarray(labels)
    if labels.ndim == 1:
        labels = labels[:, None]
    if n_uavs < 1:
        raise DataError("need at least one UAV")
    total = len(labels)
    rng = np.random.default_rng([spec.seed, 0xD1])
    sizes = dirichlet_sizes(total, n_uavs, spec.alpha1, rng)
    if sizes.min() < 1:
        raise DataError(
            f"partition infeasible: a UAV would receive 0 of {total} samples; use a larger corpus"
        )
    dims = [int(labels[:, j].max()) + 1 for j in range(labels.shape[1])]
    joint = np.ravel_multi_index(labels.T, dims)
    n_classes = int(np.prod(dims))
    pools = []
    for k in range(n_classes):
        members = np.flatnonzero(joint == k)
        pools.append(list(rng.permutation(members)))
    avail = np.array([len(p) for p in pools], dtype=np.int64)

    out = []
    for n in range(n_uavs):
        props = [rng.dirichlet(np.full(d, spec.alpha2)) for d in dims]
        target = props[0]
        for p in props[1:]:
            target = np.outer(target, p).ravel()
        need = int(sizes[n])
        take = np.zeros(n_classes, dtype=np.int64)
        while need > 0:
            w = target * (avail - take > 0)
            if w.sum() <= 0:
                w = (avail - take).astype(float)
            alloc = np.minimum(_largest_remainder(w, need), avail - take)
            if alloc.sum() == 0:
                # every weighted class is nearly empty: take one from the best class
                k = int(np.argmax(w))
                alloc[k] = 1
            take += alloc
            need -= int(alloc.sum())
        idx = []
        for k in np.flatnonzero(take):
            idx.extend(pools[k][: take[k]])
            del pools[k][: take[k]]
        avail -= take
        out.append(UAVDataset(n, np.sort(np.asarray(idx, dtype=np.int64))))
    return out


def ev_validation_split(n_total: int, n_evs: int, per_ev: int, seed: int):
    """Draw ``n_evs`` disjoint validation index sets uniformly; return (sets, remainder)."""
    if per_ev < 0 or per_ev * n_evs >= n_total and per_ev > 0:
        raise DataError(f"cannot take {per_ev} x {n_evs} validation samples from {n_total}")
    rng = np.random.default_rng([seed, 0xE7])
    perm = rng.permutation(n_total)
    sets = [np.sort(perm[m * per_ev : (m + 1) * per_ev]) for m in range(n_evs)]
    rest = np.sort(perm[n_evs * per_ev :])
    return sets, rest


def write_manifest(path, uavs: list[UAVDataset], validation=None) -> None:
    doc = {"uavs": [{"owner": u.owner, "indices": u.indices.tolist()} for u in uavs]}
    if validation is not None:
        doc["validation"] = [v.tolist() for v in validation]
    Path(path).write_text(json.dumps(doc))


def read_manifest(path):
    doc = json.loads(Path(path).read_text())
    uavs = [UAVDataset(u["owner"], np.asarray(u["indices"], dtype=np.int64)) for u in doc["uavs"]]
    validation = [np.asarray(v, dtype=np.int64) for v in doc.get("validation", [])]
    return uavs, validation
