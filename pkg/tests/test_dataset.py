import gzip
import struct

import numpy as np
import pytest

from uavmtfl import dataset as ds


def tv(p, q):
    return 0.5 * np.abs(np.asarray(p) - np.asarray(q)).sum()


def hist(labels, k=10):
    return np.bincount(labels, minlength=k) / max(len(labels), 1)


# -- IDX ---------------------------------------------------------------------


def test_idx_fixture_round_trips_exact_pixels(tmp_path):
    images = np.array([[[0, 255], [128, 7]], [[1, 2], [3, 4]]], dtype=np.uint8)
    labels = np.array([3, 9], dtype=np.uint8)
    ds.write_idx(tmp_path / "img", images)
    ds.write_idx(tmp_path / "lab", labels)
    raw = (tmp_path / "img").read_bytes()
    assert raw[:4] == b"\x00\x00\x08\x03"
    assert struct.unpack(">3I", raw[4:16]) == (2, 2, 2)
    corpus = ds.load_idx(tmp_path / "img", tmp_path / "lab")
    np.testing.assert_array_equal(corpus.images * 255.0, images.astype(float))
    np.testing.assert_array_equal(corpus.labels, [3, 9])
    assert corpus.images.max() <= 1.0 and corpus.images.min() >= 0.0


def test_idx_gzip_and_empty(tmp_path):
    ds.write_idx(tmp_path / "img", np.zeros((0, 28, 28), dtype=np.uint8))
    ds.write_idx(tmp_path / "lab", np.zeros(0, dtype=np.uint8))
    with gzip.open(tmp_path / "img.gz", "wb") as fh:
        fh.write((tmp_path / "img").read_bytes())
    corpus = ds.load_idx(tmp_path / "img.gz", tmp_path / "lab")
    assert len(corpus) == 0 and corpus.images.shape == (0, 28, 28)


def test_idx_errors_report_byte_offset(tmp_path):
    (tmp_path / "bad").write_bytes(b"\x00\x00\x09\x03" + b"\x00" * 12)
    with pytest.raises(ds.DataError, match="magic 0x00000903 at byte offset 0"):
        ds.read_idx(tmp_path / "bad")
    good = np.arange(8, dtype=np.uint8).reshape(2, 2, 2)
    ds.write_idx(tmp_path / "t", good)
    (tmp_path / "trunc").write_bytes((tmp_path / "t").read_bytes()[:-3])
    with pytest.raises(ds.DataError, match="byte offset 21"):
        ds.read_idx(tmp_path / "trunc")
    (tmp_path / "short").write_bytes(b"\x00\x00")
    with pytest.raises(ds.DataError, match="byte offset 2"):
        ds.read_idx(tmp_path / "short")


def test_idx_count_mismatch(tmp_path):
    ds.write_idx(tmp_path / "img", np.zeros((3, 2, 2), dtype=np.uint8))
    ds.write_idx(tmp_path / "lab", np.zeros(2, dtype=np.uint8))
    with pytest.raises(ds.DataError, match="3 images but 2 labels"):
        ds.load_idx(tmp_path / "img", tmp_path / "lab")


# -- modification ------------------------------------------------------------


def test_synthetic_digits_are_deterministic_and_in_range():
    a, b = ds.synthetic_digits(40, seed=2), ds.synthetic_digits(40, seed=2)
    np.testing.assert_array_equal(a.images, b.images)
    assert a.images.shape == (40, 28, 28)
    assert 0.0 <= a.images.min() and a.images.max() <= 1.0
    assert set(np.unique(a.labels)) <= set(range(10))


def test_angle_zero_leaves_shape_unchanged_up_to_colour():
    corpus = ds.synthetic_digits(12, seed=1)
    zero = np.zeros(12, dtype=int)
    fg, bg = ds.dye_colors(corpus.labels, zero)
    out = ds.dye(ds.rotate(corpus.images, zero), fg, bg)
    # invert the per-sample affine dye on the channel with the largest colour span
    ch = np.argmax(np.abs(fg - bg), axis=1)
    rows = np.arange(12)
    span = (fg - bg)[rows, ch]
    grey = (out[rows, :, :, ch] - bg[rows, ch][:, None, None]) / span[:, None, None]
    np.testing.assert_allclose(grey, corpus.images, atol=1e-12)


def test_double_half_turn_restores_orientation():
    corpus = ds.synthetic_digits(20, seed=3)
    twice = ds.rotate(ds.rotate(corpus.images, 5), 5)
    assert np.mean(np.abs(twice - corpus.images)) < 0.02


def test_every_angle_index_maps_to_its_angle():
    img = np.zeros((1, 29, 29))
    img[0, 14, 24] = 1.0  # a point to the right of the centre
    for k in range(ds.N_ANGLES):
        out = ds.rotate(img, k)[0]
        r, c = np.unravel_index(np.argmax(out), out.shape)
        angle = np.degrees(np.arctan2(r - 14, c - 14)) % 360
        expected = (k * ds.ANGLE_STEP_DEG) % 360
        assert min(abs(angle - expected), 360 - abs(angle - expected)) < 6


def test_modify_is_deterministic_with_uniform_angles():
    corpus = ds.synthetic_digits(2000, seed=0)
    a, b = ds.modify(corpus, 11), ds.modify(corpus, 11)
    np.testing.assert_array_equal(np.bincount(a.labels[:, 1]), np.bincount(b.labels[:, 1]))
    np.testing.assert_array_equal(a.images, b.images)
    assert a.images.shape == (2000, 28, 28, 3)
    assert 0 <= a.images.min() and a.images.max() <= 1
    assert tv(hist(a.labels[:, 1]), np.full(10, 0.1)) < 0.05
    np.testing.assert_array_equal(a.labels[:, 0], corpus.labels)
    # angles depend on (index, seed) only
    np.testing.assert_array_equal(ds.angle_indices(50, 11), a.labels[:50, 1])


def test_modify_rejects_empty_corpus():
    with pytest.raises(ds.DataError):
        ds.modify(ds.DigitCorpus(np.zeros((0, 28, 28)), np.zeros(0, dtype=int)), 0)


# -- partitioning ------------------------------------------------------------


def joint_labels(n, seed):
    r = np.random.default_rng(seed)
    return np.stack([r.integers(0, 10, n), r.integers(0, 10, n)], axis=1)


def test_single_uav_owns_everything():
    labels = joint_labels(300, 0)
    parts = ds.dirichlet_partition(labels, 1, ds.PartitionSpec(1.0, 1.0, 0))
    np.testing.assert_array_equal(parts[0].indices, np.arange(300))


@pytest.mark.parametrize("seed", range(5))
def test_partition_is_exact_disjoint_cover(seed):
    labels = joint_labels(1000, seed)
    parts = ds.dirichlet_partition(labels, 7, ds.PartitionSpec(2.0, 0.3, seed))
    allidx = np.concatenate([p.indices for p in parts])
    assert sum(p.size for p in parts) == 1000
    np.testing.assert_array_equal(np.sort(allidx), np.arange(1000))
    assert all(p.size > 0 for p in parts)


def test_partition_is_deterministic():
    labels = joint_labels(500, 1)
    a = ds.dirichlet_partition(labels, 5, ds.PartitionSpec(1.0, 0.2, 4))
    b = ds.dirichlet_partition(labels, 5, ds.PartitionSpec(1.0, 0.2, 4))
    assert all(np.array_equal(x.indices, y.indices) for x, y in zip(a, b))


def test_sizes_follow_dirichlet_with_shortfall_to_largest():
    r1, r2 = np.random.default_rng(5), np.random.default_rng(5)
    sizes = ds.dirichlet_sizes(1003, 6, 1.0, r1)
    share = r2.dirichlet(np.ones(6))
    floor = np.floor(share * 1003).astype(int)
    assert sizes.sum() == 1003
    extra = sizes - floor
    assert set(np.unique(extra)) <= {0, 1}
    assert np.all(share[extra == 1][:, None] >= share[extra == 0][None, :])


def test_large_alpha2_is_close_to_global_histogram():
    dists = []
    for seed in range(20):
        labels = joint_labels(4000, seed)
        parts = ds.dirichlet_partition(labels, 5, ds.PartitionSpec(100.0, 100.0, seed))
        for dim in (0, 1):
            g = hist(labels[:, dim])
            dists += [tv(hist(labels[p.indices, dim]), g) for p in parts]
    assert np.mean(dists) < 0.1


def test_small_alpha2_skews_labels():
    labels = joint_labels(4000, 0)
    parts = ds.dirichlet_partition(labels, 5, ds.PartitionSpec(100.0, 0.05, 0))
    g = hist(labels[:, 0])
    assert np.mean([tv(hist(labels[p.indices, 0]), g) for p in parts]) > 0.3


def test_partition_infeasible_is_reported():
    with pytest.raises(ds.DataError, match="larger corpus"):
        ds.dirichlet_partition(joint_labels(3, 0), 10, ds.PartitionSpec(1.0, 1.0, 0))
    with pytest.raises(ds.DataError):
        ds.PartitionSpec(0.0, 1.0)


def test_validation_split_arithmetic_and_disjointness():
    sets, rest = ds.ev_validation_split(1000, 2, 0, 0)
    assert all(len(s) == 0 for s in sets)
    np.testing.assert_array_equal(rest, np.arange(1000))
    sets, rest = ds.ev_validation_split(1000, 2, 100, 0)
    assert len(rest) == 800
    together = np.concatenate(sets + [rest])
    np.testing.assert_array_equal(np.sort(together), np.arange(1000))
    with pytest.raises(ds.DataError):
        ds.ev_validation_split(100, 2, 50, 0)


def test_validation_histogram_matches_global():
    labels = joint_labels(5000, 9)[:, 0]
    g = hist(labels)
    dists = []
    for seed in range(20):
        sets, _ = ds.ev_validation_split(5000, 2, 500, seed)
        dists += [tv(hist(labels[s]), g) for s in sets]
    assert max(dists) < 0.15


def test_manifest_round_trip(tmp_path):
    labels = joint_labels(200, 2)
    parts = ds.dirichlet_partition(labels, 3, ds.PartitionSpec(1.0, 1.0, 2))
    val, _ = ds.ev_validation_split(200, 2, 10, 2)
    ds.write_manifest(tmp_path / "m.json", parts, val)
    back, vback = ds.read_manifest(tmp_path / "m.json")
    assert [p.owner for p in back] == [0, 1, 2]
    assert all(np.array_equal(a.indices, b.indices) for a, b in zip(parts, back))
    assert all(np.array_equal(a, b) for a, b in zip(val, vback))
