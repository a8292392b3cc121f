"""IDX parsing, synthetic blobs, and uniform partitioning."""

import gzip
import struct

import numpy as np
import pytest

from splitfed.data import (
    Dataset,
    encode_idx_images,
    encode_idx_labels,
    load_idx,
    pad_images,
    partition_uniform,
    synthetic,
)
from splitfed.errors import BadMagic, DimMismatch, TooManyClients, Truncated


@pytest.fixture
def idx_pair(tmp_path):
    rng = np.random.Generator(np.random.PCG64(0))
    images = rng.integers(0, 256, size=(12, 5, 4), dtype=np.uint8)
    labels = rng.integers(0, 10, size=12).astype(np.uint8)
    ipath, lpath = tmp_path / "imgs.idx", tmp_path / "labs.idx"
    ipath.write_bytes(encode_idx_images(images))
    lpath.write_bytes(encode_idx_labels(labels))
    return str(ipath), str(lpath), images, labels


class TestLoadIdx:
    def test_parses_and_scales(self, idx_pair):
        ipath, lpath, images, labels = idx_pair
        ds = load_idx(ipath, lpath)
        assert ds.images.shape == (12, 5, 4, 1)
        assert np.array_equal(ds.labels, labels)
        assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0
        assert ds.images[3, 2, 1, 0] == images[3, 2, 1] / 255.0

    def test_bit_faithful_reencode(self, idx_pair):
        # scaling by 1/255 then re-quantizing reproduces the source bytes
        ipath, lpath, images, labels = idx_pair
        ds = load_idx(ipath, lpath)
        recovered = np.rint(ds.images[..., 0] * 255.0).astype(np.uint8)
        assert encode_idx_images(recovered) == open(ipath, "rb").read()
        assert encode_idx_labels(ds.labels) == open(lpath, "rb").read()

    def test_gzip_transparent(self, tmp_path, idx_pair):
        ipath, lpath, images, labels = idx_pair
        gz_i, gz_l = tmp_path / "i.gz", tmp_path / "l.gz"
        gz_i.write_bytes(gzip.compress(open(ipath, "rb").read()))
        gz_l.write_bytes(gzip.compress(open(lpath, "rb").read()))
        ds = load_idx(str(gz_i), str(gz_l))
        assert np.array_equal(ds.labels, labels)

    def test_bad_magic(self, tmp_path, idx_pair):
        ipath, lpath, *_ = idx_pair
        raw = bytearray(open(ipath, "rb").read())
        raw[3] = 0x99
        bad = tmp_path / "bad.idx"
        bad.write_bytes(bytes(raw))
        with pytest.raises(BadMagic):
            load_idx(str(bad), lpath)

    def test_count_mismatch(self, tmp_path, idx_pair):
        ipath, _, _, labels = idx_pair
        short = tmp_path / "short.idx"
        short.write_bytes(encode_idx_labels(labels[:-1]))
        with pytest.raises(DimMismatch):
            load_idx(ipath, str(short))

    def test_truncated_pixels(self, tmp_path, idx_pair):
        ipath, lpath, *_ = idx_pair
        raw = open(ipath, "rb").read()
        cut = tmp_path / "cut.idx"
        cut.write_bytes(raw[:-3])
        with pytest.raises(Truncated):
            load_idx(str(cut), lpath)


class TestSynthetic:
    def test_deterministic(self):
        a = synthetic(50, 8, 4, seed=3)
        b = synthetic(50, 8, 4, seed=3)
        assert np.array_equal(a.images, b.images)
        assert np.array_equal(a.labels, b.labels)

    def test_center_seed_shares_distribution(self):
        train = synthetic(100, 8, 4, seed=3)
        test = synthetic(100, 8, 4, seed=999, center_seed=3)
        # class means should be close across the two draws
        for c in range(4):
            mu_train = train.images[train.labels == c].mean(axis=0)
            mu_test = test.images[test.labels == c].mean(axis=0)
            assert np.linalg.norm(mu_train - mu_test) < 1.5

    def test_labels_cycle(self):
        ds = synthetic(10, 4, 3, seed=0)
        assert list(ds.labels) == [0, 1, 2, 0, 1, 2, 0, 1, 2, 0]

    def test_needs_two_classes(self):
        with pytest.raises(ValueError):
            synthetic(10, 4, 1, seed=0)


class TestPartition:
    def test_even_split(self):
        ds = synthetic(10, 4, 2, seed=0)
        shards = partition_uniform(ds, 5, seed=1)
        assert [len(s) for s in shards] == [2, 2, 2, 2, 2]

    def test_remainder_policy(self):
        ds = synthetic(11, 4, 2, seed=0)
        shards = partition_uniform(ds, 5, seed=1)
        assert [len(s) for s in shards] == [3, 2, 2, 2, 2]

    def test_disjoint_and_exhaustive(self):
        ds = synthetic(37, 4, 2, seed=0)
        shards = partition_uniform(ds, 4, seed=9)
        combined = np.concatenate([s.indices for s in shards])
        assert sorted(combined.tolist()) == list(range(37))
        assert sum(len(s) for s in shards) == 37

    def test_deterministic_in_seed(self):
        ds = synthetic(20, 4, 2, seed=0)
        a = partition_uniform(ds, 3, seed=5)
        b = partition_uniform(ds, 3, seed=5)
        for sa, sb in zip(a, b):
            assert np.array_equal(sa.indices, sb.indices)

    def test_too_many_clients(self):
        ds = synthetic(4, 4, 2, seed=0)
        with pytest.raises(TooManyClients):
            partition_uniform(ds, 5, seed=0)


class TestPadImages:
    def test_centered_zero_pad(self):
        images = np.ones((2, 28, 28, 1))
        out = pad_images(images, (32, 32, 1))
        assert out.shape == (2, 32, 32, 1)
        assert out[:, 2:30, 2:30, :].min() == 1.0
        assert out[:, :2].max() == 0.0
        assert out.sum() == images.sum()

    def test_noop_when_matching(self):
        images = np.ones((2, 32, 32, 1))
        assert pad_images(images, (32, 32, 1)) is images

    def test_rejects_shrink(self):
        with pytest.raises(DimMismatch):
            pad_images(np.ones((1, 40, 40, 1)), (32, 32, 1))
