import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gaitprop.credit import OptimizerState, adam_step, bp_backward, one_hot
from gaitprop.data import (
    Dataset,
    batch_indices,
    batches,
    load_cifar10,
    load_cifar10_batch,
    load_idx,
    load_idx_dir,
    standardize,
    synthetic_dataset,
    write_idx,
)
from gaitprop.errors import ParseError
from gaitprop.layers import DenseLayer, Network


def _idx_images(images):
    n, h, w = images.shape
    return struct.pack(">IIII", 0x803, n, h, w) + images.astype(np.uint8).tobytes()


def _idx_labels(labels):
    return struct.pack(">II", 0x801, len(labels)) + bytes(labels)


@pytest.fixture
def idx_pair(tmp_path):
    images = np.zeros((2, 28, 28), dtype=np.uint8)
    images[0, 0, 0] = 255
    images[1, 27, 27] = 51
    img = tmp_path / "img.idx"
    lab = tmp_path / "lab.idx"
    img.write_bytes(_idx_images(images))
    lab.write_bytes(_idx_labels([3, 7]))
    return img, lab


class TestIdx:
    def test_fixture_round_trip(self, idx_pair):
        ds = load_idx(*idx_pair)
        assert ds.inputs.shape == (2, 28, 28)
        assert list(ds.labels) == [3, 7]
        assert ds.inputs[0, 0, 0] == 1.0
        assert ds.inputs[1, 27, 27] == pytest.approx(0.2)
        assert ds.inputs.sum() == pytest.approx(1.2)

    def test_header_bytes(self, tmp_path):
        path = tmp_path / "x.idx"
        write_idx(path, np.zeros((2, 3, 4), dtype=np.uint8))
        raw = path.read_bytes()
        assert raw[:4] == b"\x00\x00\x08\x03"
        assert raw[4:16] == b"\x00\x00\x00\x02\x00\x00\x00\x03\x00\x00\x00\x04"
        assert len(raw) == 16 + 24

    def test_wrong_label_magic(self, idx_pair, tmp_path):
        bad = tmp_path / "bad.idx"
        bad.write_bytes(struct.pack(">II", 0x803, 2) + bytes([3, 7]))
        with pytest.raises(ParseError, match="offset 0"):
            load_idx(idx_pair[0], bad)

    def test_count_mismatch(self, idx_pair, tmp_path):
        lab = tmp_path / "three.idx"
        lab.write_bytes(_idx_labels([1, 2, 3]))
        with pytest.raises(ParseError, match="count mismatch"):
            load_idx(idx_pair[0], lab)

    def test_truncated(self, idx_pair, tmp_path):
        short = tmp_path / "short.idx"
        short.write_bytes(idx_pair[0].read_bytes()[:-10])
        with pytest.raises(ParseError, match="truncated") as info:
            load_idx(short, idx_pair[1])
        assert info.value.offset == 16 + 2 * 784 - 10

    def test_truncated_header(self, tmp_path):
        short = tmp_path / "short.idx"
        short.write_bytes(b"\x00\x00\x08\x03\x00\x00")
        with pytest.raises(ParseError):
            load_idx(short, short)

    def test_directory_with_gzip(self, tmp_path):
        images = np.arange(2 * 28 * 28, dtype=np.uint8).reshape(2, 28, 28)
        for split in ("train", "t10k"):
            with gzip.open(tmp_path / f"{split}-images-idx3-ubyte.gz", "wb") as fh:
                fh.write(_idx_images(images))
            with gzip.open(tmp_path / f"{split}-labels-idx1-ubyte.gz", "wb") as fh:
                fh.write(_idx_labels([0, 9]))
        train, test = load_idx_dir(tmp_path)
        assert train.split == "train" and test.split == "test"
        np.testing.assert_array_equal(test.inputs * 255, images)

    def test_missing_directory_files(self, tmp_path):
        with pytest.raises(ParseError, match="no train IDX"):
            load_idx_dir(tmp_path)


def _cifar_bytes(labels, seed=0):
    rng = np.random.default_rng(seed)
    pixels = rng.integers(0, 256, (len(labels), 3072), dtype=np.uint8)
    records = np.concatenate([np.array(labels, dtype=np.uint8)[:, None], pixels], axis=1)
    return records.tobytes(), pixels


class TestCifar:
    def test_fixture(self, tmp_path):
        raw, pixels = _cifar_bytes([4, 9])
        path = tmp_path / "b.bin"
        path.write_bytes(raw)
        x, y = load_cifar10_batch(path)
        assert x.shape == (2, 3, 32, 32)
        assert list(y) == [4, 9]
        # channel planar: byte 1 + 1024 of a record is the first green pixel
        assert x[1, 1, 0, 0] == pixels[1, 1024] / 255.0
        assert x[0, 2, 31, 31] == pixels[0, 3071] / 255.0

    def test_truncated(self, tmp_path):
        raw, _ = _cifar_bytes([1, 2])
        path = tmp_path / "b.bin"
        path.write_bytes(raw[:-1])
        with pytest.raises(ParseError, match="truncated") as info:
            load_cifar10_batch(path)
        assert info.value.offset == 3073

    def test_record_count(self, tmp_path):
        path = tmp_path / "b.bin"
        path.write_bytes(_cifar_bytes([1, 2])[0])
        with pytest.raises(ParseError, match="expected 3"):
            load_cifar10_batch(path, expect_records=3)

    def test_directory(self, tmp_path):
        for i in range(1, 6):
            (tmp_path / f"data_batch_{i}.bin").write_bytes(_cifar_bytes([i, i], seed=i)[0])
        (tmp_path / "test_batch.bin").write_bytes(_cifar_bytes([0, 1, 2], seed=9)[0])
        train, test = load_cifar10(tmp_path, records_per_file=None)
        assert len(train) == 10 and len(test) == 3
        assert list(train.labels[:4]) == [1, 1, 2, 2]

    def test_missing_file(self, tmp_path):
        with pytest.raises(ParseError, match="missing"):
            load_cifar10(tmp_path)


class TestSynthetic:
    def test_deterministic(self):
        a = synthetic_dataset(3, 5, 4, seed=1)
        b = synthetic_dataset(3, 5, 4, seed=1)
        np.testing.assert_array_equal(a.inputs, b.inputs)
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_splits_share_means(self):
        tr = synthetic_dataset(2, 6, 4000, seed=3, split="train")
        te = synthetic_dataset(2, 6, 4000, seed=3, split="test")
        assert not np.array_equal(tr.inputs, te.inputs)
        for c in range(2):
            np.testing.assert_allclose(
                tr.inputs[tr.labels == c].mean(0), te.inputs[te.labels == c].mean(0), atol=0.1
            )

    def test_mean_separation(self):
        ds = synthetic_dataset(4, 10, 20_000, seed=0, separation=6.0)
        means = np.array([ds.inputs[ds.labels == c].mean(0) for c in range(4)])
        for i in range(4):
            for j in range(i + 1, 4):
                assert np.linalg.norm(means[i] - means[j]) == pytest.approx(6.0, abs=0.1)

    def test_image_shape(self):
        ds = synthetic_dataset(2, (1, 4, 4), 3, seed=0)
        assert ds.inputs.shape == (6, 1, 4, 4)

    def test_empty(self):
        with pytest.raises(ValueError, match="empty"):
            synthetic_dataset(2, 4, 0, seed=0)

    def test_separable(self):
        ds = synthetic_dataset(2, 2, 100, seed=0, separation=10.0)
        net = Network([DenseLayer(np.eye(2), np.zeros(2), slope=1.0)], (2,))
        opt = OptimizerState.for_network(net, lr=0.05)
        y = one_hot(ds.labels, 2)
        for _ in range(200):
            up = bp_backward(net, net.forward(ds.inputs), y)
            net.set_params(adam_step(opt, net.params(), up))
        assert (net.predict(ds.inputs).argmax(1) == ds.labels).mean() == 1.0


class TestBatches:
    def test_sizes(self):
        ds = Dataset(np.arange(10.0)[:, None], np.zeros(10), 1)
        assert [len(b[1]) for b in batches(ds, 3, 0)] == [3, 3, 3, 1]

    def test_same_seed_same_order(self):
        ds = Dataset(np.arange(10.0)[:, None], np.zeros(10), 1)
        a = [b[0] for b in batches(ds, 4, [1, 2])]
        b = [b[0] for b in batches(ds, 4, [1, 2])]
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)

    def test_flatten(self):
        ds = synthetic_dataset(2, (1, 3, 3), 2, seed=0)
        x, _ = batches(ds, 4, 0, flatten=True)[0]
        assert x.shape == (4, 9)

    def test_bad_size(self):
        ds = Dataset(np.zeros((2, 1)), np.zeros(2), 1)
        with pytest.raises(ValueError):
            batches(ds, 0, 0)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 200), st.integers(1, 50), st.integers(0, 2**32 - 1))
    def test_partition(self, n, size, seed):
        idx = batch_indices(n, size, seed)
        flat = np.concatenate(idx)
        assert sorted(flat.tolist()) == list(range(n))
        assert all(len(b) == size for b in idx[:-1])


def test_standardize_uses_train_statistics():
    rng = np.random.default_rng(0)
    train = Dataset(rng.normal(3.0, 2.0, (500, 2, 4, 4)), np.zeros(500), 1)
    test = Dataset(np.full((2, 2, 4, 4), 3.0), np.zeros(2), 1)
    tr, te = standardize(train, test)
    np.testing.assert_allclose(tr.inputs.mean(axis=(0, 2, 3)), 0.0, atol=1e-12)
    np.testing.assert_allclose(tr.inputs.std(axis=(0, 2, 3)), 1.0, atol=1e-12)
    assert np.abs(te.inputs).max() < 0.2
