"""Dataset loading (IDX, CIFAR-10 binary), synthetic data and batching."""

import gzip
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ParseError
from .linalg import orthogonal_init

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 3073
CIFAR_SHAPE = (3, 32, 32)
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"


@dataclass
class Dataset:
    inputs: np.ndarray  # (N, *feature_shape)
    labels: np.ndarray  # (N,) int64
    n_classes: int
    split: str = "train"

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ValueError(f"{self.inputs.shape[0]} inputs but {self.labels.shape[0]} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError(f"labels outside [0, {self.n_classes})")

    def __len__(self):
        return self.labels.shape[0]

    @property
    def feature_shape(self):
        return self.inputs.shape[1:]

    def subset(self, idx):
        return Dataset(self.inputs[idx], self.labels[idx], self.n_classes, self.split)


def _read_bytes(path):
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse_idx(raw, expected_magic, what):
    if len(raw) < 4:
        raise ParseError(f"{what}: file too short for IDX magic", offset=0)
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise ParseError(f"{what}: bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}", offset=0)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise ParseError(f"{what}: truncated IDX header", offset=len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header < count:
        raise ParseError(
            f"{what}: truncated payload, expected {count} bytes after header, found {len(raw) - header}",
            offset=len(raw),
        )
    if len(raw) - header > count:
        raise ParseError(f"{what}: {len(raw) - header - count} trailing bytes", offset=header + count)
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx(images_path, labels_path, n_classes=10, split="train"):
    """Load an IDX image/label pair; pixels are scaled to [0, 1]."""
    images = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, "images")
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, "labels")
    if images.shape[0] != labels.shape[0]:
        raise ParseError(
            f"count mismatch: {images.shape[0]} images but {labels.shape[0]} labels", offset=4
        )
    if labels.size and labels.max() >= n_classes:
        raise ParseError(f"label {labels.max()} outside [0, {n_classes})")
    inputs = images.astype(np.float64) / 255.0
    return Dataset(inputs, labels.astype(np.int64), n_classes, split)


def write_idx(path, array):
    """Write a uint8 array as an IDX file (rank 1 or 3 magic as appropriate)."""
    array = np.ascontiguousarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


def load_cifar10_batch(path, expect_records=None):
    """Parse one CIFAR-10 binary batch file into (inputs, labels)."""
    raw = _read_bytes(path)
    if len(raw) % CIFAR_RECORD:
        whole = len(raw) // CIFAR_RECORD
        raise ParseError(
            f"{os.path.basename(str(path))}: truncated record ({len(raw)} bytes is not a multiple of {CIFAR_RECORD})",
            offset=whole * CIFAR_RECORD,
        )
    n = len(raw) // CIFAR_RECORD
    if expect_records is not None and n != expect_records:
        raise ParseError(f"{os.path.basename(str(path))}: {n} records, expected {expect_records}")
    records = np.frombuffer(raw, dtype=np.uint8).reshape(n, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise ParseError(f"label {labels[bad]} outside [0, 10)", offset=bad * CIFAR_RECORD)
    inputs = records[:, 1:].reshape((n,) + CIFAR_SHAPE).astype(np.float64) / 255.0
    return inputs, labels


def load_cifar10(dir_path, records_per_file=10_000):
    """Load the five training batches and the test batch of CIFAR-10."""
    parts = []
    for name in CIFAR_TRAIN_FILES + (CIFAR_TEST_FILE,):
        path = os.path.join(dir_path, name)
        if not os.path.exists(path):
            raise ParseError(f"missing CIFAR-10 file {path}")
        parts.append(load_cifar10_batch(path, records_per_file))
    train_x = np.concatenate([p[0] for p in parts[:-1]])
    train_y = np.concatenate([p[1] for p in parts[:-1]])
    test_x, test_y = parts[-1]
    return Dataset(train_x, train_y, 10, "train"), Dataset(test_x, test_y, 10, "test")


def synthetic_dataset(classes, features, per_class, seed, separation=6.0, split="train"):
    """Gaussian class clusters with unit within-class variance.

    Class means sit on orthonormal directions scaled so that every pair of
    means is ``separation`` apart (when ``classes <= prod(features)``).
    ``features`` may be an int or a shape tuple such as ``(1, 16, 16)``.
    Means depend on ``seed`` only; samples depend on ``seed`` and ``split``
    so train and test share clusters.
    """
    shape = (int(features),) if np.isscalar(features) else tuple(int(f) for f in features)
    n_feat = int(np.prod(shape))
    if classes < 1 or n_feat < 1:
        raise ValueError("classes and features must be positive")
    if per_class < 1:
        raise ValueError("empty dataset: per_class must be >= 1")
    if classes <= n_feat:
        basis = orthogonal_init(n_feat, [int(seed), 0xC1A55])[:classes]
    else:
        g = np.random.default_rng([int(seed), 0xC1A55]).standard_normal((classes, n_feat))
        basis = g / np.linalg.norm(g, axis=1, keepdims=True)
    means = basis * (separation / np.sqrt(2.0))
    split_key = {"train": 1, "test": 2}.get(split, 3)
    rng = np.random.default_rng([int(seed), split_key])
    labels = np.repeat(np.arange(classes), per_class)
    inputs = means[labels] + rng.standard_normal((labels.size, n_feat))
    return Dataset(inputs.reshape((labels.size,) + shape), labels, classes, split)


def batches(dataset, batch_size, epoch_seed, flatten=False):
    """Seeded shuffle of the dataset split into consecutive batches.

    Returns a list of ``(inputs, labels)`` pairs; the final batch may be
    short. ``flatten`` reshapes inputs to ``(B, features)`` for dense nets.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.random.default_rng(epoch_seed).permutation(len(dataset))
    out = []
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        x = dataset.inputs[idx]
        if flatten:
            x = x.reshape(x.shape[0], -1)
        out.append((x, dataset.labels[idx]))
    return out


def batch_indices(n, batch_size, epoch_seed):
    order = np.random.default_rng(epoch_seed).permutation(n)
    return [order[s : s + batch_size] for s in range(0, n, batch_size)]


def standardize(train, *others):
    """Per-channel (or per-feature for flat data) standardization using
    training-set statistics; returns new datasets."""
    x = train.inputs
    axes = (0,) + tuple(range(2, x.ndim)) if x.ndim > 2 else (0,)
    mean = x.mean(axis=axes, keepdims=True)
    std = x.std(axis=axes, keepdims=True)
    std[std == 0] = 1.0
    return [Dataset((d.inputs - mean) / std, d.labels, d.n_classes, d.split) for d in (train,) + others]


def write_mnist_subset(out_dir, n_test=1000, seed=0):
    """Export the 5000-digit MNIST sample bundled with ``mlxtend`` as IDX files.

    Writes ``{train,test}-{images,labels}.idx`` into ``out_dir`` and returns
    the directory. The sample is shuffled with ``seed`` before splitting.
    """
    from mlxtend.data import mnist_data

    images, labels = mnist_data()
    order = np.random.default_rng(seed).permutation(len(labels))
    images = images[order].reshape(-1, 28, 28).astype(np.uint8)
    labels = labels[order].astype(np.uint8)
    os.makedirs(out_dir, exist_ok=True)
    split = len(labels) - n_test
    for name, sl in (("train", slice(0, split)), ("test", slice(split, None))):
        write_idx(os.path.join(out_dir, f"{name}-images.idx"), images[sl])
        write_idx(os.path.join(out_dir, f"{name}-labels.idx"), labels[sl])
    return out_dir


def load_idx_dir(dir_path):
    """Load ``train``/``test`` splits from a directory of IDX files.

    Accepts both the names written by :func:`write_mnist_subset` and the
    official MNIST names (optionally gzipped).
    """
    candidates = {
        "train": [("train-images.idx", "train-labels.idx"), ("train-images-idx3-ubyte", "train-labels-idx1-ubyte")],
        "test": [("test-images.idx", "test-labels.idx"), ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")],
    }
    out = []
    for split, names in candidates.items():
        for img, lab in names:
            for suffix in ("", ".gz"):
                ip, lp = os.path.join(dir_path, img + suffix), os.path.join(dir_path, lab + suffix)
                if os.path.exists(ip) and os.path.exists(lp):
                    out.append(load_idx(ip, lp, split=split))
                    break
            else:
                continue
            break
        else:
            raise ParseError(f"no {split} IDX files found in {dir_path}")
    return tuple(out)
