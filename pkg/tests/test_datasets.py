import gzip
import struct

import numpy as np
import pytest

from dorar import datasets


def _idx_images(arr):
    n, r, c = arr.shape
    return struct.pack(">IIII", 2051, n, r, c) + arr.astype(np.uint8).tobytes()


def _idx_labels(arr):
    return struct.pack(">II", 2049, len(arr)) + arr.astype(np.uint8).tobytes()


def test_parse_idx_round_trip():
    img = np.arange(2 * 3 * 4).reshape(2, 3, 4).astype(np.uint8)
    np.testing.assert_array_equal(datasets.parse_idx(_idx_images(img)), img)
    lab = np.array([3, 1, 4], dtype=np.uint8)
    np.testing.assert_array_equal(datasets.parse_idx(_idx_labels(lab)), lab)


def test_parse_idx_rejects_bad_input():
    with pytest.raises(ValueError, match="magic"):
        datasets.parse_idx(struct.pack(">II", 1234, 0))
    with pytest.raises(ValueError, match="payload"):
        datasets.parse_idx(_idx_labels(np.zeros(3))[:-1])


def test_mnist_loader_from_fabricated_files(tmp_path):
    root = tmp_path / "mnist"
    root.mkdir()
    rng = np.random.default_rng(0)
    tr = rng.integers(0, 256, (30, 28, 28))
    te = rng.integers(0, 256, (10, 28, 28))
    files = {
        "train-images-idx3-ubyte": _idx_images(tr), "train-labels-idx1-ubyte": _idx_labels(np.arange(30) % 10),
        "t10k-images-idx3-ubyte": _idx_images(te), "t10k-labels-idx1-ubyte": _idx_labels(np.arange(10)),
    }
    for name, raw in files.items():
        (root / (name + ".gz")).write_bytes(gzip.compress(raw))
    with pytest.raises(ValueError, match="checksum"):
        datasets.load_mnist_arrays(tmp_path)
    arrays = datasets.load_mnist_arrays(tmp_path, verify=False)
    assert arrays["train_images"].shape == (30, 28, 28)
    data = datasets.load_mnist(tmp_path, n_val=5)
    assert data.x_train.shape == (25, 1, 28, 28) and data.x_val.shape == (5, 1, 28, 28)
    assert float(data.x_train.max()) <= 1.0 and float(data.x_train.min()) >= 0.0
    assert data.x_train[0, 0, 0, 0].item() == pytest.approx(tr[0, 0, 0] / 255.0)


def test_missing_dataset_is_reported(tmp_path):
    with pytest.raises(datasets.DatasetUnavailable):
        datasets.load_mnist_arrays(tmp_path)
    with pytest.raises(ValueError):
        datasets.load_dataset("imagenet")


def test_cifar_batch_layout(tmp_path):
    rng = np.random.default_rng(1)
    rec = rng.integers(0, 256, (7, datasets.CIFAR_RECORD)).astype(np.uint8)
    rec[:, 0] = np.arange(7) % 10
    x, y = datasets.parse_cifar_batch(rec.tobytes())
    assert x.shape == (7, 3, 32, 32)
    assert y.tolist() == list(np.arange(7) % 10)
    # channel-major layout: the first 1024 pixel bytes are the red plane
    np.testing.assert_array_equal(x[2, 0].ravel(), rec[2, 1:1025])
    with pytest.raises(ValueError):
        datasets.parse_cifar_batch(rec.tobytes()[:-1])
    root = tmp_path / "cifar10"
    root.mkdir()
    for name in datasets.CIFAR_TRAIN_BATCHES + [datasets.CIFAR_TEST_BATCH]:
        (root / name).write_bytes(rec.tobytes())
    data = datasets.load_cifar10(tmp_path, n_val=5)
    assert data.x_train.shape == (30, 3, 32, 32) and data.x_test.shape == (7, 3, 32, 32)


def test_subset_slices():
    data = datasets.load_synthetic(0, samples_per_user=10)
    small = data.subset(train=5, test=3)
    assert len(small.x_train) == 5 and len(small.x_test) == 3 and len(small.x_val) == len(data.x_val)
