"""Dataset ingestion: MNIST (IDX), CIFAR-10 (binary batches), synthetic trajectories.

All features are normalized to [0, 1] at load time.  Files are looked up in
``$DORAR_DATA_DIR`` (default ``~/.cache/dorar``) and a parsed copy is cached
next to them as ``.npz``.
"""

from __future__ import annotations

import gzip
import hashlib
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

# SHA-256 of the decompressed IDX files.
MNIST_FILES = {
    "train_images": ("train-images-idx3-ubyte", "ba891046e6505d7aadcbbe25680a0738ad16aec93bde7f9b65e87a2fc25776db"),
    "train_labels": ("train-labels-idx1-ubyte", "65a50cbbf4e906d70832878ad85ccda5333a97f0f4c3dd2ef09a8a9eef7101c5"),
    "test_images": ("t10k-images-idx3-ubyte", "0fa7898d509279e482958e8ce81c8e77db3f2f8254e26661ceb7762c4d494ce7"),
    "test_labels": ("t10k-labels-idx1-ubyte", "ff7bcfd416de33731a308c3f266cc351222c34898ecbeaf847f06e48f7ec33f2"),
}
IDX_IMAGES_MAGIC = 2051
IDX_LABELS_MAGIC = 2049

CIFAR_TRAIN_BATCHES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_BATCH = "test_batch.bin"
CIFAR_RECORD = 1 + 3 * 32 * 32


class DatasetUnavailable(FileNotFoundError):
    pass


def data_dir() -> Path:
    return Path(os.environ.get("DORAR_DATA_DIR", Path.home() / ".cache" / "dorar"))


@dataclass
class Dataset:
    kind: str
    x_train: torch.Tensor
    y_train: torch.Tensor
    x_val: torch.Tensor
    y_val: torch.Tensor
    x_test: torch.Tensor
    y_test: torch.Tensor
    num_classes: int
    meta: dict = field(default_factory=dict)

    @property
    def sample_shape(self) -> tuple:
        return tuple(self.x_train.shape[1:])

    def subset(self, train=None, val=None, test=None) -> "Dataset":
        """Leading slices of each split (for quick runs)."""
        def cut(x, n):
            return x if n is None else x[:n]
        return Dataset(self.kind, cut(self.x_train, train), cut(self.y_train, train),
                       cut(self.x_val, val), cut(self.y_val, val),
                       cut(self.x_test, test), cut(self.y_test, test),
                       self.num_classes, dict(self.meta))


# ---------------------------------------------------------------------- IDX


def _read_maybe_gz(path: Path) -> bytes:
    if path.exists():
        return path.read_bytes()
    gz = path.with_name(path.name + ".gz")
    if gz.exists():
        return gzip.decompress(gz.read_bytes())
    raise DatasetUnavailable(f"neither {path} nor {gz} exists")


def parse_idx(raw: bytes) -> np.ndarray:
    """Parse an IDX byte string (big-endian header) into a uint8 array."""
    magic, count = struct.unpack(">II", raw[:8])
    if magic == IDX_IMAGES_MAGIC:
        rows, cols = struct.unpack(">II", raw[8:16])
        arr = np.frombuffer(raw, dtype=np.uint8, offset=16)
        expected = (count, rows, cols)
    elif magic == IDX_LABELS_MAGIC:
        arr = np.frombuffer(raw, dtype=np.uint8, offset=8)
        expected = (count,)
    else:
        raise ValueError(f"unrecognized IDX magic number {magic}")
    if arr.size != int(np.prod(expected)):
        raise ValueError(f"IDX payload has {arr.size} bytes, header expects {int(np.prod(expected))}")
    return arr.reshape(expected)


def _verify(raw: bytes, digest: str, name: str):
    got = hashlib.sha256(raw).hexdigest()
    if got != digest:
        raise ValueError(f"checksum mismatch for {name}: {got}")


def load_mnist_arrays(root: Path = None, verify: bool = True) -> dict:
    root = Path(root or data_dir()) / "mnist"
    cache = root / "mnist-cache.npz"
    if cache.exists():
        with np.load(cache) as z:
            return {k: z[k] for k in z.files}
    out = {}
    for key, (fname, digest) in MNIST_FILES.items():
        raw = _read_maybe_gz(root / fname)
        if verify:
            _verify(raw, digest, fname)
        out[key] = parse_idx(raw)
    np.savez(cache, **out)
    return out


def _split(kind, x, y, x_test, y_test, n_val, num_classes, meta=None) -> Dataset:
    n = len(x) - n_val
    return Dataset(kind, x[:n], y[:n], x[n:], y[n:], x_test, y_test, num_classes, meta or {})


def load_mnist(root: Path = None, n_val: int = 10_000) -> Dataset:
    """50k train / 10k validation (tail of the official train set) / 10k test."""
    a = load_mnist_arrays(root)

    def images(arr):
        return torch.from_numpy(arr.astype(np.float32) / 255.0).unsqueeze(1)

    def labels(arr):
        return torch.from_numpy(arr.astype(np.int64))

    return _split("mnist", images(a["train_images"]), labels(a["train_labels"]),
                  images(a["test_images"]), labels(a["test_labels"]), n_val, 10)


# -------------------------------------------------------------------- CIFAR


def parse_cifar_batch(raw: bytes):
    """Parse a CIFAR-10 binary batch (1 label byte + 3072 pixel bytes per record)."""
    if len(raw) % CIFAR_RECORD:
        raise ValueError(f"CIFAR batch length {len(raw)} is not a multiple of {CIFAR_RECORD}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    return rec[:, 1:].reshape(-1, 3, 32, 32), rec[:, 0].astype(np.int64)


def load_cifar10(root: Path = None, n_val: int = 5_000) -> Dataset:
    root = Path(root or data_dir()) / "cifar10"
    xs, ys = [], []
    for name in CIFAR_TRAIN_BATCHES:
        x, y = parse_cifar_batch(_read_maybe_gz(root / name))
        xs.append(x)
        ys.append(y)
    xt, yt = parse_cifar_batch(_read_maybe_gz(root / CIFAR_TEST_BATCH))

    def images(arr):
        return torch.from_numpy(arr.astype(np.float32) / 255.0)

    return _split("cifar10", images(np.concatenate(xs)), torch.from_numpy(np.concatenate(ys)),
                  images(xt), torch.from_numpy(yt), n_val, 10)


# ---------------------------------------------------------------- synthetic


def load_synthetic(path_or_seed=0, n_val_fraction: float = 0.1, **gen_kwargs) -> Dataset:
    """Synthetic trajectories from a saved directory or generated from a seed."""
    from . import synthdata

    if isinstance(path_or_seed, (str, Path)):
        d = Path(path_or_seed)
        train = synthdata.read_split(d / "train.csv")
        test = synthdata.read_split(d / "test.csv")
        meta = synthdata.read_header(d / "train.csv")
    else:
        samples = synthdata.generate_dataset(rng=int(path_or_seed), **gen_kwargs)
        train, test = synthdata.train_test_split(samples, rng=int(path_or_seed))
        meta = {}
    return synthdata.to_dataset(train, test, n_val_fraction=n_val_fraction, meta=meta)


def load_dataset(kind: str, **kwargs) -> Dataset:
    if kind == "mnist":
        return load_mnist(**kwargs)
    if kind == "cifar10":
        return load_cifar10(**kwargs)
    if kind == "synthetic":
        return load_synthetic(**kwargs)
    raise ValueError(f"unknown dataset {kind!r}")
