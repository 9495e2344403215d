"""Black-box classifiers, feature selectors and generative reconstructors.

Every model carries a JSON-serializable ``descriptor`` (builder name, builder
arguments, and a human-readable layer list) so that checkpoints can rebuild
the module without pickling code.
"""

from __future__ import annotations

import json
import math
import struct
from pathlib import Path

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .core import UnitGrid, build_unit_grid

DATASET_KINDS = ("mnist", "cifar10", "synthetic")

# Unspecified by the architecture descriptions; conventional defaults.
FC_DROPOUT = 0.5
CONV_DROPOUT = 0.25
INPUT_DROPOUT = 0.1


class DescribedModule(nn.Module):
    role = "model"

    def __init__(self, builder: str, args: dict, layers: list):
        super().__init__()
        self.descriptor = {"role": self.role, "builder": builder, "args": args, "layers": layers}


# ---------------------------------------------------------------- classifiers


class MnistBlackBox(DescribedModule):
    role = "blackbox"

    def __init__(self, conv_dropout=CONV_DROPOUT, fc_dropout=FC_DROPOUT):
        layers = [
            {"type": "conv2d", "kernel": 5, "filters": 10},
            {"type": "maxpool", "size": 2},
            {"type": "relu"},
            {"type": "conv2d", "kernel": 2, "filters": 20},
            {"type": "dropout2d", "p": conv_dropout},
            {"type": "relu"},
            {"type": "maxpool", "size": 2},
            {"type": "relu"},
            {"type": "linear", "units": 20},
            {"type": "relu"},
            {"type": "dropout", "p": fc_dropout},
            {"type": "linear", "units": 10},
            {"type": "log_softmax"},
        ]
        super().__init__("mnist_blackbox", {"conv_dropout": conv_dropout, "fc_dropout": fc_dropout}, layers)
        self.num_classes = 10
        self.conv1 = nn.Conv2d(1, 10, 5)
        self.conv2 = nn.Conv2d(10, 20, 2)
        self.drop2d = nn.Dropout2d(conv_dropout)
        self.fc1 = nn.Linear(20 * 5 * 5, 20)
        self.drop = nn.Dropout(fc_dropout)
        self.fc2 = nn.Linear(20, 10)

    def forward(self, x):
        x = F.relu(F.max_pool2d(self.conv1(x), 2))
        x = F.relu(self.drop2d(self.conv2(x)))
        x = F.relu(F.max_pool2d(x, 2))
        x = F.relu(self.fc1(x.flatten(1)))
        return F.log_softmax(self.fc2(self.drop(x)), dim=1)


class CifarBlackBox(DescribedModule):
    """Plain four-convolution CNN standing in for the tree-block classifier."""

    role = "blackbox"

    def __init__(self, conv_dropout=CONV_DROPOUT, fc_dropout=FC_DROPOUT):
        layers = [
            {"type": "conv2d", "kernel": 3, "filters": 32}, {"type": "batchnorm"}, {"type": "relu"},
            {"type": "conv2d", "kernel": 3, "filters": 32}, {"type": "relu"}, {"type": "maxpool", "size": 2},
            {"type": "dropout2d", "p": conv_dropout},
            {"type": "conv2d", "kernel": 3, "filters": 64}, {"type": "batchnorm"}, {"type": "relu"},
            {"type": "conv2d", "kernel": 3, "filters": 64}, {"type": "relu"}, {"type": "maxpool", "size": 2},
            {"type": "dropout2d", "p": conv_dropout},
            {"type": "linear", "units": 256}, {"type": "relu"}, {"type": "dropout", "p": fc_dropout},
            {"type": "linear", "units": 10}, {"type": "log_softmax"},
        ]
        super().__init__("cifar_blackbox", {"conv_dropout": conv_dropout, "fc_dropout": fc_dropout}, layers)
        self.num_classes = 10
        self.features = nn.Sequential(
            nn.Conv2d(3, 32, 3, padding=1), nn.BatchNorm2d(32), nn.ReLU(),
            nn.Conv2d(32, 32, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2), nn.Dropout2d(conv_dropout),
            nn.Conv2d(32, 64, 3, padding=1), nn.BatchNorm2d(64), nn.ReLU(),
            nn.Conv2d(64, 64, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2), nn.Dropout2d(conv_dropout),
        )
        self.head = nn.Sequential(
            nn.Flatten(), nn.Linear(64 * 8 * 8, 256), nn.ReLU(), nn.Dropout(fc_dropout), nn.Linear(256, 10)
        )

    def forward(self, x):
        return F.log_softmax(self.head(self.features(x)), dim=1)


class SyntheticBlackBox(DescribedModule):
    """Convolutional detector for planted trajectory modifications.

    A 2x9 convolution mixes the two velocity channels, followed by two 1-D
    convolutions (kernels 7 and 5) with 64/96/128 filters.  The recurrent
    layer of the original design is omitted; the task is separable without it.
    """

    role = "blackbox"

    def __init__(self, length=160, num_classes=2, input_dropout=INPUT_DROPOUT,
                 conv_dropout=CONV_DROPOUT, fc_dropout=FC_DROPOUT):
        if length % 4:
            raise ValueError("sequence length must be divisible by 4")
        layers = [
            {"type": "dropout", "p": input_dropout},
            {"type": "conv2d", "kernel": [2, 9], "filters": 64}, {"type": "relu"},
            {"type": "maxpool", "size": 2}, {"type": "batchnorm"},
            {"type": "dropout", "p": conv_dropout},
            {"type": "conv1d", "kernel": 7, "filters": 96}, {"type": "relu"},
            {"type": "maxpool", "size": 2}, {"type": "batchnorm"},
            {"type": "dropout", "p": conv_dropout},
            {"type": "conv1d", "kernel": 5, "filters": 128}, {"type": "relu"},
            {"type": "linear", "units": 128}, {"type": "relu"}, {"type": "dropout", "p": fc_dropout},
            {"type": "linear", "units": num_classes}, {"type": "log_softmax"},
        ]
        args = {"length": length, "num_classes": num_classes, "input_dropout": input_dropout,
                "conv_dropout": conv_dropout, "fc_dropout": fc_dropout}
        super().__init__("synthetic_blackbox", args, layers)
        self.num_classes = num_classes
        self.in_drop = nn.Dropout(input_dropout)
        self.conv1 = nn.Conv2d(1, 64, (2, 9), padding=(0, 4))
        self.bn1 = nn.BatchNorm1d(64)
        self.drop1 = nn.Dropout(conv_dropout)
        self.conv2 = nn.Conv1d(64, 96, 7, padding=3)
        self.bn2 = nn.BatchNorm1d(96)
        self.drop2 = nn.Dropout(conv_dropout)
        self.conv3 = nn.Conv1d(96, 128, 5, padding=2)
        self.fc1 = nn.Linear(128 * (length // 4), 128)
        self.drop = nn.Dropout(fc_dropout)
        self.fc2 = nn.Linear(128, num_classes)

    def forward(self, x):
        x = self.in_drop(x).unsqueeze(1)
        x = F.relu(self.conv1(x)).squeeze(2)
        x = self.bn1(F.max_pool1d(x, 2))
        x = self.bn2(F.max_pool1d(F.relu(self.conv2(self.drop1(x))), 2))
        x = F.relu(self.conv3(self.drop2(x)))
        x = F.relu(self.fc1(x.flatten(1)))
        return F.log_softmax(self.fc2(self.drop(x)), dim=1)


def build_mnist_blackbox(**kwargs) -> MnistBlackBox:
    return MnistBlackBox(**kwargs)


def build_blackbox(dataset_kind: str, **kwargs) -> DescribedModule:
    if dataset_kind == "mnist":
        return MnistBlackBox(**kwargs)
    if dataset_kind == "cifar10":
        return CifarBlackBox(**kwargs)
    if dataset_kind == "synthetic":
        return SyntheticBlackBox(**kwargs)
    raise ValueError(f"unknown dataset kind {dataset_kind!r}; choose from {DATASET_KINDS}")


# ------------------------------------------------------------------ selectors


def _pool_stages(unit: int) -> int:
    stages = int(round(math.log2(unit))) if unit >= 1 else -1
    if stages < 0 or 2**stages != unit or stages > 2:
        raise ValueError(f"unit size {unit} unsupported; selectors handle 1, 2 or 4")
    return stages


class ImageSelector(DescribedModule):
    """Three-convolution selector emitting a log-softmax over image units.

    Pooling stages (0, 1 or 2) are derived from the unit size so that the
    final single-channel map has exactly one cell per unit.
    """

    role = "selector"

    def __init__(self, sample_shape, unit_shape, filters=(16, 32), kernel=5):
        sample_shape = tuple(sample_shape)
        unit_shape = tuple(unit_shape)
        if unit_shape[0] != unit_shape[1]:
            raise ValueError("image selectors need square units")
        stages = _pool_stages(unit_shape[0])
        f1, f2 = filters
        layers = [{"type": "conv2d", "kernel": kernel, "filters": f1}, {"type": "relu"}]
        if stages >= 1:
            layers.append({"type": "maxpool", "size": 2})
        layers += [{"type": "conv2d", "kernel": kernel, "filters": f2}, {"type": "relu"}]
        if stages >= 2:
            layers.append({"type": "maxpool", "size": 2})
        layers += [{"type": "conv2d", "kernel": 1, "filters": 1}, {"type": "flatten"}, {"type": "log_softmax"}]
        args = {"sample_shape": list(sample_shape), "unit_shape": list(unit_shape),
                "filters": list(filters), "kernel": kernel}
        super().__init__("image_selector", args, layers)
        self.grid = build_unit_grid(sample_shape, unit_shape)
        self.stages = stages
        pad = kernel // 2
        self.conv1 = nn.Conv2d(sample_shape[0], f1, kernel, padding=pad)
        self.conv2 = nn.Conv2d(f1, f2, kernel, padding=pad)
        self.conv3 = nn.Conv2d(f2, 1, 1)

    def forward(self, x):
        x = F.relu(self.conv1(x))
        if self.stages >= 1:
            x = F.max_pool2d(x, 2)
        x = F.relu(self.conv2(x))
        if self.stages >= 2:
            x = F.max_pool2d(x, 2)
        return F.log_softmax(self.conv3(x).flatten(1), dim=1)


class SequenceSelector(DescribedModule):
    """Selector for (2, L) velocity sequences with 4-step segment units."""

    role = "selector"

    def __init__(self, sample_shape, unit_shape=(4,), filters=(64, 96)):
        sample_shape = tuple(sample_shape)
        unit_shape = tuple(unit_shape)
        stages = _pool_stages(unit_shape[0])
        f1, f2 = filters
        layers = [{"type": "conv2d", "kernel": [sample_shape[0], 9], "filters": f1}, {"type": "relu"}]
        if stages >= 1:
            layers.append({"type": "maxpool", "size": 2})
        layers += [{"type": "conv1d", "kernel": 7, "filters": f2}, {"type": "relu"}]
        if stages >= 2:
            layers.append({"type": "maxpool", "size": 2})
        layers += [{"type": "conv1d", "kernel": 5, "filters": 1}, {"type": "flatten"}, {"type": "log_softmax"}]
        args = {"sample_shape": list(sample_shape), "unit_shape": list(unit_shape), "filters": list(filters)}
        super().__init__("sequence_selector", args, layers)
        self.grid = build_unit_grid(sample_shape, unit_shape)
        self.stages = stages
        self.conv1 = nn.Conv2d(1, f1, (sample_shape[0], 9), padding=(0, 4))
        self.conv2 = nn.Conv1d(f1, f2, 7, padding=3)
        self.conv3 = nn.Conv1d(f2, 1, 5, padding=2)

    def forward(self, x):
        x = F.relu(self.conv1(x.unsqueeze(1))).squeeze(2)
        if self.stages >= 1:
            x = F.max_pool1d(x, 2)
        x = F.relu(self.conv2(x))
        if self.stages >= 2:
            x = F.max_pool1d(x, 2)
        return F.log_softmax(self.conv3(x).flatten(1), dim=1)


def build_selector(grid: UnitGrid, dataset_kind: str) -> DescribedModule:
    if dataset_kind == "mnist":
        if grid.sample_shape != (1, 28, 28):
            raise ValueError(f"grid {grid.sample_shape} is not an MNIST grid")
        return ImageSelector(grid.sample_shape, grid.unit_shape, filters=(16, 32))
    if dataset_kind == "cifar10":
        if grid.sample_shape != (3, 32, 32):
            raise ValueError(f"grid {grid.sample_shape} is not a CIFAR-10 grid")
        return ImageSelector(grid.sample_shape, grid.unit_shape, filters=(8, 16))
    if dataset_kind == "synthetic":
        if len(grid.sample_shape) != 2:
            raise ValueError(f"grid {grid.sample_shape} is not a sequence grid")
        return SequenceSelector(grid.sample_shape, grid.unit_shape)
    raise ValueError(f"unsupported (grid, dataset) pair: {grid.sample_shape} / {dataset_kind!r}")


# ----------------------------------------------------------------- generators


class Generator(DescribedModule):
    """Two fully-connected layers: hidden ReLU, sigmoid output of sample shape."""

    role = "generator"

    def __init__(self, sample_shape, hidden=None):
        sample_shape = tuple(sample_shape)
        flat = int(np.prod(sample_shape))
        hidden = flat if hidden is None else int(hidden)
        layers = [{"type": "linear", "units": hidden}, {"type": "relu"},
                  {"type": "linear", "units": flat}, {"type": "sigmoid"}]
        super().__init__("generator", {"sample_shape": list(sample_shape), "hidden": hidden}, layers)
        self.sample_shape = sample_shape
        self.fc1 = nn.Linear(flat, hidden)
        self.fc2 = nn.Linear(hidden, flat)

    @property
    def layer_widths(self) -> tuple:
        return (self.fc1.out_features, self.fc2.out_features)

    def forward(self, x):
        h = F.relu(self.fc1(x.flatten(1)))
        return torch.sigmoid(self.fc2(h)).reshape(x.shape[0], *self.sample_shape)


def build_generator(sample_shape, dataset_kind: str, hidden=None) -> Generator:
    if dataset_kind not in DATASET_KINDS:
        raise ValueError(f"unknown dataset kind {dataset_kind!r}")
    return Generator(sample_shape, hidden)


# ---------------------------------------------------------------- checkpoints

_BUILDERS = {
    "mnist_blackbox": MnistBlackBox,
    "cifar_blackbox": CifarBlackBox,
    "synthetic_blackbox": SyntheticBlackBox,
    "image_selector": ImageSelector,
    "sequence_selector": SequenceSelector,
    "generator": Generator,
}

_MAGIC = b"DORARCK1"


def checkpoint_name(role: str, dataset: str, seed: int) -> str:
    return f"{role}-{dataset}-{seed}.ckpt"


def save_checkpoint(model: DescribedModule, path, extra: dict = None) -> Path:
    """Write ``model`` as JSON header + raw little-endian tensor payload."""
    path = Path(path)
    tensors, chunks, offset = [], [], 0
    for name, t in model.state_dict().items():
        arr = t.detach().cpu().contiguous().numpy()
        data = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        tensors.append({"name": name, "dtype": arr.dtype.str.lstrip("<>|="), "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    header = {"descriptor": model.descriptor, "tensors": tensors, "extra": extra or {}}
    blob = json.dumps(header, sort_keys=True).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for c in chunks:
            fh.write(c)
    return path


def read_checkpoint_header(path) -> dict:
    with open(path, "rb") as fh:
        if fh.read(8) != _MAGIC:
            raise ValueError(f"{path} is not a checkpoint file")
        (n,) = struct.unpack("<Q", fh.read(8))
        return json.loads(fh.read(n))


def load_checkpoint(path) -> DescribedModule:
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise ValueError(f"{path} is not a checkpoint file")
    (n,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + n])
    payload = memoryview(raw)[16 + n:]
    desc = header["descriptor"]
    model = _BUILDERS[desc["builder"]](**desc["args"])
    state = {}
    for t in header["tensors"]:
        buf = payload[t["offset"]:t["offset"] + t["nbytes"]]
        arr = np.frombuffer(buf, dtype=np.dtype("<" + t["dtype"]) if t["dtype"][0] in "fiu" else t["dtype"])
        state[t["name"]] = torch.from_numpy(arr.reshape(t["shape"]).copy())
    model.load_state_dict(state)
    model.checkpoint_extra = header.get("extra", {})
    return model


def freeze(model: nn.Module) -> nn.Module:
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def accuracy(model: nn.Module, x: torch.Tensor, y: torch.Tensor, batch: int = 1000) -> float:
    model.eval()
    with torch.no_grad():
        hits = sum(int((model(x[i:i + batch]).argmax(1) == y[i:i + batch]).sum()) for i in range(0, len(x), batch))
    return hits / len(x)


def train_classifier(model: nn.Module, x: torch.Tensor, y: torch.Tensor, epochs: int = 3, batch_size: int = 100,
                     lr: float = 1e-3, seed: int = 0, log=None) -> nn.Module:
    """Plain supervised training with Adam and NLL loss on log-probabilities.

    Dropout draws from the global RNG, which is seeded here and restored on
    exit so the result does not depend on what ran before.
    """
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        for epoch in range(epochs):
            model.train()
            perm = torch.randperm(len(x), generator=gen)
            for i in range(0, len(x), batch_size):
                idx = perm[i:i + batch_size]
                opt.zero_grad(set_to_none=True)
                F.nll_loss(model(x[idx]), y[idx]).backward()
                opt.step()
            if log is not None:
                log(epoch)
    model.eval()
    return model
