"""Shared domain types: samples, unit grids, masks, background noise.

Arrays follow a channels-first layout: ``(C, H, W)`` for images and
``(C, L)`` for sequences.  An explanation unit always spans every channel at
its spatial (or temporal) footprint.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F

__all__ = [
    "Sample",
    "UnitGrid",
    "SoftMask",
    "HardMask",
    "BackgroundSampler",
    "build_unit_grid",
    "expand_mask",
    "expand_unit_scores",
    "sample_background",
    "compose_masked_input",
    "gaussian_kernel",
    "unit_index_tensor",
]


@dataclass(frozen=True)
class Sample:
    id: int
    features: np.ndarray
    label: int
    num_classes: int = 10

    def __post_init__(self):
        x = np.asarray(self.features)
        if x.ndim not in (2, 3):
            raise ValueError(f"features must be (C, L) or (C, H, W), got shape {x.shape}")
        if not np.all(np.isfinite(x)) or x.min() < 0.0 or x.max() > 1.0:
            raise ValueError("features must be normalized to [0, 1]")
        if not 0 <= self.label < self.num_classes:
            raise ValueError(f"label {self.label} outside [0, {self.num_classes})")


@dataclass(frozen=True, eq=False)
class UnitGrid:
    """Partition of a sample's spatial positions into explanation units.

    ``unit_index`` has the spatial shape of the sample (no channel axis) and
    holds, for every position, the index of the unit that owns it.
    """

    sample_shape: tuple
    unit_shape: tuple
    num_units: int
    unit_index: np.ndarray = field(repr=False)

    @property
    def spatial_shape(self) -> tuple:
        return tuple(self.sample_shape[1:])

    @property
    def channels(self) -> int:
        return int(self.sample_shape[0])

    @property
    def unit_size(self) -> int:
        """Spatial positions per unit (channels excluded)."""
        return int(np.prod(self.unit_shape))

    @property
    def layout(self) -> tuple:
        """Number of units along each spatial dimension."""
        return tuple(d // u for d, u in zip(self.spatial_shape, self.unit_shape))

    def unit_to_features(self, unit: int) -> np.ndarray:
        """Flat feature indices (into the full ``sample_shape``) covered by ``unit``."""
        if not 0 <= unit < self.num_units:
            raise IndexError(f"unit {unit} out of range for {self.num_units} units")
        positions = np.flatnonzero(self.unit_index.ravel() == unit)
        per_channel = int(np.prod(self.spatial_shape))
        return np.concatenate([positions + c * per_channel for c in range(self.channels)])

    def describe(self) -> str:
        return "x".join(str(u) for u in self.unit_shape)

    def __eq__(self, other):
        if not isinstance(other, UnitGrid):
            return NotImplemented
        return self.sample_shape == other.sample_shape and self.unit_shape == other.unit_shape

    def __hash__(self):
        return hash((self.sample_shape, self.unit_shape))


def build_unit_grid(sample_shape: Sequence[int], unit_shape: Sequence[int]) -> UnitGrid:
    sample_shape = tuple(int(s) for s in sample_shape)
    unit_shape = tuple(int(u) for u in unit_shape)
    spatial = sample_shape[1:]
    if len(spatial) != len(unit_shape):
        raise ValueError(
            f"unit shape {unit_shape} has {len(unit_shape)} dims but sample {sample_shape} "
            f"has {len(spatial)} spatial dims"
        )
    for axis, (d, u) in enumerate(zip(spatial, unit_shape)):
        if u <= 0 or d % u:
            raise ValueError(
                f"unit size {u} does not divide sample dimension {axis + 1} (size {d})"
            )
    layout = tuple(d // u for d, u in zip(spatial, unit_shape))
    coarse = np.arange(int(np.prod(layout))).reshape(layout)
    index = coarse
    for axis, u in enumerate(unit_shape):
        index = np.repeat(index, u, axis=axis)
    index.setflags(write=False)
    return UnitGrid(sample_shape, unit_shape, int(np.prod(layout)), index)


@dataclass(frozen=True)
class SoftMask:
    scores: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=float)
        if s.ndim != 1:
            raise ValueError("soft mask scores must be one-dimensional")
        if not np.all(np.isfinite(s)) or s.min(initial=0.0) < 0.0 or s.max(initial=0.0) > 1.0:
            raise ValueError("soft mask scores must be finite and within [0, 1]")
        object.__setattr__(self, "scores", s)

    @property
    def num_units(self) -> int:
        return len(self.scores)

    def dense(self) -> np.ndarray:
        return self.scores


@dataclass(frozen=True)
class HardMask:
    selected: frozenset
    num_units: int

    def __post_init__(self):
        sel = frozenset(int(i) for i in self.selected)
        if any(i < 0 or i >= self.num_units for i in sel):
            raise ValueError(f"selected units {sorted(sel)} out of range [0, {self.num_units})")
        object.__setattr__(self, "selected", sel)

    @property
    def n_e(self) -> int:
        return len(self.selected)

    def dense(self) -> np.ndarray:
        out = np.zeros(self.num_units)
        out[list(self.selected)] = 1.0
        return out


_INDEX_CACHE: dict = {}


def unit_index_tensor(grid: UnitGrid) -> torch.Tensor:
    """Flattened spatial unit ids as a cached int64 tensor."""
    key = (grid.sample_shape, grid.unit_shape)
    if key not in _INDEX_CACHE:
        _INDEX_CACHE[key] = torch.from_numpy(np.array(grid.unit_index, dtype=np.int64).ravel())
    return _INDEX_CACHE[key]


def expand_unit_scores(scores: torch.Tensor, grid: UnitGrid) -> torch.Tensor:
    """Batched unit-to-feature expansion: ``(B, U)`` -> ``(B, *sample_shape)``.

    Differentiable; equivalent to nearest-neighbour upsampling of the unit map.
    """
    if scores.shape[-1] != grid.num_units:
        raise ValueError(f"mask has {scores.shape[-1]} units, grid has {grid.num_units}")
    index = unit_index_tensor(grid).to(scores.device)
    spatial = scores[:, index].reshape(scores.shape[0], 1, *grid.spatial_shape)
    return spatial.expand(-1, grid.channels, *grid.spatial_shape)


def expand_mask(mask: Union[SoftMask, HardMask], grid: UnitGrid) -> np.ndarray:
    dense = mask.dense()
    if len(dense) != grid.num_units:
        raise ValueError(f"mask has {len(dense)} units, grid has {grid.num_units}")
    spatial = dense[grid.unit_index]
    return np.broadcast_to(spatial, grid.sample_shape).copy()


def gaussian_kernel(size: int = 11, sigma: float = 5.0) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


class BackgroundSampler:
    """Fills non-selected features with background noise.

    Modes
    -----
    empirical
        ``E(j)`` is drawn independently, for every feature ``j``, from the
        values that feature takes across the training pool.
    mean
        ``E(j)`` is the training mean of feature ``j``.
    gaussian-blur
        ``E`` is a Gaussian-blurred copy of the sample being masked.
    zero
        All zeros (used when background noise is ablated).
    """

    MODES = ("empirical", "mean", "gaussian-blur", "zero")

    def __init__(self, pool, mode: str = "empirical", rng_seed: int = 0,
                 blur_size: int = 11, blur_sigma: float = 5.0):
        if mode not in self.MODES:
            raise ValueError(f"unknown background mode {mode!r}; choose from {self.MODES}")
        pool = torch.as_tensor(np.asarray(pool) if not isinstance(pool, torch.Tensor) else pool)
        if pool.ndim < 2 or pool.shape[0] == 0:
            raise ValueError("background pool is empty")
        self.pool = pool.float()
        self.mode = mode
        self.rng_seed = rng_seed
        self.sample_shape = tuple(pool.shape[1:])
        self._flat = self.pool.reshape(pool.shape[0], -1)
        self.mean = self._flat.mean(0).reshape(self.sample_shape)
        self.blur_size = blur_size
        self.blur_sigma = blur_sigma

    def __len__(self):
        return self.pool.shape[0]

    def with_mode(self, mode: str) -> "BackgroundSampler":
        return BackgroundSampler(self.pool, mode, self.rng_seed, self.blur_size, self.blur_sigma)

    def sample(self, batch: int, generator: torch.Generator = None, x: torch.Tensor = None) -> torch.Tensor:
        """Draw a ``(batch, *sample_shape)`` noise tensor."""
        if self.mode == "empirical":
            n, m = self._flat.shape
            idx = torch.randint(0, n, (batch, m), generator=generator)
            return torch.gather(self._flat, 0, idx).reshape(batch, *self.sample_shape)
        if self.mode == "mean":
            return self.mean.expand(batch, *self.sample_shape).clone()
        if self.mode == "zero":
            return torch.zeros(batch, *self.sample_shape)
        if x is None:
            raise ValueError("gaussian-blur background requires the sample being masked")
        return _blur(x, self.blur_size, self.blur_sigma)


def _blur(x: torch.Tensor, size: int, sigma: float) -> torch.Tensor:
    if x.ndim != 4:
        raise ValueError("gaussian-blur background is only defined for image batches")
    c = x.shape[1]
    k = torch.as_tensor(gaussian_kernel(size, sigma), dtype=x.dtype)
    weight = k.expand(c, 1, size, size).contiguous()
    padded = F.pad(x, [size // 2] * 4, mode="replicate")
    return F.conv2d(padded, weight, groups=c)


def sample_background(sampler: BackgroundSampler, shape, rng, x=None) -> np.ndarray:
    """Draw one noise array of ``shape`` (the sampler's sample shape).

    ``rng`` is either an integer seed or a ``torch.Generator``.
    """
    shape = tuple(shape)
    if shape != sampler.sample_shape:
        raise ValueError(f"requested shape {shape} differs from pool shape {sampler.sample_shape}")
    if not isinstance(rng, torch.Generator):
        rng = torch.Generator().manual_seed(int(rng))
    xt = None if x is None else torch.as_tensor(np.asarray(x), dtype=torch.float32)[None]
    return sampler.sample(1, rng, xt)[0].numpy()


def compose_masked_input(x, mask, noise):
    """``x * mask + noise * (1 - mask)``; works on numpy arrays or tensors."""
    if tuple(x.shape) != tuple(mask.shape) or tuple(x.shape) != tuple(noise.shape):
        raise ValueError(
            f"shape mismatch: x {tuple(x.shape)}, mask {tuple(mask.shape)}, noise {tuple(noise.shape)}"
        )
    return x * mask + noise * (1 - mask)
