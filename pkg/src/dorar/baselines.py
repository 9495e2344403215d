"""Gradient saliency, SmoothGrad and a random control, aggregated to units."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .core import HardMask, UnitGrid, unit_index_tensor


@dataclass
class AttributionRecord:
    sample_id: int
    unit_scores: np.ndarray
    method_name: str
    grid: str = ""

    def __post_init__(self):
        s = np.asarray(self.unit_scores, dtype=float)
        if s.ndim != 1 or not np.all(np.isfinite(s)):
            raise ValueError("unit scores must be a finite 1-d array")
        self.unit_scores = s

    @property
    def num_units(self) -> int:
        return len(self.unit_scores)


def aggregate_units(feature_scores: torch.Tensor, grid: UnitGrid, reduce: str = "sum") -> torch.Tensor:
    """Collapse ``(B, *sample_shape)`` non-negative feature scores to ``(B, U)``."""
    b = feature_scores.shape[0]
    index = unit_index_tensor(grid).repeat(grid.channels)
    flat = feature_scores.reshape(b, -1)
    out = torch.zeros(b, grid.num_units, dtype=flat.dtype)
    if reduce == "sum":
        return out.index_add_(1, index, flat)
    if reduce == "max":
        return out.scatter_reduce_(1, index.expand(b, -1), flat, reduce="amax", include_self=False)
    raise ValueError(f"unknown aggregation {reduce!r}; use 'sum' or 'max'")


def _target_log_prob_grad(blackbox, x: torch.Tensor, target: torch.Tensor = None):
    x = x.detach().clone().requires_grad_(True)
    logp = blackbox(x)
    if target is None:
        target = logp.argmax(1)
    picked = logp.gather(1, target[:, None]).sum()
    if not picked.requires_grad:
        raise TypeError("black box output is not differentiable with respect to its input")
    (grad,) = torch.autograd.grad(picked, x, allow_unused=True)
    if grad is None:
        grad = torch.zeros_like(x)
    return grad, target


def saliency_scores(blackbox, x: torch.Tensor, grid: UnitGrid, reduce: str = "sum") -> torch.Tensor:
    """Unit scores ``(B, U)`` from ``|d log P(x)[argmax] / dx|``."""
    grad, _ = _target_log_prob_grad(blackbox, x)
    return aggregate_units(grad.abs(), grid, reduce)


def smoothgrad_scores(blackbox, x: torch.Tensor, grid: UnitGrid, num_samples: int = 50, sigma: float = 0.15,
                      generator: torch.Generator = None, reduce: str = "sum") -> torch.Tensor:
    """Average of per-copy absolute saliency over Gaussian-perturbed inputs.

    The explained class stays fixed at the prediction on the clean input.
    """
    if num_samples < 1:
        raise ValueError("num_samples must be >= 1")
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    with torch.no_grad():
        target = blackbox(x).argmax(1)
    total = torch.zeros(x.shape, dtype=x.dtype)
    for _ in range(num_samples):
        noisy = x + sigma * torch.randn(x.shape, generator=generator) if sigma > 0 else x
        grad, _ = _target_log_prob_grad(blackbox, noisy, target)
        total += grad.abs()
    return aggregate_units(total / num_samples, grid, reduce)


def _records(scores: torch.Tensor, method: str, grid: UnitGrid, first_id: int):
    return [AttributionRecord(first_id + i, s.numpy(), method, grid.describe()) for i, s in enumerate(scores)]


def grad_attribution(blackbox, x, grid: UnitGrid, sample_id: int = 0, reduce: str = "sum"):
    """AttributionRecord for a single sample, or a list for a batch."""
    x = torch.as_tensor(np.asarray(x) if not isinstance(x, torch.Tensor) else x, dtype=torch.float32)
    single = x.ndim == len(grid.sample_shape)
    scores = saliency_scores(blackbox, x[None] if single else x, grid, reduce).detach()
    recs = _records(scores, "grad", grid, sample_id)
    return recs[0] if single else recs


def smoothgrad_attribution(blackbox, x, grid: UnitGrid, num_samples: int = 50, sigma: float = 0.15,
                           seed: int = 0, sample_id: int = 0, reduce: str = "sum"):
    x = torch.as_tensor(np.asarray(x) if not isinstance(x, torch.Tensor) else x, dtype=torch.float32)
    single = x.ndim == len(grid.sample_shape)
    gen = torch.Generator().manual_seed(seed)
    scores = smoothgrad_scores(blackbox, x[None] if single else x, grid, num_samples, sigma, gen, reduce).detach()
    recs = _records(scores, "smoothgrad", grid, sample_id)
    return recs[0] if single else recs


def random_selector(grid_or_units, n_e: int, rng) -> HardMask:
    num_units = grid_or_units.num_units if isinstance(grid_or_units, UnitGrid) else int(grid_or_units)
    if not 0 <= n_e <= num_units:
        raise ValueError(f"n_e={n_e} not in [0, {num_units}]")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    return HardMask(frozenset(rng.choice(num_units, size=n_e, replace=False).tolist()), num_units)


# ------------------------------------------------------------------------- io


def write_records(path, records) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(",".join([str(r.sample_id), r.method_name] + [repr(float(v)) for v in r.unit_scores]) + "\n")


def read_records(path, grid: str = ""):
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) < 3:
            raise ValueError(f"{path}:{lineno}: expected sample_id,method,scores...")
        out.append(AttributionRecord(int(parts[0]), np.array([float(v) for v in parts[2:]]), parts[1], grid))
    return out
