"""Procedural mouse-trajectory benchmark with a planted, known explanation.

Each sample is a sequence of movements sampled at a fixed number of points.
Half of every user's samples have the opening stretch of the final movement
replaced by four axis-aligned constant-speed segments that end where the
original stretch ended.  The label is the modified flag, and the replaced
points are the ground-truth explanation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

SEGMENTS = 4
SEGMENT_POINTS = 4
PLANTED_POINTS = SEGMENTS * SEGMENT_POINTS
FORMAT_TAG = "dorar-synthetic-v1"

# Target displacements of the ten-stroke pattern (screen units per movement).
PATTERN = np.array([
    [120.0, 0.0], [0.0, 90.0], [-80.0, 60.0], [-60.0, -40.0], [100.0, -30.0],
    [40.0, 110.0], [-130.0, 10.0], [70.0, -90.0], [30.0, 60.0], [-90.0, -80.0],
])


@dataclass
class TrajectorySample:
    velocities: np.ndarray
    user_id: int
    modified: bool
    ground_truth_units: frozenset = field(default_factory=frozenset)

    @property
    def length(self) -> int:
        return self.velocities.shape[1]


def minimum_jerk(n: int) -> np.ndarray:
    """Normalized minimum-jerk position profile at ``n + 1`` evenly spaced times."""
    t = np.linspace(0.0, 1.0, n + 1)
    return 10 * t**3 - 15 * t**4 + 6 * t**5


def planted_units(movements: int, points_per_movement: int, unit: int = SEGMENT_POINTS) -> frozenset:
    start = (movements - 1) * points_per_movement
    return frozenset(range(start // unit, (start + PLANTED_POINTS - 1) // unit + 1))


def _movement(disp: np.ndarray, n: int, curvature: float, rng) -> np.ndarray:
    s = minimum_jerk(n)
    normal = np.array([-disp[1], disp[0]])
    path = np.outer(s, disp) + np.outer(curvature * np.sin(np.pi * s), normal)
    return np.diff(path, axis=0).T


def plant_segments(span: np.ndarray, horizontal_first: bool) -> np.ndarray:
    """Replace a ``(2, 16)`` velocity span by four alternating axis-aligned segments.

    The horizontal segments share the span's total x displacement and the
    vertical ones its y displacement, so the end position is unchanged.
    """
    dx, dy = span.sum(axis=1)
    out = np.zeros_like(span)
    for k in range(SEGMENTS):
        axis = (k % 2) if horizontal_first else 1 - (k % 2)
        total = dx if axis == 0 else dy
        out[axis, k * SEGMENT_POINTS:(k + 1) * SEGMENT_POINTS] = total / (2 * SEGMENT_POINTS)
    return out


def generate_dataset(num_users: int = 18, samples_per_user: int = 100, movements: int = 10,
                     points_per_movement: int = 16, rng=0) -> list:
    if points_per_movement < PLANTED_POINTS:
        raise ValueError(f"points_per_movement must be >= {PLANTED_POINTS}")
    if num_users < 1 or samples_per_user < 1 or movements < 1:
        raise ValueError("num_users, samples_per_user and movements must be positive")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    pattern = np.resize(PATTERN, (movements, 2))
    start = (movements - 1) * points_per_movement
    gt = planted_units(movements, points_per_movement)
    out = []
    for user in range(num_users):
        speed = rng.uniform(0.7, 1.4)
        curvature = rng.uniform(-0.25, 0.25)
        jitter = rng.uniform(0.01, 0.03)
        flags = np.zeros(samples_per_user, dtype=bool)
        flags[: samples_per_user // 2] = True
        rng.shuffle(flags)
        for modified in flags:
            parts = []
            for disp in pattern:
                d = disp * speed * rng.uniform(0.85, 1.15, size=2)
                v = _movement(d, points_per_movement, curvature + rng.normal(0, 0.05), rng)
                v += rng.normal(0.0, jitter * np.abs(d).max() / points_per_movement, size=v.shape)
                parts.append(v)
            vel = np.concatenate(parts, axis=1)
            if modified:
                span = vel[:, start:start + PLANTED_POINTS]
                vel[:, start:start + PLANTED_POINTS] = plant_segments(span, bool(rng.integers(2)))
            out.append(TrajectorySample(vel, user, bool(modified), gt if modified else frozenset()))
    return out


def hit_rate(masks: Sequence, ground_truth: Sequence) -> float:
    """Fraction of selected units, pooled over samples, inside the ground truth."""
    if len(masks) != len(ground_truth):
        raise ValueError("masks and ground truth differ in length")
    if not masks:
        raise ValueError("no modified samples to score")
    hits = total = 0
    for m, g in zip(masks, ground_truth):
        sel = m.selected if hasattr(m, "selected") else set(m)
        hits += len(set(sel) & set(g))
        total += len(sel)
    if total == 0:
        raise ValueError("masks select no units")
    return hits / total


def train_test_split(samples: Sequence[TrajectorySample], test_fraction: float = 0.2, rng=0):
    """Stratified by (user, modified): every stratum contributes the same share to test."""
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    strata: dict = {}
    for i, s in enumerate(samples):
        strata.setdefault((s.user_id, s.modified), []).append(i)
    test_idx = set()
    for key in sorted(strata):
        idx = np.array(strata[key])
        rng.shuffle(idx)
        test_idx.update(idx[: int(round(len(idx) * test_fraction))].tolist())
    train = [s for i, s in enumerate(samples) if i not in test_idx]
    test = [s for i, s in enumerate(samples) if i in test_idx]
    return train, test


def velocity_scale(samples: Sequence[TrajectorySample]) -> float:
    return float(max(np.abs(s.velocities).max() for s in samples))


def normalize(vel: np.ndarray, scale: float) -> np.ndarray:
    """Map signed velocities into [0, 1] with zero at 0.5."""
    return np.clip(0.5 + vel / (2 * scale), 0.0, 1.0)


def to_dataset(train: Sequence[TrajectorySample], test: Sequence[TrajectorySample],
               n_val_fraction: float = 0.1, meta: dict = None, seed: int = 0):
    from .datasets import Dataset

    scale = float(meta["velocity_scale"]) if meta and "velocity_scale" in meta else velocity_scale(train)
    order = np.random.default_rng(seed).permutation(len(train))
    n_val = int(round(len(train) * n_val_fraction))
    val_part = [train[i] for i in order[:n_val]]
    train_part = [train[i] for i in order[n_val:]]

    def tensors(ss):
        x = torch.from_numpy(np.stack([normalize(s.velocities, scale) for s in ss]).astype(np.float32))
        y = torch.tensor([int(s.modified) for s in ss], dtype=torch.int64)
        return x, y

    xtr, ytr = tensors(train_part)
    xv, yv = tensors(val_part)
    xt, yt = tensors(test)
    info = dict(meta or {})
    info.update(velocity_scale=scale, ground_truth_test=[s.ground_truth_units for s in test],
                ground_truth_train=[s.ground_truth_units for s in train_part])
    return Dataset("synthetic", xtr, ytr, xv, yv, xt, yt, 2, info)


# ------------------------------------------------------------------------- io


def write_split(path, samples: Sequence[TrajectorySample], meta: dict = None) -> Path:
    path = Path(path)
    if not samples:
        raise ValueError("refusing to write an empty split")
    length = samples[0].length
    header = {"format": FORMAT_TAG, "channels": 2, "length": length, "count": len(samples)}
    header.update(meta or {})
    lines = [",".join(f"{k}={v}" for k, v in header.items())]
    for s in samples:
        if s.length != length:
            raise ValueError("all samples in a split must share one length")
        fields = [str(s.user_id), str(int(s.modified))]
        fields += [repr(float(v)) for v in s.velocities[0]]
        fields += [repr(float(v)) for v in s.velocities[1]]
        fields.append(";".join(str(u) for u in sorted(s.ground_truth_units)))
        lines.append(",".join(fields))
    path.write_text("\n".join(lines) + "\n")
    return path


def read_header(path) -> dict:
    with open(path) as fh:
        first = fh.readline().strip()
    out = {}
    for item in first.split(","):
        key, _, value = item.partition("=")
        out[key] = value
    if out.get("format") != FORMAT_TAG:
        raise ValueError(f"{path}: not a synthetic trajectory split")
    return out


def read_split(path) -> list:
    header = read_header(path)
    length = int(header["length"])
    out = []
    with open(path) as fh:
        next(fh)
        for lineno, line in enumerate(fh, 2):
            parts = line.rstrip("\n").split(",")
            if len(parts) != 3 + 2 * length:
                raise ValueError(f"{path}:{lineno}: expected {3 + 2 * length} fields, got {len(parts)}")
            vel = np.array([float(v) for v in parts[2:2 + 2 * length]]).reshape(2, length)
            gt = frozenset(int(u) for u in parts[-1].split(";") if u)
            out.append(TrajectorySample(vel, int(parts[0]), parts[1] == "1", gt))
    return out
