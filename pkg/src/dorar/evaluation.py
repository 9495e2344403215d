"""Retrain-based evaluation of feature selectors and method comparison.

A selector under test is only ever asked for hard masks.  For each
repetition two fresh generators are trained, one on the selected features
and one on the complement (both filled with background noise), until their
validation agreement with the black box stops improving.  ``a1``/``a2`` are
the test-set fractions where the black box's prediction on the
reconstruction matches its prediction on the clean input.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .core import BackgroundSampler, UnitGrid, compose_masked_input, expand_unit_scores, unit_index_tensor
from .datasets import Dataset
from .models import build_generator
from .training import harden_batch, seeded

log = logging.getLogger(__name__)

RESULTS_HEADER = ["method", "dataset", "n_e", "s_e", "a1_mean", "a1_std", "a2_mean", "a2_std", "reps", "seeds"]
VERDICTS = ("first_better", "second_better", "incomparable", "equal")


# -------------------------------------------------------------- selectors


class MaskProducer:
    """Anything that maps an input batch to ``(B, U)`` hard 0/1 masks."""

    name = "selector"

    def masks(self, x: torch.Tensor, offset: int = 0) -> torch.Tensor:
        raise NotImplementedError

    def __call__(self, x, offset: int = 0):
        return self.masks(x, offset)


class TrainedSelector(MaskProducer):
    name = "dorar"

    def __init__(self, model, n_e: int):
        self.model = model.eval()
        self.n_e = n_e

    @torch.no_grad()
    def scores(self, x):
        return self.model(x)

    def masks(self, x, offset=0):
        return harden_batch(self.scores(x), self.n_e)


class ScoreSelector(MaskProducer):
    """Hardens per-unit scores from an arbitrary function ``f(x) -> (B, U)``."""

    def __init__(self, score_fn: Callable, n_e: int, name: str = "scores"):
        self.score_fn = score_fn
        self.n_e = n_e
        self.name = name

    def masks(self, x, offset=0):
        return harden_batch(torch.as_tensor(self.score_fn(x)), self.n_e)


class RandomSelector(MaskProducer):
    """Uniform random ``n_e``-subset per sample, reproducible by sample position."""

    name = "random"

    def __init__(self, grid: UnitGrid, n_e: int, seed: int = 0):
        if n_e > grid.num_units:
            raise ValueError(f"n_e={n_e} exceeds {grid.num_units} units")
        self.grid = grid
        self.n_e = n_e
        self.seed = seed

    def masks(self, x, offset=0):
        g = torch.Generator().manual_seed(self.seed * 1_000_003 + offset)
        keys = torch.rand(x.shape[0], self.grid.num_units, generator=g)
        return harden_batch(keys, self.n_e)


class FullSelector(MaskProducer):
    name = "all-units"

    def __init__(self, grid: UnitGrid):
        self.grid = grid

    def masks(self, x, offset=0):
        return torch.ones(x.shape[0], self.grid.num_units)


class PositionalSelector(MaskProducer):
    """Encodes the black box's predicted class purely in mask position.

    ``class_units[c]`` is the unit set picked whenever the black box predicts
    class ``c``; the sample's feature values play no other role.
    """

    name = "positional"

    def __init__(self, blackbox, class_units: Sequence[Sequence[int]], num_units: int):
        self.blackbox = blackbox.eval()
        self.num_units = num_units
        table = torch.zeros(len(class_units), num_units)
        sizes = {len(u) for u in class_units}
        if len(sizes) != 1:
            raise ValueError("every class must map to the same number of units")
        for c, units in enumerate(class_units):
            table[c, list(units)] = 1.0
        self.table = table
        self.n_e = sizes.pop()

    @torch.no_grad()
    def masks(self, x, offset=0):
        return self.table[self.blackbox(x).argmax(1)]

    @classmethod
    def from_ink(cls, blackbox, x_train, grid: UnitGrid, num_classes: int, threshold: float = 0.5,
                 exclude: Sequence[int] = ()):
        """Pick, per class, the unit most often containing foreground.

        Classes receive distinct units, assigned greedily by how reliably the
        unit shows foreground for that class.
        """
        with torch.no_grad():
            pred = torch.cat([blackbox(x_train[i:i + 1000]).argmax(1) for i in range(0, len(x_train), 1000)])
        idx = unit_index_tensor(grid)
        fg = (x_train.amax(1).reshape(len(x_train), -1) > threshold).float()
        per_unit = torch.zeros(len(x_train), grid.num_units).index_add_(1, idx, fg) > 0
        rates = torch.stack([per_unit[pred == c].float().mean(0) for c in range(num_classes)]).nan_to_num(0.0)
        rates[:, list(exclude)] = -1.0
        chosen, taken = [None] * num_classes, set()
        flat = sorted(((rates[c, u].item(), c, u) for c in range(num_classes) for u in range(grid.num_units)),
                      reverse=True)
        for _, c, u in flat:
            if chosen[c] is None and u not in taken:
                chosen[c] = [u]
                taken.add(u)
        return cls(blackbox, chosen, grid.num_units)


class RecordSelector(MaskProducer):
    """Masks from precomputed attribution scores keyed by sample id.

    Sample ids enumerate train, then validation, then test samples, so ids
    stay unique across splits.
    """

    name = "records"

    def __init__(self, scores_by_id: dict, n_e: int, name: str = "records"):
        self.scores_by_id = scores_by_id
        self.n_e = n_e
        self.name = name

    def masks(self, x, offset=0):
        try:
            rows = [self.scores_by_id[offset + i] for i in range(x.shape[0])]
        except KeyError as exc:
            raise KeyError(f"no attribution record for sample id {exc.args[0]}") from None
        return harden_batch(torch.as_tensor(np.stack(rows)), self.n_e)


# ---------------------------------------------------------------- records


@dataclass(frozen=True)
class EvaluationRecord:
    method_name: str
    n_e: int
    s_e: str
    a1_mean: float
    a1_std: float
    a2_mean: float
    a2_std: float
    repetitions: int
    dataset: str = ""
    seeds: tuple = ()
    a1_runs: tuple = field(default=(), compare=False)
    a2_runs: tuple = field(default=(), compare=False)
    discarded: tuple = field(default=(), compare=False)

    def __post_init__(self):
        for name in ("a1_mean", "a2_mean"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if self.a1_std < 0 or self.a2_std < 0:
            raise ValueError("standard deviations must be non-negative")
        if self.repetitions < 1:
            raise ValueError("repetitions must be at least 1")

    @property
    def unit_size(self) -> int:
        return int(np.prod([int(p) for p in str(self.s_e).split("x")]))

    def csv_row(self) -> list:
        return [self.method_name, self.dataset, self.n_e, self.s_e, repr(self.a1_mean), repr(self.a1_std),
                repr(self.a2_mean), repr(self.a2_std), self.repetitions, ";".join(str(s) for s in self.seeds)]

    @classmethod
    def from_row(cls, row: dict) -> "EvaluationRecord":
        seeds = tuple(int(s) for s in row["seeds"].split(";") if s) if row.get("seeds") else ()
        return cls(row["method"], int(row["n_e"]), row["s_e"], float(row["a1_mean"]), float(row["a1_std"]),
                   float(row["a2_mean"]), float(row["a2_std"]), int(row["reps"]), row.get("dataset", ""), seeds)


def append_results(path, records: Sequence[EvaluationRecord]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    new = not path.exists() or path.stat().st_size == 0
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(RESULTS_HEADER)
        for r in records:
            w.writerow(r.csv_row())
    return path


def read_results(path) -> list:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != RESULTS_HEADER:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        return [EvaluationRecord.from_row(r) for r in reader]


# ------------------------------------------------------------- evaluation


def _predict(model, x, batch=1000):
    with torch.no_grad():
        return torch.cat([model(x[i:i + batch]).argmax(1) for i in range(0, len(x), batch)])


def _all_masks(selector, x, n_e, offset, batch=500):
    out = []
    for i in range(0, len(x), batch):
        m = torch.as_tensor(selector(x[i:i + batch], offset + i), dtype=torch.float32)
        out.append(m)
    m = torch.cat(out)
    counts = m.sum(1)
    if not torch.all(m.eq(0) | m.eq(1)) or not torch.all(counts == n_e):
        bad = int(torch.nonzero(counts != n_e)[0]) if torch.any(counts != n_e) else 0
        raise ValueError(f"selector emitted a mask with {int(counts[bad])} units at sample {offset + bad}; "
                         f"expected exactly n_e={n_e}")
    return m


@dataclass(frozen=True)
class RetrainSettings:
    beta: float = 1.0
    batch_size: int = 100
    learning_rate: float = 5e-4
    adam_betas: tuple = (0.5, 0.999)
    max_epochs: int = 30
    patience: int = 3
    min_delta: float = 0.002
    max_train: Optional[int] = None
    max_val: Optional[int] = None
    background: str = "empirical"


def _agreement(g, blackbox, x, m, noise, y, complement, batch=1000):
    hits = 0
    with torch.no_grad():
        for i in range(0, len(x), batch):
            mm = m[i:i + batch]
            mm = 1 - mm if complement else mm
            xr = g(compose_masked_input(x[i:i + batch], mm, noise[i:i + batch]))
            hits += int((blackbox(xr).argmax(1) == y[i:i + batch]).sum())
    return hits / len(x)


def retrain_generators(data: Dataset, blackbox, grid: UnitGrid, masks: dict, labels: dict,
                       seed: int, settings: RetrainSettings, kind: str = None):
    """One repetition: train fresh G1/G2 on fixed masks; return test ``(a1, a2, epochs)``."""
    kind = kind or data.kind
    s = settings
    x_train = data.x_train[: s.max_train] if s.max_train else data.x_train
    x_val = data.x_val[: s.max_val] if s.max_val else data.x_val
    pool = BackgroundSampler(data.x_train, s.background, seed)
    gen = torch.Generator().manual_seed(seed)
    with seeded(seed):
        g1 = build_generator(data.sample_shape, kind)
        g2 = build_generator(data.sample_shape, kind)
    params = list(g1.parameters()) + list(g2.parameters())
    opt = torch.optim.Adam(params, lr=s.learning_rate, betas=s.adam_betas)

    def feature_masks(split, n=None):
        m = masks[split] if n is None else masks[split][:n]
        out = torch.empty(len(m), *data.sample_shape)
        for i in range(0, len(m), 1000):
            out[i:i + 1000] = expand_unit_scores(m[i:i + 1000], grid)
        return out

    m_train = feature_masks("train", len(x_train))
    m_val = feature_masks("val", len(x_val))
    m_test = feature_masks("test")
    y_train = labels["train"][: len(x_train)]
    y_val = labels["val"][: len(x_val)]
    vgen = torch.Generator().manual_seed(seed + 7919)
    e_val = torch.cat([pool.sample(min(1000, len(x_val) - i), vgen, x_val[i:i + 1000])
                       for i in range(0, len(x_val), 1000)])
    e_test = torch.cat([pool.sample(min(1000, len(data.x_test) - i), vgen, data.x_test[i:i + 1000])
                        for i in range(0, len(data.x_test), 1000)])

    best = [-1.0, -1.0]
    ref = [-math.inf, -math.inf]
    best_state = [None, None]
    since = [0, 0]
    active = [True, True]
    gens = (g1, g2)
    epochs = 0
    n = len(x_train)
    bt = torch.tensor(s.beta, dtype=torch.float32)
    for epoch in range(s.max_epochs):
        perm = torch.randperm(n, generator=gen)
        for i in range(0, n, s.batch_size):
            idx = perm[i:i + s.batch_size]
            x, m, y = x_train[idx], m_train[idx], y_train[idx]
            e = pool.sample(len(idx), gen, x)
            recon = [gens[k](compose_masked_input(x, 1 - m if k else m, e)) for k in (0, 1) if active[k]]
            logp = blackbox(torch.cat(recon)).split(len(idx))
            loss = sum(F.nll_loss(lp, y) + bt * (x - xr).abs().mean() for lp, xr in zip(logp, recon))
            if not torch.isfinite(loss):
                raise FloatingPointError(f"generator loss diverged at epoch {epoch}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
        epochs += 1
        for k in (0, 1):
            if not active[k]:
                continue
            acc = _agreement(gens[k], blackbox, x_val, m_val, e_val, y_val, complement=bool(k))
            if best_state[k] is None or acc > best[k]:
                best[k] = acc
                best_state[k] = {kk: v.clone() for kk, v in gens[k].state_dict().items()}
            if acc >= ref[k] + s.min_delta:
                ref[k] = acc
                since[k] = 0
            else:
                since[k] += 1
                if since[k] >= s.patience:
                    active[k] = False
        log.debug("seed %d epoch %d val a1=%.4f a2=%.4f", seed, epoch, best[0], best[1])
        if not any(active):
            break
    g1.load_state_dict(best_state[0])
    g2.load_state_dict(best_state[1])
    a1 = _agreement(g1, blackbox, data.x_test, m_test, e_test, labels["test"], False)
    a2 = _agreement(g2, blackbox, data.x_test, m_test, e_test, labels["test"], True)
    return a1, a2, epochs


def evaluate_selector(selector, data: Dataset, blackbox, n_e: int, grid: UnitGrid, repetitions: int = 5,
                      seeds: Sequence[int] = None, method_name: str = None,
                      settings: RetrainSettings = None, **overrides) -> EvaluationRecord:
    """Evaluate a mask producer with freshly retrained generators.

    Keyword overrides are applied to :class:`RetrainSettings`.
    """
    settings = settings or RetrainSettings()
    if overrides:
        settings = RetrainSettings(**{**settings.__dict__, **overrides})
    seeds = list(seeds) if seeds is not None else list(range(repetitions))
    if len(seeds) != repetitions:
        raise ValueError("need one seed per repetition")
    blackbox.eval()
    x_train = data.x_train[: settings.max_train] if settings.max_train else data.x_train
    x_val = data.x_val[: settings.max_val] if settings.max_val else data.x_val
    offsets = {"train": 0, "val": len(data.x_train), "test": len(data.x_train) + len(data.x_val)}
    masks = {
        "train": _all_masks(selector, x_train, n_e, offsets["train"]),
        "val": _all_masks(selector, x_val, n_e, offsets["val"]),
        "test": _all_masks(selector, data.x_test, n_e, offsets["test"]),
    }
    labels = {"train": _predict(blackbox, x_train), "val": _predict(blackbox, x_val),
              "test": _predict(blackbox, data.x_test)}
    a1s, a2s, used, dropped = [], [], [], []
    for seed in seeds:
        try:
            a1, a2, epochs = retrain_generators(data, blackbox, grid, masks, labels, seed, settings)
        except FloatingPointError as exc:
            log.warning("repetition with seed %d discarded: %s", seed, exc)
            dropped.append(seed)
            continue
        log.info("%s seed=%d a1=%.4f a2=%.4f epochs=%d", method_name or selector.name, seed, a1, a2, epochs)
        a1s.append(a1)
        a2s.append(a2)
        used.append(seed)
    if not used:
        raise FloatingPointError(f"all repetitions diverged (seeds {dropped})")
    ddof = 1 if len(used) > 1 else 0
    return EvaluationRecord(
        method_name or getattr(selector, "name", "selector"), n_e, grid.describe(),
        float(np.mean(a1s)), float(np.std(a1s, ddof=ddof)), float(np.mean(a2s)), float(np.std(a2s, ddof=ddof)),
        len(used), data.kind, tuple(used), tuple(a1s), tuple(a2s), tuple(dropped),
    )


# ------------------------------------------------------------- comparison


@dataclass(frozen=True)
class ComparisonResult:
    verdict: str
    basis: str
    first: str = ""
    second: str = ""
    detail: str = ""

    def __post_init__(self):
        if self.verdict not in VERDICTS:
            raise ValueError(f"unknown verdict {self.verdict!r}")


def _cmp(a, b) -> int:
    return (a > b) - (a < b)


def _interval_cmp(m1, s1, m2, s2) -> int:
    if m1 - s1 > m2 + s2:
        return 1
    if m1 + s1 < m2 - s2:
        return -1
    return 0


def compare_partial_order(r1: EvaluationRecord, r2: EvaluationRecord, intervals: bool = False) -> ComparisonResult:
    """Dominance on (a1 up, a2 down, n_e down, unit size down).

    With ``intervals`` the accuracy axes only count as different when the
    mean +/- std intervals are disjoint.
    """
    if intervals:
        c_a1 = _interval_cmp(r1.a1_mean, r1.a1_std, r2.a1_mean, r2.a1_std)
        c_a2 = -_interval_cmp(r1.a2_mean, r1.a2_std, r2.a2_mean, r2.a2_std)
    else:
        c_a1 = _cmp(r1.a1_mean, r2.a1_mean)
        c_a2 = -_cmp(r1.a2_mean, r2.a2_mean)
    c_ne = -_cmp(r1.n_e, r2.n_e)
    c_se = -_cmp(r1.unit_size, r2.unit_size)
    axes = (c_a1, c_a2, c_ne, c_se)
    basis = "partial-order-intervals" if intervals else "partial-order"
    if all(c == 0 for c in axes):
        verdict = "equal"
    elif all(c >= 0 for c in axes):
        verdict = "first_better"
    elif all(c <= 0 for c in axes):
        verdict = "second_better"
    else:
        verdict = "incomparable"
    detail = (f"a1 {r1.a1_mean:.4f}+/-{r1.a1_std:.4f} vs {r2.a1_mean:.4f}+/-{r2.a1_std:.4f}; "
              f"a2 {r1.a2_mean:.4f}+/-{r1.a2_std:.4f} vs {r2.a2_mean:.4f}+/-{r2.a2_std:.4f}")
    return ComparisonResult(verdict, basis, r1.method_name, r2.method_name, detail)


def scalar_score(r: EvaluationRecord, basis: str = "ratio", w: float = 1.0) -> float:
    if basis == "ratio":
        if r.a2_mean == 0:
            raise ZeroDivisionError(f"{r.method_name}: a2 = 0 under the ratio basis; use the weighted basis")
        return r.a1_mean / r.a2_mean
    if basis == "weighted":
        if w <= 0:
            raise ValueError("weight w must be positive")
        return r.a1_mean - w * r.a2_mean
    raise ValueError(f"unknown scalar basis {basis!r}")


def compare_scalar(r1: EvaluationRecord, r2: EvaluationRecord, basis: str = "ratio", w: float = 1.0) -> ComparisonResult:
    if (r1.n_e, r1.unit_size) != (r2.n_e, r2.unit_size):
        raise ValueError("scalar comparison needs records with the same (n_e, s_e) format")
    s1, s2 = scalar_score(r1, basis, w), scalar_score(r2, basis, w)
    verdict = {1: "first_better", -1: "second_better", 0: "equal"}[_cmp(s1, s2)]
    label = basis if basis == "ratio" else f"weighted({w:g})"
    return ComparisonResult(verdict, label, r1.method_name, r2.method_name, f"{s1:.4f} vs {s2:.4f}")


def compare(r1, r2, basis: str = "partial-order", w: float = 1.0) -> ComparisonResult:
    if basis == "partial-order":
        return compare_partial_order(r1, r2)
    if basis == "partial-order-intervals":
        return compare_partial_order(r1, r2, intervals=True)
    return compare_scalar(r1, r2, basis, w)


def verdict_matrix(records: Sequence[EvaluationRecord], basis: str = "partial-order", w: float = 1.0) -> list:
    """Square matrix of verdicts (row method vs column method)."""
    out = []
    for a in records:
        row = []
        for b in records:
            try:
                row.append(compare(a, b, basis, w).verdict)
            except (ValueError, ZeroDivisionError) as exc:
                row.append(f"n/a ({exc})")
        out.append(row)
    return out


def format_matrix(records: Sequence[EvaluationRecord], matrix: list) -> str:
    names = [r.method_name for r in records]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method"] + names)
    for name, row in zip(names, matrix):
        w.writerow([name] + row)
    return buf.getvalue()


def merge_records(records: Sequence[EvaluationRecord], method_name: str = None) -> EvaluationRecord:
    """Pool per-repetition records (e.g. from parallel workers) into one row."""
    if not records:
        raise ValueError("nothing to merge")
    first = records[0]
    a1 = [v for r in records for v in r.a1_runs]
    a2 = [v for r in records for v in r.a2_runs]
    ddof = 1 if len(a1) > 1 else 0
    return EvaluationRecord(
        method_name or first.method_name, first.n_e, first.s_e,
        float(np.mean(a1)), float(np.std(a1, ddof=ddof)), float(np.mean(a2)), float(np.std(a2, ddof=ddof)),
        len(a1), first.dataset, tuple(s for r in records for s in r.seeds), tuple(a1), tuple(a2),
        tuple(s for r in records for s in r.discarded),
    )
