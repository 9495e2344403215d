"""Joint training of the feature selector and the two reconstructors.

Per step: the selector scores every unit, a relaxed top-``n_e`` mask is drawn
with the Gumbel-softmax trick, the selected and complementary inputs are
filled with background noise, reconstructed by ``G1``/``G2`` and scored by
the frozen black box.  The selector descends
``(1 - alpha) * (l3 + beta * l1) - alpha * (l4 + beta * l2)`` while each
generator descends its own ``l_pred + beta * l_rec``.

The target label is always the black box's own prediction on the clean
input, never the dataset label.
"""

from __future__ import annotations

import contextlib
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .core import BackgroundSampler, HardMask, SoftMask, UnitGrid, compose_masked_input, expand_unit_scores
from .datasets import Dataset
from .models import build_generator, build_selector

log = logging.getLogger(__name__)

_TINY = 1e-20


class TrainingDiverged(RuntimeError):
    def __init__(self, step, trace):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step
        self.trace = trace


@contextlib.contextmanager
def seeded(seed: int):
    """Run a block under an isolated global torch RNG state."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed))
        yield


@dataclass(frozen=True)
class LossWeights:
    alpha: float
    beta: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.beta < 0.0:
            raise ValueError(f"beta must be non-negative, got {self.beta}")

    @classmethod
    def default_for(cls, n_e: int, num_units: int) -> "LossWeights":
        return cls(alpha=n_e / num_units, beta=1.0)


@dataclass(frozen=True)
class TrainConfig:
    n_e: int
    batch_size: int = 100
    learning_rate: float = 5e-4
    steps: Optional[int] = None
    max_epochs: int = 20
    temperature: float = 0.5
    use_background_noise: bool = True
    use_reconstruction_loss: bool = True
    use_complementary_mask: bool = True
    adam_betas: tuple = (0.5, 0.999)
    rng_seed: int = 0
    max_train: Optional[int] = None
    plateau_tol: float = 0.01

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.n_e < 1:
            raise ValueError("n_e must be at least 1")
        if self.steps is not None and self.steps < 1:
            raise ValueError("steps must be positive")

    def validate(self, grid: UnitGrid):
        if self.n_e > grid.num_units:
            raise ValueError(f"n_e={self.n_e} exceeds the {grid.num_units} available units")

    @property
    def scheme(self) -> str:
        parts = [name for flag, name in ((self.use_background_noise, "BN"),
                                         (self.use_reconstruction_loss, "RL"),
                                         (self.use_complementary_mask, "CM")) if flag]
        return "+".join(parts) if parts else "B"


@dataclass(frozen=True)
class LossReport:
    l1: float
    l2: float
    l3: float
    l4: float
    selector_loss: float
    step: int
    alpha: float = 0.0
    beta: float = 1.0
    complementary: bool = True

    def recompute(self) -> float:
        """Selector loss rebuilt from the reported terms (float32, same op order)."""
        return float(_selector_objective(*(np.float32(v) for v in (self.l1, self.l2, self.l3, self.l4)),
                                         np.float32(self.alpha), np.float32(self.beta), self.complementary))

    def as_record(self) -> str:
        return (f"step={self.step} l1={self.l1!r} l2={self.l2!r} l3={self.l3!r} "
                f"l4={self.l4!r} selector_loss={self.selector_loss!r}")


def _selector_objective(l1, l2, l3, l4, alpha, beta, complementary):
    if not complementary:
        return l3 + beta * l1
    return (1 - alpha) * (l3 + beta * l1) - alpha * (l4 + beta * l2)


# ----------------------------------------------------------- mask sampling


def gumbel_noise(shape, generator=None) -> torch.Tensor:
    u = torch.rand(shape, generator=generator)
    inner = (-torch.log(u.clamp_min(_TINY))).clamp_min(_TINY)
    return -torch.log(inner)


def gumbel_topk_sample(log_scores, n_e: int, temperature: float, rng=None, noise=None) -> torch.Tensor:
    """Relaxed top-``n_e`` mask: max over ``n_e`` Gumbel-softmax draws.

    ``log_scores`` is ``(U,)`` or ``(B, U)``; the result has the same shape
    with entries in [0, 1].  ``noise`` (shape ``(B, n_e, U)``) overrides the
    Gumbel draws, which freezes the sample for gradient checks.
    """
    log_scores = torch.as_tensor(log_scores)
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if not torch.isfinite(log_scores).all():
        raise ValueError("log_scores must be finite")
    squeeze = log_scores.ndim == 1
    s = log_scores[None] if squeeze else log_scores
    b, u = s.shape
    if n_e > u:
        raise ValueError(f"n_e={n_e} exceeds {u} units")
    if noise is None:
        if isinstance(rng, (int, np.integer)):
            rng = torch.Generator().manual_seed(int(rng))
        noise = gumbel_noise((b, n_e, u), rng).to(s.dtype)
    relaxed = torch.softmax((s[:, None, :] + noise) / temperature, dim=-1)
    mask = relaxed.max(dim=1).values
    return mask[0] if squeeze else mask


def harden(log_scores, n_e: int) -> HardMask:
    """Top-``n_e`` units; ties go to the lowest unit index."""
    s = np.asarray(log_scores, dtype=float)
    if n_e > len(s):
        raise ValueError(f"n_e={n_e} exceeds {len(s)} units")
    order = np.argsort(-s, kind="stable")
    return HardMask(frozenset(order[:n_e].tolist()), len(s))


def harden_batch(scores: torch.Tensor, n_e: int) -> torch.Tensor:
    """Batched :func:`harden` returning a ``(B, U)`` 0/1 float tensor."""
    if n_e > scores.shape[-1]:
        raise ValueError(f"n_e={n_e} exceeds {scores.shape[-1]} units")
    order = torch.sort(scores, dim=-1, descending=True, stable=True).indices[:, :n_e]
    out = torch.zeros_like(scores, dtype=torch.float32)
    return out.scatter_(1, order, 1.0)


# ----------------------------------------------------------------- losses


def reconstruction_losses(x, feature_mask, noise, g1, g2, blackbox, y, complementary=True):
    """Tensors ``(l1, l2, l3, l4)``; ``l2``/``l4`` are None without the complement."""
    x_sel = compose_masked_input(x, feature_mask, noise)
    x_hat = g1(x_sel)
    l1 = (x - x_hat).abs().mean()
    l3 = F.nll_loss(blackbox(x_hat), y)
    if not complementary:
        return l1, None, l3, None
    x_cmp = compose_masked_input(x, 1 - feature_mask, noise)
    x_tilde = g2(x_cmp)
    l2 = (x - x_tilde).abs().mean()
    l4 = F.nll_loss(blackbox(x_tilde), y)
    return l1, l2, l3, l4


def compute_losses(x, feature_mask, noise, g1, g2, blackbox, config: TrainConfig,
                   weights: LossWeights, step: int = 0, y=None) -> LossReport:
    """Evaluate ``l1..l4`` and the selector objective for one batch.

    Ablations: without background noise ``noise`` is replaced by zeros,
    without reconstruction loss ``beta`` is 0, without the complementary
    mask ``G2`` is not used and the objective is ``l3 + beta * l1``.
    """
    _check_shapes(x, feature_mask, noise)
    if y is None:
        with torch.no_grad():
            y = blackbox(x).argmax(1)
    if not config.use_background_noise:
        noise = torch.zeros_like(x)
    beta = weights.beta if config.use_reconstruction_loss else 0.0
    cm = config.use_complementary_mask
    with torch.no_grad():
        l1, l2, l3, l4 = reconstruction_losses(x, feature_mask, noise, g1, g2 if cm else None,
                                               blackbox, y, complementary=cm)
        report = _report(l1, l2, l3, l4, weights.alpha, beta, cm, step)
    if not all(math.isfinite(v) for v in (report.l1, report.l2, report.l3, report.l4)):
        raise TrainingDiverged(step, [report])
    return report


def _check_shapes(x, m, e):
    if tuple(x.shape) != tuple(m.shape) or tuple(x.shape) != tuple(e.shape):
        raise ValueError(f"shape mismatch: x {tuple(x.shape)}, mask {tuple(m.shape)}, noise {tuple(e.shape)}")


def _report(l1, l2, l3, l4, alpha, beta, cm, step, objective=None) -> LossReport:
    zero = torch.zeros((), dtype=torch.float32)
    l2 = zero if l2 is None else l2
    l4 = zero if l4 is None else l4
    if objective is None:
        objective = _selector_objective(l1, l2, l3, l4, torch.tensor(alpha, dtype=torch.float32),
                                        torch.tensor(beta, dtype=torch.float32), cm)
    return LossReport(float(l1), float(l2), float(l3), float(l4), float(objective), step,
                      float(np.float32(alpha)), float(np.float32(beta)), cm)


def selector_objective(selector, x, y, noise, g1, g2, blackbox, grid: UnitGrid, n_e: int, temperature: float,
                       alpha, beta, complementary: bool = True, rng=None, gumbel=None):
    """Differentiable selector loss for one batch and the four loss terms.

    ``gumbel`` (``(B, n_e, U)``) freezes the relaxation noise.
    """
    soft = gumbel_topk_sample(selector(x), n_e, temperature, rng=rng, noise=gumbel)
    m = expand_unit_scores(soft, grid)
    l1, l2, l3, l4 = reconstruction_losses(x, m, noise, g1, g2, blackbox, y, complementary=complementary)
    zero = torch.zeros((), dtype=l1.dtype)
    objective = _selector_objective(l1, zero if l2 is None else l2, l3, zero if l4 is None else l4,
                                    alpha, beta, complementary)
    return objective, (l1, l2, l3, l4)


# --------------------------------------------------------------- training


@dataclass
class TrainResult:
    selector: torch.nn.Module
    g1: torch.nn.Module
    g2: Optional[torch.nn.Module]
    trace: list = field(default_factory=list)
    config: Optional[TrainConfig] = None
    weights: Optional[LossWeights] = None
    grid: Optional[UnitGrid] = None


def _plateaued(history: list, tol: float) -> bool:
    """Loss over the final 10% of steps moved by less than ``tol`` (relative)."""
    n = len(history)
    w = max(1, n // 10)
    if n < 2 * w or n < 20:
        return False
    last = float(np.mean(history[-w:]))
    prev = float(np.mean(history[-2 * w:-w]))
    return abs(last - prev) <= tol * max(abs(prev), 1e-8)


def train_dorar(data: Dataset, blackbox, config: TrainConfig, weights: LossWeights, grid: UnitGrid,
                dataset_kind: str = None, log_path=None, background: BackgroundSampler = None) -> TrainResult:
    """Train selector + generators; returns the models and the per-step trace."""
    config.validate(grid)
    kind = dataset_kind or data.kind
    x_train = data.x_train if config.max_train is None else data.x_train[:config.max_train]
    if background is None:
        background = BackgroundSampler(x_train, "empirical", config.rng_seed)
    if not config.use_background_noise:
        background = background.with_mode("zero")
    beta = weights.beta if config.use_reconstruction_loss else 0.0
    cm = config.use_complementary_mask

    with seeded(config.rng_seed):
        selector = build_selector(grid, kind)
        g1 = build_generator(data.sample_shape, kind)
        g2 = build_generator(data.sample_shape, kind) if cm else None
    gen = torch.Generator().manual_seed(config.rng_seed + 1)
    blackbox.eval()

    sel_params = list(selector.parameters())
    gen_params = list(g1.parameters()) + (list(g2.parameters()) if cm else [])
    opt_sel = torch.optim.Adam(sel_params, lr=config.learning_rate, betas=config.adam_betas)
    opt_gen = torch.optim.Adam(gen_params, lr=config.learning_rate, betas=config.adam_betas)
    alpha_t = torch.tensor(weights.alpha, dtype=torch.float32)
    beta_t = torch.tensor(beta, dtype=torch.float32)

    with torch.no_grad():
        y_train = torch.cat([blackbox(x_train[i:i + 1000]).argmax(1) for i in range(0, len(x_train), 1000)])

    n = len(x_train)
    steps_per_epoch = max(1, math.ceil(n / config.batch_size))
    total = config.steps if config.steps is not None else steps_per_epoch * config.max_epochs
    trace, monitor = [], []
    log_fh = open(log_path, "a") if log_path else None
    step = 0
    try:
        while step < total:
            perm = torch.randperm(n, generator=gen)
            for i in range(0, n, config.batch_size):
                if step >= total:
                    break
                idx = perm[i:i + config.batch_size]
                x, y = x_train[idx], y_train[idx]
                e = background.sample(len(idx), gen, x)
                objective, (l1, l2, l3, l4) = selector_objective(
                    selector, x, y, e, g1, g2, blackbox, grid, config.n_e, config.temperature,
                    alpha_t, beta_t, cm, rng=gen)
                gen_loss = l3 + beta_t * l1
                if cm:
                    gen_loss = gen_loss + (l4 + beta_t * l2)
                report = _report(l1.detach(), None if l2 is None else l2.detach(), l3.detach(),
                                 None if l4 is None else l4.detach(), weights.alpha, beta, cm, step,
                                 objective.detach())
                trace.append(report)
                if log_fh:
                    log_fh.write(report.as_record() + "\n")
                if not math.isfinite(report.selector_loss):
                    raise TrainingDiverged(step, trace)
                grads = torch.autograd.grad(objective, sel_params, retain_graph=True)
                gen_grads = torch.autograd.grad(gen_loss, gen_params)
                for p, g in zip(sel_params + gen_params, grads + gen_grads):
                    p.grad = g
                opt_sel.step()
                opt_gen.step()
                monitor.append(report.l3 + beta * report.l1)
                step += 1
            if config.steps is None and _plateaued(monitor, config.plateau_tol):
                log.info("loss plateau after %d steps", step)
                break
    finally:
        if log_fh:
            log_fh.close()
    selector.eval()
    return TrainResult(selector, g1, g2, trace, config, weights, grid)


# --------------------------------------------------------------- ablations

SCHEMES = {
    "B": (False, False, False),
    "BN": (True, False, False),
    "RL": (False, True, False),
    "CM": (False, False, True),
    "BN+RL": (True, True, False),
    "BN+CM": (True, False, True),
    "RL+CM": (False, True, True),
    "BN+RL+CM": (True, True, True),
}


def scheme_config(base: TrainConfig, scheme: str) -> TrainConfig:
    bn, rl, cm = SCHEMES[scheme]
    return replace(base, use_background_noise=bn, use_reconstruction_loss=rl, use_complementary_mask=cm)


def ablation_grid(data: Dataset, blackbox, base_config: TrainConfig, grid: UnitGrid,
                  weights: LossWeights = None, eval_kwargs: dict = None, schemes=None,
                  trained: dict = None):
    """Train and evaluate each ablation scheme under shared seeds.

    Returns ``{scheme: EvaluationRecord}`` in the canonical scheme order.
    ``trained`` may carry already-trained :class:`TrainResult` objects keyed
    by scheme name; they are reused instead of retrained.
    """
    from .evaluation import TrainedSelector, evaluate_selector

    weights = weights or LossWeights.default_for(base_config.n_e, grid.num_units)
    eval_kwargs = dict(eval_kwargs or {})
    trained = dict(trained or {})
    records = {}
    for scheme in schemes or SCHEMES:
        if scheme not in trained:
            trained[scheme] = train_dorar(data, blackbox, scheme_config(base_config, scheme), weights, grid)
        sel = TrainedSelector(trained[scheme].selector, base_config.n_e)
        records[scheme] = evaluate_selector(sel, data, blackbox, base_config.n_e, grid,
                                            method_name=f"dorar[{scheme}]", **eval_kwargs)
    return records


def config_dict(config: TrainConfig) -> dict:
    d = asdict(config)
    d["adam_betas"] = list(config.adam_betas)
    return d


def read_trace(path) -> list:
    """Parse a ``train.log`` written by :func:`train_dorar`."""
    out = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        fields = dict(tok.split("=", 1) for tok in line.split())
        out.append({k: (int(v) if k == "step" else float(v)) for k, v in fields.items()})
    return out
