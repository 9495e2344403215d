"""Flat ``key = value`` run configuration shared by every CLI command."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional, get_type_hints


@dataclass
class RunConfig:
    dataset: str = "mnist"
    data: Optional[str] = None
    out: str = "runs"
    seed: int = 0

    # black box
    epochs: int = 3
    accuracy_floor: Optional[float] = None
    blackbox: Optional[str] = None

    # selector training
    n_e: int = 4
    unit: Optional[str] = None
    steps: Optional[int] = None
    max_epochs: int = 20
    batch_size: int = 100
    learning_rate: float = 5e-4
    temperature: float = 0.5
    alpha: Optional[float] = None
    beta: float = 1.0
    background_noise: bool = True
    reconstruction_loss: bool = True
    complementary_mask: bool = True
    max_train: Optional[int] = None
    records_out: str = "all"

    # evaluation
    method: str = "dorar"
    selector: Optional[str] = None
    records: Optional[str] = None
    reps: int = 5
    retrain_epochs: int = 30
    patience: int = 3
    eval_max_train: Optional[int] = None
    eval_max_val: Optional[int] = None
    background: str = "empirical"
    smoothgrad_samples: int = 50
    smoothgrad_sigma: float = 0.15
    aggregation: str = "sum"
    workers: int = 1

    # comparison
    basis: str = "partial-order"
    weight: float = 1.0
    intervals: bool = False

    # synthetic generation
    users: int = 18
    samples_per_user: int = 100
    movements: int = 10
    points_per_movement: int = 16

    # rendering
    indices: str = "0"
    scale: int = 8

    # information-theory oracle
    trials: int = 1000

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def dumps(self) -> str:
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self))

    @classmethod
    def loads(cls, text: str, base: "RunConfig" = None) -> "RunConfig":
        hints = get_type_hints(cls)
        known = {f.name for f in fields(cls)}
        values = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, raw = line.partition("=")
            key = key.strip().replace("-", "_")
            if not sep:
                raise ValueError(f"line {lineno}: expected key = value")
            if key not in known:
                raise ValueError(f"line {lineno}: unknown key {key!r}")
            values[key] = parse_value(hints[key], raw.strip())
        return dataclasses.replace(base or cls(), **values)

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.dumps())
        return path

    @classmethod
    def load(cls, path, base: "RunConfig" = None) -> "RunConfig":
        return cls.loads(Path(path).read_text(), base)


def _format(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_value(hint, raw: str):
    optional = getattr(hint, "__args__", None) and type(None) in hint.__args__
    if optional:
        if raw.lower() in ("none", ""):
            return None
        hint = next(a for a in hint.__args__ if a is not type(None))
    if hint is bool:
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if hint is int:
        return int(raw)
    if hint is float:
        return float(raw)
    return raw


def parse_unit(spec: str) -> tuple:
    try:
        return tuple(int(p) for p in spec.lower().split("x"))
    except ValueError:
        raise ValueError(f"unit must look like 4x4 or 4, got {spec!r}") from None
