"""Brute-force information measures over small discrete joint distributions.

All quantities are in bits.  This is an exact oracle for enumerable tables,
not an estimator.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MAX_ALPHABET = 16
MAX_VARIABLES = 6
SUM_TOL = 1e-12


class JointDistribution:
    """Probability table over the product of finite alphabets.

    ``table`` has one axis per variable, in the order of ``names``.
    """

    def __init__(self, names: Sequence[str], table):
        names = tuple(names)
        p = np.asarray(table, dtype=float)
        if len(set(names)) != len(names):
            raise ValueError("variable names must be distinct")
        if p.ndim != len(names):
            raise ValueError(f"table has {p.ndim} axes for {len(names)} variables")
        if len(names) > MAX_VARIABLES:
            raise ValueError(f"at most {MAX_VARIABLES} variables supported")
        if any(s < 1 or s > MAX_ALPHABET for s in p.shape):
            raise ValueError(f"alphabet sizes must be in [1, {MAX_ALPHABET}], got {p.shape}")
        if not np.all(np.isfinite(p)) or (p < 0).any():
            raise ValueError("probabilities must be finite and non-negative")
        if abs(p.sum() - 1.0) > SUM_TOL:
            raise ValueError(f"probabilities sum to {p.sum()!r}, not 1")
        self.names = names
        self.table = p

    @property
    def alphabet_sizes(self) -> dict:
        return dict(zip(self.names, self.table.shape))

    def _axes(self, vars_: Iterable[str]) -> tuple:
        out = []
        for v in vars_:
            if v not in self.names:
                raise KeyError(f"unknown variable {v!r}; have {self.names}")
            out.append(self.names.index(v))
        return tuple(out)

    def marginal(self, vars_: Iterable[str]) -> np.ndarray:
        keep = set(self._axes(vars_))
        drop = tuple(i for i in range(len(self.names)) if i not in keep)
        return self.table.sum(axis=drop)

    def entropy(self, vars_: Iterable[str]) -> float:
        m = self.marginal(vars_).ravel()
        m = m[m > 0]
        return float(-(m * np.log2(m)).sum())

    def marginalize(self, vars_: Sequence[str]) -> "JointDistribution":
        axes = self._axes(vars_)
        m = self.marginal(vars_)
        # marginal() keeps the original axis order; permute to the requested one
        order = np.argsort(np.argsort(axes))
        return JointDistribution(tuple(vars_), np.transpose(m, order))

    @classmethod
    def from_atoms(cls, names: Sequence[str], atoms: dict, sizes: Sequence[int] = None) -> "JointDistribution":
        """Build from ``{(v1, ..., vk): prob}`` with integer values."""
        if sizes is None:
            sizes = [max(a[i] for a in atoms) + 1 for i in range(len(names))]
        table = np.zeros(sizes)
        for vals, prob in atoms.items():
            table[tuple(vals)] += prob
        return cls(names, table)


def _as_set(v) -> tuple:
    return (v,) if isinstance(v, str) else tuple(v)


def _disjoint(*sets):
    seen = set()
    for s in sets:
        if seen & set(s):
            raise ValueError(f"variable sets overlap on {sorted(seen & set(s))}")
        seen |= set(s)


def mutual_information(joint: JointDistribution, a, b) -> float:
    a, b = _as_set(a), _as_set(b)
    _disjoint(a, b)
    return joint.entropy(a) + joint.entropy(b) - joint.entropy(a + b)


def conditional_mi(joint: JointDistribution, a, b, given) -> float:
    a, b, c = _as_set(a), _as_set(b), _as_set(given)
    _disjoint(a, b, c)
    if not c:
        return mutual_information(joint, a, b)
    return (joint.entropy(a + c) + joint.entropy(b + c) - joint.entropy(a + b + c) - joint.entropy(c))


def interaction_info(joint: JointDistribution, a, b, c) -> float:
    """Co-information ``I(A;B;C) = I(A;B) - I(A;B|C)``; may be negative."""
    return mutual_information(joint, a, b) - conditional_mi(joint, a, b, c)


def conditional_interaction_info(joint: JointDistribution, a, b, c, given) -> float:
    return conditional_mi(joint, a, b, given) - conditional_mi(joint, a, b, _as_set(c) + _as_set(given))


# ----------------------------------------------------------- masking identity


@dataclass(frozen=True)
class IdentityReport:
    lhs: float
    rhs: float
    t: float
    terms: dict

    @property
    def residual(self) -> float:
        return abs(self.lhs - self.rhs)


def verify_epite_identity(joint: JointDistribution, t: float = None, selected="Xs", complement="Xc",
                          label="C", mask="M", features="X") -> IdentityReport:
    """Compare both sides of the double-sided target decomposition.

    LHS is ``I(Xs;C) - I(Xc;C)``.  RHS is
    ``2 I(Xs;C|M) - I(Xs;Xc;C|M) + I(Xs;M;C) - I(Xc;M;C) - t`` with
    ``t = I(X;C|M)``, computed from ``joint`` when it carries ``features``.
    """
    missing = [v for v in (selected, complement, label, mask) if v not in joint.names]
    if missing:
        raise KeyError(f"joint lacks variables {missing}")
    if t is None:
        if features not in joint.names:
            raise KeyError(f"t not supplied and joint has no {features!r} variable")
        t = conditional_mi(joint, features, label, mask)
    terms = {
        "I(Xs;C)": mutual_information(joint, selected, label),
        "I(Xc;C)": mutual_information(joint, complement, label),
        "I(Xs;C|M)": conditional_mi(joint, selected, label, mask),
        "I(Xs;Xc;C|M)": conditional_interaction_info(joint, selected, complement, label, mask),
        "I(Xs;M;C)": interaction_info(joint, selected, mask, label),
        "I(Xc;M;C)": interaction_info(joint, complement, mask, label),
    }
    lhs = terms["I(Xs;C)"] - terms["I(Xc;C)"]
    rhs = (2 * terms["I(Xs;C|M)"] - terms["I(Xs;Xc;C|M)"] + terms["I(Xs;M;C)"]
           - terms["I(Xc;M;C)"] - t)
    return IdentityReport(lhs, rhs, float(t), terms)


def masked_joint(rng, n_features: int = 2, feature_alphabet: int = 2, num_classes: int = 2,
                 noise_informative: bool = False) -> JointDistribution:
    """Random joint over (X, C, M, E, Xs, Xc) generated by the masking process.

    ``X`` is a vector of ``n_features`` discrete features, ``M`` a binary mask
    over them and ``E`` background noise of the same shape.  ``Xs`` keeps the
    selected features and fills the rest from ``E``; ``Xc`` does the opposite.
    Each of the vector variables is flattened to a single integer.  With
    ``noise_informative`` the noise depends on the class, which breaks the
    assumption behind the decomposition.
    """
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    k, f = feature_alphabet, n_features
    vectors = list(itertools.product(range(k), repeat=f))
    masks = list(itertools.product((0, 1), repeat=f))
    nx, nm = len(vectors), len(masks)
    if nx > MAX_ALPHABET:
        raise ValueError("feature space too large for brute force")
    p_xc = rng.dirichlet(np.ones(nx * num_classes)).reshape(nx, num_classes)
    p_m_given_x = rng.dirichlet(np.ones(nm), size=nx)
    if noise_informative:
        p_e = rng.dirichlet(np.full(nx, 0.3), size=num_classes)
    else:
        p_e = np.broadcast_to(rng.dirichlet(np.ones(nx)), (num_classes, nx))
    index = {v: i for i, v in enumerate(vectors)}
    table = np.zeros((nx, num_classes, nm, nx, nx, nx))
    for xi, x in enumerate(vectors):
        for c in range(num_classes):
            for mi, m in enumerate(masks):
                for ei, e in enumerate(vectors):
                    p = p_xc[xi, c] * p_m_given_x[xi, mi] * p_e[c, ei]
                    if p == 0:
                        continue
                    xs = index[tuple(xv if mv else ev for xv, ev, mv in zip(x, e, m))]
                    xc = index[tuple(ev if mv else xv for xv, ev, mv in zip(x, e, m))]
                    table[xi, c, mi, ei, xs, xc] += p
    table /= table.sum()
    return JointDistribution(("X", "C", "M", "E", "Xs", "Xc"), table)


def random_joint(rng, sizes: Sequence[int], names: Sequence[str] = None) -> JointDistribution:
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    names = names or [chr(ord("A") + i) for i in range(len(sizes))]
    p = rng.dirichlet(np.ones(int(np.prod(sizes)))).reshape(sizes)
    return JointDistribution(names, p / p.sum())


# ------------------------------------------------------------------------- io


def read_joint(path, names: Sequence[str] = None) -> JointDistribution:
    """Parse ``val_1,...,val_k,probability`` lines into a joint table.

    Values may be arbitrary strings; each variable's alphabet is the sorted
    set of values it takes.  Lines starting with ``#`` are comments.
    """
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = [s.strip() for s in line.split(",")]
        if rows and len(parts) != len(rows[0][0]) + 1:
            raise ValueError(f"{path}:{lineno}: expected {len(rows[0][0]) + 1} fields")
        rows.append((parts[:-1], float(parts[-1])))
    if not rows:
        raise ValueError(f"{path}: no atoms")
    k = len(rows[0][0])
    names = tuple(names or [f"V{i}" for i in range(k)])
    alphabets = [sorted({vals[i] for vals, _ in rows}, key=_sort_key) for i in range(k)]
    sizes = [len(a) for a in alphabets]
    if any(s > MAX_ALPHABET for s in sizes):
        raise ValueError(f"alphabet sizes {sizes} exceed {MAX_ALPHABET}")
    table = np.zeros(sizes)
    for vals, prob in rows:
        table[tuple(alphabets[i].index(v) for i, v in enumerate(vals))] += prob
    return JointDistribution(names, table)


def _sort_key(v: str):
    try:
        return (0, float(v), v)
    except ValueError:
        return (1, 0.0, v)


def write_joint(path, joint: JointDistribution) -> None:
    with open(path, "w") as fh:
        for idx in itertools.product(*(range(s) for s in joint.table.shape)):
            p = joint.table[idx]
            if p > 0:
                fh.write(",".join(str(i) for i in idx) + f",{float(p)!r}\n")
