"""Shared domain types, objectives and evaluation metrics.

Vertex ``p`` of the association graph stands for the node pair ``(i, a)``
with ``p = i * n2 + a`` (row-major), used consistently across the package.
"""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np


class ContractError(ValueError):
    """An argument violates an operation's precondition."""


class Sense(str, enum.Enum):
    MAXIMIZE = "max"
    MINIMIZE = "min"

    @property
    def sign(self) -> float:
        return 1.0 if self is Sense.MAXIMIZE else -1.0

    @classmethod
    def parse(cls, value) -> "Sense":
        if isinstance(value, Sense):
            return value
        key = str(value).strip().lower()
        aliases = {"max": cls.MAXIMIZE, "maximize": cls.MAXIMIZE,
                   "min": cls.MINIMIZE, "minimize": cls.MINIMIZE}
        if key not in aliases:
            raise ValueError(f"unknown objective sense {value!r}")
        return aliases[key]


SYMMETRY_WARN_TOL = 1e-9


def vertex_index(i: int, a: int, n2: int, n1: int | None = None) -> int:
    if n2 <= 0:
        raise ContractError(f"n2 must be positive, got {n2}")
    if a < 0 or a >= n2 or i < 0 or (n1 is not None and i >= n1):
        raise ContractError(f"node pair ({i}, {a}) out of range")
    return i * n2 + a


def vertex_unindex(p: int, n2: int) -> tuple[int, int]:
    if n2 <= 0 or p < 0:
        raise ContractError(f"invalid vertex {p} for n2={n2}")
    return divmod(p, n2)


@dataclass(frozen=True, eq=False)
class AssociationView:
    """Vertex weights ``f`` and edge weights ``w`` of the association graph.

    Adjacency is implicit: ``p = (i, a)`` and ``q = (j, b)`` are adjacent iff
    ``i != j`` and ``a != b``.
    """

    n1: int
    n2: int
    f: np.ndarray
    w: np.ndarray

    @property
    def degree(self) -> int:
        return (self.n1 - 1) * (self.n2 - 1)

    @cached_property
    def adjacency(self) -> np.ndarray:
        return adjacency_mask(self.n1, self.n2)


def adjacency_mask(n1: int, n2: int) -> np.ndarray:
    rows = np.repeat(np.arange(n1), n2)
    cols = np.tile(np.arange(n2), n1)
    return (rows[:, None] != rows[None, :]) & (cols[:, None] != cols[None, :])


@dataclass(frozen=True, eq=False)
class AffinityMatrix:
    """Dense symmetric Lawler affinity over the ``n1 * n2`` association vertices.

    Asymmetric input is symmetrized as ``(K + K^T) / 2``; a warning is issued
    when the asymmetry exceeds 1e-9.
    """

    n1: int
    n2: int
    k: np.ndarray
    sense: Sense = Sense.MAXIMIZE

    def __post_init__(self):
        if self.n1 <= 0 or self.n2 <= 0:
            raise ContractError("n1 and n2 must be positive")
        k = np.array(self.k, dtype=np.float64)
        size = self.n1 * self.n2
        if k.shape != (size, size):
            raise ContractError(f"affinity shape {k.shape} does not match ({size}, {size})")
        if not np.all(np.isfinite(k)):
            raise ContractError("affinity entries must be finite")
        if not np.array_equal(k, k.T):
            asym = float(np.max(np.abs(k - k.T)))
            if asym > SYMMETRY_WARN_TOL:
                warnings.warn(f"affinity asymmetric by {asym:.3g}; symmetrizing", stacklevel=3)
            k = (k + k.T) / 2.0
        k.setflags(write=False)
        object.__setattr__(self, "k", k)
        object.__setattr__(self, "sense", Sense.parse(self.sense))

    @property
    def size(self) -> int:
        return self.n1 * self.n2

    @cached_property
    def view(self) -> AssociationView:
        f = np.diag(self.k).copy()
        w = self.k.copy()
        np.fill_diagonal(w, 0.0)
        f.setflags(write=False)
        w.setflags(write=False)
        return AssociationView(self.n1, self.n2, f, w)

    def __eq__(self, other):
        if not isinstance(other, AffinityMatrix):
            return NotImplemented
        return (self.n1, self.n2, self.sense) == (other.n1, other.n2, other.sense) and np.array_equal(
            self.k, other.k
        )

    __hash__ = None


class PartialSolution:
    """A conflict-free ordered set of association vertices.

    Equality and hashing use set semantics; insertion order is kept only for
    reporting.
    """

    __slots__ = ("n1", "n2", "selected", "row_used", "col_used", "_key")

    def __init__(self, n1: int, n2: int, selected: Iterable[int] = ()):
        self.n1 = n1
        self.n2 = n2
        row_used = np.zeros(n1, dtype=bool)
        col_used = np.zeros(n2, dtype=bool)
        sel = []
        for p in selected:
            p = int(p)
            if p < 0 or p >= n1 * n2:
                raise ContractError(f"vertex {p} out of range for {n1}x{n2}")
            i, a = divmod(p, n2)
            if row_used[i] or col_used[a]:
                raise ContractError(f"vertex {p} conflicts with the current selection")
            row_used[i] = True
            col_used[a] = True
            sel.append(p)
        row_used.setflags(write=False)
        col_used.setflags(write=False)
        self.selected = tuple(sel)
        self.row_used = row_used
        self.col_used = col_used
        self._key = frozenset(sel)

    @classmethod
    def from_pairs(cls, n1: int, n2: int, pairs: Iterable[Sequence[int]]) -> "PartialSolution":
        return cls(n1, n2, (vertex_index(int(i), int(a), n2, n1) for i, a in pairs))

    @classmethod
    def from_indicator(cls, n1: int, n2: int, x) -> "PartialSolution":
        return cls(n1, n2, np.flatnonzero(np.asarray(x).reshape(-1)))

    def pairs(self) -> list[tuple[int, int]]:
        return [divmod(p, self.n2) for p in self.selected]

    def indicator(self) -> np.ndarray:
        x = np.zeros(self.n1 * self.n2, dtype=np.float64)
        x[list(self.selected)] = 1.0
        return x

    def conflicts(self, p: int) -> list[int]:
        """Selected vertices sharing a G1 or G2 node with ``p`` (``p`` itself excluded)."""
        i, a = divmod(p, self.n2)
        return [q for q in self.selected if q != p and (q // self.n2 == i or q % self.n2 == a)]

    def is_available(self, p: int) -> bool:
        i, a = divmod(p, self.n2)
        return not (self.row_used[i] or self.col_used[a])

    def add(self, p: int) -> "PartialSolution":
        return PartialSolution(self.n1, self.n2, self.selected + (int(p),))

    def remove(self, *ps: int) -> "PartialSolution":
        drop = set(ps)
        return PartialSolution(self.n1, self.n2, (q for q in self.selected if q not in drop))

    def __len__(self):
        return len(self.selected)

    def __iter__(self):
        return iter(self.selected)

    def __contains__(self, p):
        return p in self._key

    def __eq__(self, other):
        if not isinstance(other, PartialSolution):
            return NotImplemented
        return (self.n1, self.n2) == (other.n1, other.n2) and self._key == other._key

    def __hash__(self):
        return hash((self.n1, self.n2, self._key))

    def __repr__(self):
        return f"PartialSolution({self.n1}x{self.n2}, pairs={self.pairs()})"


@dataclass
class MatchResult:
    solution: PartialSolution
    raw_score: float
    reg_score: float | None = None
    steps: int = 0
    wall_time: float = 0.0
    info: dict = field(default_factory=dict)


def _check_compatible(K: AffinityMatrix, U: PartialSolution):
    if (U.n1, U.n2) != (K.n1, K.n2):
        raise ContractError(f"solution is {U.n1}x{U.n2} but affinity is {K.n1}x{K.n2}")


def objective_score(K: AffinityMatrix, U: PartialSolution) -> float:
    """``vec(X)^T K vec(X)`` for the partial permutation induced by ``U``."""
    _check_compatible(K, U)
    if not len(U):
        return 0.0
    idx = np.fromiter(U.selected, dtype=np.intp)
    return float(K.k[np.ix_(idx, idx)].sum())


def objective_from_set(view: AssociationView, U: PartialSolution) -> float:
    """Vertex weights plus edge weights of the complete subgraph induced by ``U``."""
    if (U.n1, U.n2) != (view.n1, view.n2):
        raise ContractError("solution and view dimensions differ")
    sel = list(U.selected)
    total = 0.0
    for p in sel:
        total += view.f[p]
    for p in sel:
        for q in sel:
            if p != q:
                total += view.w[p, q]
    return float(total)


def score_gain(K: AffinityMatrix, U: PartialSolution, p: int) -> float:
    """Objective change from adding ``p`` to ``U``: ``f[p] + 2 * sum_q w[p, q]``."""
    view = K.view
    if not len(U):
        return float(view.f[p])
    idx = np.fromiter(U.selected, dtype=np.intp)
    return float(view.f[p] + 2.0 * view.w[p, idx].sum())


def f1_metrics(pred: PartialSolution, gt: PartialSolution) -> tuple[float, float, float]:
    if (pred.n1, pred.n2) != (gt.n1, gt.n2):
        raise ContractError("pred and gt dimensions differ")
    hits = len(pred._key & gt._key)
    recall = hits / len(gt) if len(gt) else 0.0
    precision = hits / len(pred) if len(pred) else 0.0
    f1 = 2 * recall * precision / (recall + precision) if recall + precision > 0 else 0.0
    return recall, precision, f1


def objective_ratio(pred: PartialSolution, gt: PartialSolution, K: AffinityMatrix) -> float:
    denom = objective_score(K, gt)
    if denom == 0:
        raise ZeroDivisionError("ground-truth objective is zero; ratio undefined")
    return objective_score(K, pred) / denom


def optimal_gap(pred_score: float, optimal: float) -> float:
    if not optimal > 0:
        raise ContractError(f"optimal must be positive, got {optimal}")
    return (pred_score - optimal) / optimal
