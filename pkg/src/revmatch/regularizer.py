"""Cardinality-penalised affinity.

The regularised objective ``J(U) * f(|U|)`` is not quadratic in the
assignment. Around the current solution size it is brought back to QAP form
by fitting ``g(n) = a n^2 + b n + c`` to ``1 - f(n)`` and folding ``a`` and
``b`` into the affinity matrix, holding the current raw score ``Cx`` fixed.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .core import AffinityMatrix, PartialSolution, objective_score


class RegDomainError(ValueError):
    pass


class UnderdeterminedFitError(ValueError):
    pass


class RegKind(str, enum.Enum):
    F1_LINEAR = "f1"
    F2_RATIONAL = "f2"
    F3_INVERSE_SQUARE = "f3"


@dataclass(frozen=True)
class RegFn:
    kind: RegKind = RegKind.F1_LINEAR
    n1: int = 1
    n2: int = 1

    def __post_init__(self):
        object.__setattr__(self, "kind", RegKind(self.kind))

    @property
    def min_n(self) -> int:
        return 1 if self.kind is RegKind.F3_INVERSE_SQUARE else 0

    def __call__(self, n: int) -> float:
        return reg_fn_eval(self, n)


def reg_fn_eval(f: RegFn, n: int) -> float:
    if n < 0:
        raise RegDomainError(f"n must be non-negative, got {n}")
    if f.kind is RegKind.F1_LINEAR:
        m = 3.0 * max(f.n1, f.n2)
        return (m - n) / m
    if f.kind is RegKind.F2_RATIONAL:
        return (1.0 + n) / (1.0 + 3.0 * n)
    if n == 0:
        raise RegDomainError("f3(n) = 1/n^2 is undefined at n = 0")
    return 1.0 / (n * n)


@dataclass(frozen=True)
class QuadFit:
    a: float
    b: float
    c: float
    lo: int
    hi: int
    max_residual: float

    def __call__(self, n: float) -> float:
        return self.a * n * n + self.b * n + self.c


def fit_range(f: RegFn, current_size: int, half_width: int = 2) -> tuple[int, int]:
    """Integer window ``[n - h, n + h]``, shifted up when it would cross ``f``'s domain."""
    lo = current_size - half_width
    hi = current_size + half_width
    if lo < f.min_n:
        hi += f.min_n - lo
        lo = f.min_n
    return lo, hi


def quad_fit(
    f: RegFn,
    current_size: int,
    half_width: int = 2,
    target: Callable[[int], float] | None = None,
) -> QuadFit:
    """Least-squares quadratic through ``{(n, 1 - f(n))}`` over the fit window.

    ``target`` replaces ``1 - f(n)`` and exists for testing the solver itself.
    """
    if current_size < 0:
        raise RegDomainError("current_size must be non-negative")
    lo, hi = fit_range(f, current_size, half_width)
    if hi - lo + 1 < 3:
        raise UnderdeterminedFitError(f"window [{lo}, {hi}] has fewer than 3 points")
    ns = np.arange(lo, hi + 1, dtype=np.float64)
    if target is None:
        ys = np.array([1.0 - f(int(n)) for n in ns])
    else:
        ys = np.array([float(target(int(n))) for n in ns])
    V = np.stack([ns * ns, ns, np.ones_like(ns)], axis=1)
    # center the abscissa so the normal equations stay well conditioned
    shift = 0.5 * (lo + hi)
    Vc = np.stack([(ns - shift) ** 2, ns - shift, np.ones_like(ns)], axis=1)
    ac, bc, cc = np.linalg.solve(Vc.T @ Vc, Vc.T @ ys)
    a = ac
    b = bc - 2.0 * ac * shift
    c = ac * shift * shift - bc * shift + cc
    resid = np.abs(V @ np.array([a, b, c]) - ys)
    return QuadFit(float(a), float(b), float(c), lo, hi, float(resid.max()))


def regularized_objective(K: AffinityMatrix, U: PartialSolution, f: RegFn) -> float:
    return objective_score(K, U) * reg_fn_eval(f, len(U))


def regularized_affinity(K: AffinityMatrix, cx: float, fit: QuadFit) -> AffinityMatrix:
    """``K - a*Cx*ones - b*Cx*I``; entries may turn negative."""
    if not np.isfinite(cx):
        raise ValueError("Cx must be finite")
    khat = K.k - fit.a * cx
    khat[np.diag_indices_from(khat)] -= fit.b * cx
    return AffinityMatrix(K.n1, K.n2, khat, K.sense)
