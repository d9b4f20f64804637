"""Exhaustive and spectral reference solvers."""

from __future__ import annotations

import itertools
import logging
import math
import time

import numpy as np

from .core import AffinityMatrix, ContractError, MatchResult, PartialSolution, Sense, objective_score
from .regularizer import RegFn, reg_fn_eval

log = logging.getLogger(__name__)

SEARCH_LIMIT = 10**7
_CHUNK = 200_000


class SearchSpaceError(ContractError):
    def __init__(self, bound: int, limit: int = SEARCH_LIMIT):
        super().__init__(f"brute force would enumerate {bound} candidates (limit {limit})")
        self.bound = bound


def candidate_count(n1: int, n2: int, k: int) -> int:
    return math.comb(n1, k) * math.comb(n2, k) * math.factorial(k)


def _candidates(n1: int, n2: int, k: int) -> np.ndarray:
    """All conflict-free vertex sets of size ``k`` as sorted rows, in lexicographic order."""
    if k == 0:
        return np.zeros((1, 0), dtype=np.intp)
    rows = np.array(list(itertools.combinations(range(n1), k)), dtype=np.intp)
    cols = np.array(list(itertools.permutations(range(n2), k)), dtype=np.intp)
    # rows are increasing, so i*n2 + a is increasing along each candidate
    idx = rows[:, None, :] * n2 + cols[None, :, :]
    idx = idx.reshape(-1, k)
    order = np.lexsort(idx.T[::-1])
    return idx[order]


def _scores(k: np.ndarray, cand: np.ndarray) -> np.ndarray:
    out = np.empty(len(cand))
    for s in range(0, len(cand), _CHUNK):
        c = cand[s:s + _CHUNK]
        out[s:s + _CHUNK] = k[c[:, :, None], c[:, None, :]].sum(axis=(1, 2))
    return out


def brute_force(K: AffinityMatrix, cardinality: int | None = None, f: RegFn | None = None,
                sense: Sense | str | None = None, limit: int = SEARCH_LIMIT):
    """Exact optimum by enumerating every conflict-free vertex set.

    With ``cardinality`` only sets of that size are considered, otherwise all
    sizes ``0..min(n1, n2)``. With ``f`` the regularised objective is used; the
    empty set scores 0 there. Returns ``(solution, score)`` where ``score`` is
    in the objective's own units (not sign-flipped). Among equal scores the
    lexicographically smallest sorted vertex tuple wins.
    """
    n1, n2 = K.n1, K.n2
    sign = Sense.parse(sense).sign if sense is not None else K.sense.sign
    m = min(n1, n2)
    if cardinality is not None:
        if not 0 <= cardinality <= m:
            raise ContractError(f"cardinality {cardinality} outside [0, {m}]")
        sizes = [cardinality]
    else:
        sizes = list(range(m + 1))
    bound = sum(candidate_count(n1, n2, k) for k in sizes)
    if bound > limit:
        raise SearchSpaceError(bound, limit)

    best_key = None
    best_set: tuple[int, ...] = ()
    best_score = 0.0
    for k in sizes:
        cand = _candidates(n1, n2, k)
        raw = _scores(K.k, cand)
        if f is not None:
            score = raw * reg_fn_eval(f, k) if k else np.zeros_like(raw)
        else:
            score = raw
        signed = sign * score
        top = signed.max()
        # candidates are in lexicographic order, so the first maximiser is the smallest
        j = int(np.flatnonzero(signed == top)[0])
        key = tuple(int(v) for v in cand[j])
        if best_key is None or top > best_key[0] or (top == best_key[0] and key < best_set):
            best_key = (top,)
            best_set = key
            best_score = float(score[j])
    return PartialSolution(n1, n2, best_set), best_score


def power_iteration(M: np.ndarray, max_iter: int = 200, tol: float = 1e-10, v0=None, psd_shift: bool = True):
    """Leading eigenvector of a symmetric non-negative matrix.

    With ``psd_shift`` the iteration runs on ``M + sigma I`` where ``sigma`` is
    the largest absolute row sum, which bounds every eigenvalue. The shifted
    matrix is positive semidefinite with the same eigenvectors, and that makes
    the Rayleigh quotient non-decreasing from one iterate to the next.

    Returns ``(v, converged, rayleigh_history)``; the history holds Rayleigh
    quotients of ``M`` itself and ``v`` is the iterate with the largest one.
    """
    n = M.shape[0]
    v = np.full(n, 1.0 / math.sqrt(n)) if v0 is None else np.asarray(v0, dtype=np.float64)
    v = v / np.linalg.norm(v)
    sigma = float(np.abs(M).sum(axis=1).max()) if psd_shift else 0.0
    history = [float(v @ M @ v)]
    best_v, best_r = v, history[0]
    converged = False
    for _ in range(max_iter):
        u = M @ v + sigma * v
        norm = np.linalg.norm(u)
        if norm == 0.0:
            converged = True
            break
        u = u / norm
        r = float(u @ M @ u)
        history.append(r)
        if r >= best_r:
            best_v, best_r = u, r
        delta = np.linalg.norm(u - v)
        v = u
        if delta < tol:
            converged = True
            break
    return best_v, converged, history


def greedy_discretize(v: np.ndarray, n1: int, n2: int, max_pairs: int | None = None) -> PartialSolution:
    """Take the largest remaining entry of ``v`` among conflict-free vertices until none are left."""
    score = np.asarray(v, dtype=np.float64).reshape(n1, n2).copy()
    limit = min(n1, n2) if max_pairs is None else min(max_pairs, n1, n2)
    chosen = []
    while len(chosen) < limit:
        flat = int(np.argmax(score))
        if score.flat[flat] == -np.inf:
            break
        i, a = divmod(flat, n2)
        chosen.append(flat)
        score[i, :] = -np.inf
        score[:, a] = -np.inf
    return PartialSolution(n1, n2, chosen)


def spectral_match(K: AffinityMatrix, max_pairs: int | None = None, max_iter: int = 200,
                   tol: float = 1e-10) -> MatchResult:
    """Spectral matching baseline: Perron vector of the (sign-corrected) affinity, then greedy rounding."""
    t0 = time.perf_counter()
    M = K.sense.sign * K.k
    low = float(M.min())
    shift = 0.0
    if low < 0:
        shift = -low
        log.info("shifting affinity by %g to make it non-negative", shift)
        M = M + shift
    v, converged, history = power_iteration(M, max_iter, tol)
    if not converged:
        log.warning("power iteration did not converge in %d iterations", max_iter)
    U = greedy_discretize(v, K.n1, K.n2, max_pairs)
    info = {"converged": converged, "shift": shift, "rayleigh": history}
    return MatchResult(U, objective_score(K, U), None, len(history) - 1, time.perf_counter() - t0, info)
