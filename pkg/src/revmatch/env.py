"""Sequential matching environment over the association graph.

A state is a partial solution; an action picks one association vertex. In
basic mode only vertices free of row/column conflicts may be picked. In
revocable mode any vertex may be picked and the (at most two) selected
vertices it conflicts with are released first.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from .core import AffinityMatrix, ContractError, PartialSolution, Sense
from .regularizer import RegFn, RegKind, quad_fit, reg_fn_eval


class IllegalActionError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class EnvConfig:
    revocable: bool = True
    inlier_count: int | None = None
    use_regularization: bool = False
    reg_fn: RegKind = RegKind.F1_LINEAR
    reg_half_width: int = 2
    max_steps: int | None = None  # default: 3*min(n1, n2) revocable, min(n1, n2) basic
    seeds: tuple[tuple[int, int], ...] = ()
    sense: Sense | None = None  # None: take it from the affinity matrix
    reward_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "reg_fn", RegKind(self.reg_fn))
        object.__setattr__(self, "seeds", tuple((int(i), int(a)) for i, a in self.seeds))
        if self.sense is not None:
            object.__setattr__(self, "sense", Sense.parse(self.sense))
        if self.inlier_count is not None and self.inlier_count < 1:
            raise ConfigurationError("inlier_count must be positive")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigurationError("max_steps must be positive")
        if not self.reward_scale > 0:
            raise ConfigurationError("reward_scale must be positive")


@dataclass(frozen=True)
class EnvState:
    solution: PartialSolution
    raw_score: float
    reg_score: float
    step_count: int = 0
    done: bool = False
    best_solution: PartialSolution | None = None
    best_score: float = -np.inf
    # (a*Cx, b*Cx) of the regularised affinity for this state; None when unregularised
    reg_shift: tuple[float, float] | None = None
    info: dict = field(default_factory=dict, compare=False)


@lru_cache(maxsize=256)
def _cached_fit(kind: RegKind, n1: int, n2: int, size: int, half_width: int):
    return quad_fit(RegFn(kind, n1, n2), size, half_width)


class MatchingEnv:
    """Transition function for one affinity matrix under one configuration.

    States are immutable; ``step`` returns a new state and never mutates its
    argument.
    """

    def __init__(self, K: AffinityMatrix, cfg: EnvConfig = EnvConfig()):
        self.K = K
        self.cfg = cfg
        self.n1, self.n2 = K.n1, K.n2
        self.size = K.size
        self.sense = cfg.sense or K.sense
        self.sign = self.sense.sign
        self.reg_fn = RegFn(cfg.reg_fn, K.n1, K.n2)
        m = min(self.n1, self.n2)
        if cfg.inlier_count is not None and cfg.inlier_count > m:
            raise ConfigurationError(f"inlier_count {cfg.inlier_count} exceeds min(n1, n2) = {m}")
        if cfg.max_steps is not None:
            self.max_steps = cfg.max_steps
        else:
            self.max_steps = 3 * m if cfg.revocable else m
        self._w = K.view.w
        self._f = K.view.f
        self.locked = self._seed_vertices()

    def _seed_vertices(self) -> tuple[int, ...]:
        try:
            seeded = PartialSolution.from_pairs(self.n1, self.n2, self.cfg.seeds)
        except ContractError as exc:
            raise ConfigurationError(f"invalid seeds: {exc}") from None
        return seeded.selected

    # -- scoring ------------------------------------------------------------

    def raw_score(self, U: PartialSolution) -> float:
        if not len(U):
            return 0.0
        idx = np.fromiter(U.selected, dtype=np.intp)
        return float(self.K.k[np.ix_(idx, idx)].sum())

    def reg_score(self, raw: float, size: int) -> float:
        # the empty solution scores 0 under every f, including f3 where f(0) is undefined
        if size == 0:
            return 0.0
        return raw * reg_fn_eval(self.reg_fn, size)

    def episode_score(self, state: EnvState) -> float:
        """Score the agent maximises: regularised or raw, sign-flipped when minimising."""
        value = state.reg_score if self.cfg.use_regularization else state.raw_score
        return self.sign * value

    def reg_shift(self, raw: float, size: int) -> tuple[float, float]:
        fit = _cached_fit(self.reg_fn.kind, self.n1, self.n2, size, self.cfg.reg_half_width)
        return fit.a * raw, fit.b * raw

    def khat(self, state: EnvState) -> AffinityMatrix:
        """Regularised affinity seen by the policy in ``state`` (``K`` when unregularised)."""
        if state.reg_shift is None:
            return self.K
        a_cx, b_cx = state.reg_shift
        k = self.K.k - a_cx
        k[np.diag_indices_from(k)] -= b_cx
        return AffinityMatrix(self.n1, self.n2, k, self.K.sense)

    def _make_state(self, solution: PartialSolution, step_count: int, prev: EnvState | None) -> EnvState:
        raw = self.raw_score(solution)
        reg = self.reg_score(raw, len(solution))
        shift = self.reg_shift(raw, len(solution)) if self.cfg.use_regularization else None
        state = EnvState(solution, raw, reg, step_count, reg_shift=shift)
        score = self.episode_score(state)
        best_sol = prev.best_solution if prev is not None else None
        best = prev.best_score if prev is not None else -np.inf
        eligible = self.cfg.inlier_count is None or len(solution) == self.cfg.inlier_count
        if eligible and (best_sol is None or score > best):
            best_sol, best = solution, score
        state = replace(state, best_solution=best_sol, best_score=best)
        return replace(state, done=self.terminal_check(state))

    # -- API ----------------------------------------------------------------

    def reset(self) -> EnvState:
        solution = PartialSolution(self.n1, self.n2, self.locked)
        return self._make_state(solution, 0, None)

    def available_set(self, state: EnvState) -> np.ndarray:
        """Vertices adjacent to every selected vertex (no shared G1 or G2 node)."""
        U = state.solution
        free = ~U.row_used[:, None] & ~U.col_used[None, :]
        return np.flatnonzero(free.reshape(-1))

    def legal_mask(self, state: EnvState) -> np.ndarray:
        if not self.cfg.revocable:
            mask = np.zeros(self.size, dtype=bool)
            mask[self.available_set(state)] = True
            return mask
        mask = np.ones(self.size, dtype=bool)
        # seeded pairs are fixed: no action may displace them
        for p in self.locked:
            i, a = divmod(p, self.n2)
            row = np.arange(i * self.n2, (i + 1) * self.n2)
            col = np.arange(a, self.size, self.n2)
            mask[row] = False
            mask[col] = False
            mask[p] = True
        return mask

    def transition(self, U: PartialSolution, vertex: int) -> PartialSolution:
        if not 0 <= vertex < self.size:
            raise ContractError(f"vertex {vertex} out of range [0, {self.size})")
        if not self.cfg.revocable:
            if not U.is_available(vertex):
                raise IllegalActionError(f"vertex {vertex} conflicts with the partial solution")
            return U.add(vertex)
        if vertex in self.locked:
            return U
        clash = U.conflicts(vertex)
        if any(q in self.locked for q in clash):
            raise IllegalActionError(f"vertex {vertex} would displace a seeded pair")
        if vertex in U:
            return U.remove(vertex).add(vertex)
        return U.remove(*clash).add(vertex) if clash else U.add(vertex)

    def step(self, state: EnvState, vertex: int) -> tuple[EnvState, float]:
        vertex = int(vertex)
        new_solution = self.transition(state.solution, vertex)
        new_state = self._make_state(new_solution, state.step_count + 1, state)
        reward = (self.episode_score(new_state) - self.episode_score(state)) / self.cfg.reward_scale
        return new_state, reward

    def terminal_check(self, state: EnvState) -> bool:
        n = len(state.solution)
        if self.cfg.inlier_count is not None and n == self.cfg.inlier_count:
            return True
        if state.step_count >= self.max_steps:
            return True
        if not self.cfg.revocable and n == min(self.n1, self.n2):
            return True
        return False
