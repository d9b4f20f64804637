"""Double dueling DQN learner with prioritized replay, and the greedy solver."""

from __future__ import annotations

import logging
import math
import pickle
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import AffinityMatrix, ContractError, MatchResult, PartialSolution, f1_metrics, objective_score
from .env import EnvConfig, EnvState, MatchingEnv
from .instances import Instance
from .neural import (AdamState, GraphFeatures, NetInput, QNetParams, adam_step, backward, forward,
                     init_params, load_params, save_params, sgd_step)
from .regularizer import RegFn, reg_fn_eval

log = logging.getLogger(__name__)

PRIORITY_FLOOR = 1e-3


@dataclass
class Transition:
    state: np.ndarray  # uint8 indicator, length n1*n2
    action: int
    reward: float
    next_state: np.ndarray
    done: bool
    instance_ref: int
    next_legal: np.ndarray  # bool mask of actions legal in next_state


class ReplayMemory:
    """Ring buffer sampled with probability ``p_i^alpha / sum_j p_j^alpha``.

    Samples are addressed by a global push counter so that priority updates
    aimed at already-evicted transitions can be recognised and dropped.
    """

    def __init__(self, capacity: int = 100_000, alpha: float = 0.6):
        if capacity < 1:
            raise ContractError("replay capacity must be positive")
        self.capacity = capacity
        self.alpha = alpha
        self.items: list[Transition | None] = [None] * capacity
        self.priorities = np.zeros(capacity)
        self.pushed = 0

    def __len__(self):
        return min(self.pushed, self.capacity)

    def push(self, t: Transition) -> int:
        size = len(self)
        top = float(self.priorities[:size].max()) if size else 1.0
        slot = self.pushed % self.capacity
        self.items[slot] = t
        self.priorities[slot] = top
        self.pushed += 1
        return self.pushed - 1

    def probabilities(self) -> np.ndarray:
        p = self.priorities[: len(self)] ** self.alpha
        return p / p.sum()

    def sample(self, batch_size: int, rng: np.random.Generator):
        """Draw ``batch_size`` handles i.i.d. with replacement; returns ``(handles, transitions)``."""
        size = len(self)
        if size == 0:
            raise ContractError("cannot sample from an empty replay memory")
        slots = rng.choice(size, size=batch_size, replace=True, p=self.probabilities())
        # slot -> global handle of the transition currently stored there
        base = self.pushed - size
        handles = [self._handle(int(s), base) for s in slots]
        return handles, [self.items[int(s)] for s in slots]

    def _handle(self, slot: int, base: int) -> int:
        first = base + ((slot - base) % self.capacity)
        return first

    def is_weights(self, handles, beta: float) -> np.ndarray:
        """Importance-sampling weights ``(N P(i))^-beta``, normalised to a maximum of 1."""
        probs = self.probabilities()
        w = (len(self) * probs[np.asarray(handles) % self.capacity]) ** (-beta)
        return w / w.max()

    def priority(self, handle: int) -> float:
        return float(self.priorities[handle % self.capacity])

    def set_priority(self, handle: int, value: float):
        if handle < self.pushed - len(self) or handle >= self.pushed:
            log.debug("dropping priority update for evicted transition %d", handle)
            return
        self.priorities[handle % self.capacity] = value

    def update(self, handle: int, td_error: float):
        self.set_priority(handle, abs(float(td_error)) + PRIORITY_FLOOR)


@dataclass
class TrainConfig:
    gamma: float = 0.9
    lr: float = 1e-5
    batch_size: int = 64
    target_sync_every: int = 40
    update_every: int = 1
    eps_start: float = 1.0
    eps_end: float = 0.02
    eps_decay_episodes: int = 20_000
    alpha: float = 0.6
    capacity: int = 100_000
    episodes: int = 1000
    rng_seed: int = 0
    hidden: int = 128
    head_hidden: int = 64
    layers: int = 3
    h2_mode: str = "adjacency"
    h4_mode: str = "edge"
    dueling: bool = True
    double: bool = True
    prioritized: bool = True
    is_beta: float = 0.0  # importance-sampling exponent; 0 leaves the loss unweighted
    optimizer: str = "sgd"
    grad_clip: float = 10.0
    learn_start: int | None = None  # replay size before the first update; default batch_size
    normalize: bool = True

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ContractError("gamma must lie in (0, 1]")
        if self.eps_end > self.eps_start:
            raise ContractError("eps_end must not exceed eps_start")
        if self.optimizer not in ("sgd", "adam"):
            raise ContractError(f"unknown optimizer {self.optimizer!r}")


def epsilon(episode: int, cfg: TrainConfig) -> float:
    if cfg.eps_decay_episodes <= 0 or episode >= cfg.eps_decay_episodes:
        return cfg.eps_end
    frac = episode / cfg.eps_decay_episodes
    return cfg.eps_start + frac * (cfg.eps_end - cfg.eps_start)


class Problem:
    """One instance bound to an environment and cached network features."""

    def __init__(self, inst: Instance | AffinityMatrix, env_cfg: EnvConfig, normalize: bool = True,
                 need_w: bool = False):
        if isinstance(inst, AffinityMatrix):
            inst = Instance(inst)
        self.inst = inst
        K = inst.K
        scale = float(np.max(np.abs(K.k))) if normalize else 1.0
        self.scale = scale if scale > 0 else 1.0
        self.env = MatchingEnv(K, replace(env_cfg, reward_scale=env_cfg.reward_scale * self.scale))
        self.net_scale = self.env.sign / (env_cfg.reward_scale * self.scale)
        self.features = GraphFeatures(K.k, K.n1, K.n2)
        self.need_w = need_w

    def net_input(self, x: np.ndarray, shift=None) -> NetInput:
        return self.features.features(x, shift, self.net_scale, self.need_w)

    def state_input(self, state: EnvState) -> NetInput:
        return self.net_input(state.solution.indicator(), state.reg_shift)

    def shift_for(self, x: np.ndarray):
        """Regularisation shift of a stored state, recomputed from its indicator."""
        if not self.env.cfg.use_regularization:
            return None
        idx = np.flatnonzero(x)
        raw = float(self.inst.K.k[np.ix_(idx, idx)].sum()) if len(idx) else 0.0
        return self.env.reg_shift(raw, len(idx))


def q_values(problem: Problem, state: EnvState, params: QNetParams) -> np.ndarray:
    Q, _ = forward(problem.state_input(state), params)
    return Q[0]


def select_action(problem: Problem, state: EnvState, params: QNetParams, eps: float,
                  rng: np.random.Generator | None, train: bool = True) -> int | None:
    """Epsilon-greedy over legal actions in training, pure argmax at inference.

    Ties go to the lowest vertex index. Returns ``None`` if nothing is legal.
    """
    legal = problem.env.legal_mask(state)
    if not legal.any():
        return None
    if train and rng.random() < eps:
        return int(rng.choice(np.flatnonzero(legal)))
    Q = q_values(problem, state, params)
    return int(np.argmax(np.where(legal, Q, -np.inf)))


def td_targets(rewards, dones, next_legal, q_next_online, q_next_target, gamma: float, double: bool = True):
    """Double-DQN bootstrap: online net picks ``a'`` among legal actions, target net values it."""
    rewards = np.asarray(rewards, dtype=np.float64)
    dones = np.asarray(dones, dtype=bool)
    legal = np.asarray(next_legal, dtype=bool)
    chooser = q_next_online if double else q_next_target
    masked = np.where(legal, chooser, -np.inf)
    a_next = np.argmax(masked, axis=1)
    value = q_next_target[np.arange(len(rewards)), a_next]
    live = ~dones & legal.any(axis=1)
    return np.where(live, rewards + gamma * np.where(live, value, 0.0), rewards)


@dataclass
class TrainerState:
    params: QNetParams
    target: QNetParams
    memory: ReplayMemory
    rng: np.random.Generator
    episode: int = 0
    cnt: int = 0
    opt_state: AdamState | None = None
    log: list = field(default_factory=list)
    clip_events: int = 0


LOG_FIELDS = ("episode", "epsilon", "loss", "raw_score", "reg_score", "f1", "size", "steps")


class Trainer:
    """Runs the training loop over a fixed dataset and owns all mutable state."""

    def __init__(self, dataset: Sequence[Instance], cfg: TrainConfig, env_cfg: EnvConfig,
                 params: QNetParams | None = None):
        if not dataset:
            raise ContractError("training dataset is empty")
        self.cfg = cfg
        self.env_cfg = env_cfg
        if params is None:
            params = init_params(cfg.hidden, cfg.layers, cfg.rng_seed, dh=cfg.head_hidden,
                                 h2_mode=cfg.h2_mode, h4_mode=cfg.h4_mode, dueling=cfg.dueling)
        need_w = params.h2_mode == "affinity"
        self.problems = [Problem(inst, env_cfg, cfg.normalize, need_w) for inst in dataset]
        self.state = TrainerState(
            params=params,
            target=params.copy(),
            memory=ReplayMemory(cfg.capacity, cfg.alpha if cfg.prioritized else 0.0),
            rng=np.random.default_rng(cfg.rng_seed),
        )

    # -- learning -----------------------------------------------------------

    def _batch_inputs(self, batch: list[Transition]):
        s, s2 = [], []
        for t in batch:
            prob = self.problems[t.instance_ref]
            s.append(prob.net_input(t.state, prob.shift_for(t.state)))
            s2.append(prob.net_input(t.next_state, prob.shift_for(t.next_state)))
        return NetInput.stack(s), NetInput.stack(s2)

    def learn(self) -> float:
        st, cfg = self.state, self.cfg
        handles, batch = st.memory.sample(cfg.batch_size, st.rng)
        B = len(batch)
        # association graphs of different sizes cannot share a tensor; split by shape
        groups: dict[tuple[int, int], list[int]] = {}
        for j, t in enumerate(batch):
            K = self.problems[t.instance_ref].inst.K
            groups.setdefault((K.n1, K.n2), []).append(j)
        q_sa = np.empty(B)
        targets = np.empty(B)
        passes = []
        for rows in groups.values():
            sub = [batch[j] for j in rows]
            inp, inp2 = self._batch_inputs(sub)
            q, cache = forward(inp, st.params, keep_cache=True)
            q2_target, _ = forward(inp2, st.target)
            q2_online = forward(inp2, st.params)[0] if cfg.double else q2_target
            targets[rows] = td_targets([t.reward for t in sub], [t.done for t in sub],
                                       np.stack([t.next_legal for t in sub]), q2_online, q2_target,
                                       cfg.gamma, cfg.double)
            actions = np.array([t.action for t in sub])
            q_sa[rows] = q[np.arange(len(sub)), actions]
            passes.append((rows, actions, q.shape, cache))
        td = targets - q_sa
        weights = st.memory.is_weights(handles, cfg.is_beta) if cfg.is_beta > 0 else np.ones(B)
        loss = float(np.mean(weights * td**2))
        grads = None
        for rows, actions, shape, cache in passes:
            gQ = np.zeros(shape)
            gQ[np.arange(len(rows)), actions] = -2.0 * weights[rows] * td[rows] / B
            g = backward(gQ, cache, st.params)
            grads = g if grads is None else grads.map(np.add, g)
        norm = grads.global_norm()
        if cfg.grad_clip and norm > cfg.grad_clip:
            st.clip_events += 1
            log.debug("clipping gradient norm %.3g", norm)
            grads = grads.map(lambda g: g * (cfg.grad_clip / norm))
        if cfg.optimizer == "adam":
            st.params, st.opt_state = adam_step(st.params, grads, cfg.lr, st.opt_state)
        else:
            st.params = sgd_step(st.params, grads, cfg.lr)
        for h, e in zip(handles, td):
            st.memory.update(h, e)
        return loss

    # -- episodes -----------------------------------------------------------

    def run_episode(self) -> dict:
        st, cfg = self.state, self.cfg
        eps = epsilon(st.episode, cfg)
        ref = int(st.rng.integers(len(self.problems)))
        prob = self.problems[ref]
        env = prob.env
        state = env.reset()
        losses = []
        learn_start = cfg.batch_size if cfg.learn_start is None else cfg.learn_start
        while not state.done:
            a = select_action(prob, state, st.params, eps, st.rng, train=True)
            if a is None:
                break
            nxt, reward = env.step(state, a)
            st.memory.push(Transition(
                state.solution.indicator().astype(np.uint8), a, reward,
                nxt.solution.indicator().astype(np.uint8), nxt.done, ref, env.legal_mask(nxt),
            ))
            st.cnt += 1
            if st.cnt % cfg.update_every == 0 and len(st.memory) >= learn_start:
                losses.append(self.learn())
            if st.cnt % cfg.target_sync_every == 0:
                st.target = st.params.copy()
            state = nxt
        gt = prob.inst.gt
        row = {
            "episode": st.episode,
            "epsilon": eps,
            "loss": float(np.mean(losses)) if losses else math.nan,
            "raw_score": state.raw_score,
            "reg_score": state.reg_score,
            "f1": f1_metrics(state.solution, gt)[2] if gt is not None else math.nan,
            "size": len(state.solution),
            "steps": state.step_count,
        }
        st.log.append(row)
        st.episode += 1
        return row

    def train(self, episodes: int | None = None, callback=None) -> TrainerState:
        """Run until ``episodes`` total episodes (default ``cfg.episodes``) have completed."""
        total = self.cfg.episodes if episodes is None else episodes
        while self.state.episode < total:
            row = self.run_episode()
            if callback is not None:
                callback(row)
        return self.state

    # -- persistence --------------------------------------------------------

    def save(self, ckpt_path):
        """Write the parameter checkpoint plus a ``.state`` sidecar for exact resume."""
        ckpt_path = Path(ckpt_path)
        save_params(ckpt_path, self.state.params)
        with open(sidecar_path(ckpt_path), "wb") as fh:
            pickle.dump({"state": self.state, "cfg": self.cfg, "env_cfg": self.env_cfg}, fh)

    def restore(self, ckpt_path):
        ckpt_path = Path(ckpt_path)
        with open(sidecar_path(ckpt_path), "rb") as fh:
            blob = pickle.load(fh)
        state: TrainerState = blob["state"]
        # the text checkpoint is authoritative for the online parameters
        state.params = load_params(ckpt_path)
        self.state = state


def sidecar_path(ckpt_path) -> Path:
    ckpt_path = Path(ckpt_path)
    return ckpt_path.with_name(ckpt_path.name + ".state")


def train(dataset: Sequence[Instance], cfg: TrainConfig, env_cfg: EnvConfig,
          params: QNetParams | None = None, callback=None):
    """Train from scratch; returns ``(params, log rows)``."""
    trainer = Trainer(dataset, cfg, env_cfg, params)
    state = trainer.train(callback=callback)
    return state.params, state.log


def solve(inst: Instance | AffinityMatrix, params: QNetParams, env_cfg: EnvConfig,
          stop_rule: str = "qplateau", normalize: bool = True) -> MatchResult:
    """Greedy rollout returning the best solution seen.

    Without an inlier count the rollout stops once no legal action has a
    positive Q-value (after at least one pair is matched) or at the step
    budget. With an inlier count the answer always has exactly that many
    pairs; if the budget runs out first the final state is completed greedily
    over conflict-free vertices.
    """
    if stop_rule not in ("qplateau", "budget"):
        raise ContractError(f"unknown stop rule {stop_rule!r}")
    t0 = time.perf_counter()
    problem = Problem(inst, env_cfg, normalize, need_w=params.h2_mode == "affinity")
    env = problem.env
    state = env.reset()
    while not state.done:
        legal = env.legal_mask(state)
        if not legal.any():
            break
        Q = np.where(legal, q_values(problem, state, params), -np.inf)
        a = int(np.argmax(Q))
        if (stop_rule == "qplateau" and env_cfg.inlier_count is None
                and Q[a] <= 0 and len(state.solution) >= 1):
            break
        state, _ = env.step(state, a)
    steps = state.step_count
    best = state.best_solution
    if best is None:
        best = _complete(problem, state, params)
    K = problem.inst.K
    raw = objective_score(K, best)
    reg = None
    if env_cfg.use_regularization:
        reg = raw * reg_fn_eval(env.reg_fn, len(best)) if len(best) else 0.0
    return MatchResult(best, raw, reg, steps, time.perf_counter() - t0)


def _complete(problem: Problem, state: EnvState, params: QNetParams) -> PartialSolution:
    basic = MatchingEnv(problem.env.K, replace(problem.env.cfg, revocable=False, seeds=(),
                                               max_steps=problem.env.size + 1))
    cur = basic._make_state(state.solution, 0, None)
    target = problem.env.cfg.inlier_count
    while len(cur.solution) < target:
        legal = basic.legal_mask(cur)
        Q = np.where(legal, q_values(problem, cur, params), -np.inf)
        cur, _ = basic.step(cur, int(np.argmax(Q)))
    return cur.solution


def random_policy_scores(inst: Instance | AffinityMatrix, env_cfg: EnvConfig, episodes: int,
                         rng_seed: int = 0) -> np.ndarray:
    """Final raw scores of uniformly random legal rollouts, for learning sanity checks."""
    problem = Problem(inst, env_cfg)
    env = problem.env
    rng = np.random.default_rng(rng_seed)
    out = np.empty(episodes)
    for e in range(episodes):
        state = env.reset()
        while not state.done:
            legal = np.flatnonzero(env.legal_mask(state))
            if not len(legal):
                break
            state, _ = env.step(state, int(rng.choice(legal)))
        out[e] = state.raw_score
    return out


def default_reg_fn(K: AffinityMatrix, env_cfg: EnvConfig) -> RegFn:
    return RegFn(env_cfg.reg_fn, K.n1, K.n2)
