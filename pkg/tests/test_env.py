import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from revmatch.core import ContractError, PartialSolution, objective_score
from revmatch.env import ConfigurationError, EnvConfig, IllegalActionError, MatchingEnv
from revmatch.regularizer import RegFn, RegKind, regularized_objective

from helpers import random_K


def v(label):
    """'2b' -> vertex of node 2 in G1 and node b in G2 on a 3x3 problem."""
    return (int(label[0]) - 1) * 3 + "abc".index(label[1])


def state_with(env, labels):
    return env._make_state(PartialSolution(3, 3, [v(s) for s in labels]), 0, None)


@pytest.fixture
def K33():
    return random_K(np.random.default_rng(5), 3, 3)


def test_available_set_masks_row_and_column(K33):
    env = MatchingEnv(K33, EnvConfig(revocable=False))
    st_ = state_with(env, ["1a"])
    avail = set(env.available_set(st_).tolist())
    assert avail == {v("2b"), v("2c"), v("3b"), v("3c")}
    assert not avail & {v("1b"), v("1c"), v("2a"), v("3a")}
    assert set(env.available_set(env.reset()).tolist()) == set(range(9))
    full = state_with(env, ["1a", "2b", "3c"])
    assert len(env.available_set(full)) == 0


def test_revocable_single_revocation(K33):
    env = MatchingEnv(K33, EnvConfig(revocable=True))
    s, _ = env.step(state_with(env, ["1a", "2c"]), v("2b"))
    assert s.solution == PartialSolution(3, 3, [v("1a"), v("2b")])


def test_revocable_double_revocation(K33):
    env = MatchingEnv(K33, EnvConfig(revocable=True))
    s, _ = env.step(state_with(env, ["1a", "2c", "3b"]), v("2b"))
    assert s.solution == PartialSolution(3, 3, [v("1a"), v("2b")])


def test_reselect_is_noop(K33):
    env = MatchingEnv(K33, EnvConfig(revocable=True))
    s0 = state_with(env, ["1a", "2c"])
    s1, r = env.step(s0, v("2c"))
    assert s1.solution == s0.solution and r == 0.0


def test_basic_mode_rejects_conflict(K33):
    env = MatchingEnv(K33, EnvConfig(revocable=False))
    with pytest.raises(IllegalActionError):
        env.step(state_with(env, ["1a"]), v("1b"))
    with pytest.raises(ContractError):
        env.step(env.reset(), 9)


def test_reset_and_seeds(K33):
    env = MatchingEnv(K33, EnvConfig())
    s = env.reset()
    assert len(s.solution) == 0 and s.raw_score == 0 and not s.done
    env = MatchingEnv(K33, EnvConfig(seeds=((0, 0),)))
    s = env.reset()
    assert s.solution == PartialSolution(3, 3, [0]) and s.raw_score == K33.k[0, 0]
    with pytest.raises(ConfigurationError):
        MatchingEnv(K33, EnvConfig(seeds=((0, 0), (0, 1))))
    with pytest.raises(ConfigurationError):
        MatchingEnv(K33, EnvConfig(inlier_count=4))


def test_seeds_are_not_displaced(K33):
    env = MatchingEnv(K33, EnvConfig(revocable=True, seeds=((0, 0),)))
    s = env.reset()
    legal = env.legal_mask(s)
    assert not legal[v("1b")] and not legal[v("2a")] and legal[v("1a")] and legal[v("2b")]
    with pytest.raises(IllegalActionError):
        env.step(s, v("1b"))
    s2, r = env.step(s, v("1a"))
    assert s2.solution == s.solution and r == 0.0


def test_terminal_rules(K33):
    env = MatchingEnv(random_K(np.random.default_rng(0), 10, 12), EnvConfig(inlier_count=10))
    U = PartialSolution(10, 12, [i * 12 + i for i in range(10)])
    assert env._make_state(U, 3, None).done
    env2 = MatchingEnv(random_K(np.random.default_rng(0), 10, 12), EnvConfig())
    assert not env2._make_state(U, 3, None).done
    assert env2._make_state(U, env2.max_steps, None).done
    assert env2.max_steps == 30
    assert MatchingEnv(K33, EnvConfig(revocable=False)).max_steps == 3


def test_basic_with_full_inlier_count_takes_exact_steps():
    K = random_K(np.random.default_rng(1), 4, 5)
    env = MatchingEnv(K, EnvConfig(revocable=False, inlier_count=4))
    s = env.reset()
    steps = 0
    rng = np.random.default_rng(0)
    while not s.done:
        s, _ = env.step(s, int(rng.choice(env.available_set(s))))
        steps += 1
    assert steps == 4


def rollout(env, rng, n_steps):
    s = env.reset()
    total = 0.0
    first = s
    for _ in range(n_steps):
        legal = np.flatnonzero(env.legal_mask(s))
        if not len(legal):
            break
        prev = len(s.solution)
        s, r = env.step(s, int(rng.choice(legal)))
        total += r
        assert len(s.solution) - prev in ((-1, 0, 1) if env.cfg.revocable else (1,))
        assert s.raw_score == pytest.approx(objective_score(env.K, s.solution), abs=1e-9)
    return first, s, total


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.booleans(), st.sampled_from(["max", "min"]))
def test_raw_reward_telescopes(seed, revocable, sense):
    rng = np.random.default_rng(seed)
    K = random_K(rng, 4, 5, sense=sense)
    env = MatchingEnv(K, EnvConfig(revocable=revocable, max_steps=15))
    first, last, total = rollout(env, rng, 15)
    assert total == pytest.approx(K.sense.sign * (last.raw_score - first.raw_score), abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(list(RegKind)))
def test_regularized_reward_telescopes(seed, kind):
    rng = np.random.default_rng(seed)
    K = random_K(rng, 4, 4, nonneg=True)
    cfg = EnvConfig(revocable=True, use_regularization=True, reg_fn=kind, max_steps=12, seeds=((1, 2),))
    env = MatchingEnv(K, cfg)
    first, last, total = rollout(env, rng, 12)
    f = RegFn(kind, 4, 4)
    expect = regularized_objective(K, last.solution, f) - regularized_objective(K, first.solution, f)
    assert total == pytest.approx(expect, abs=1e-9)


def test_best_solution_tracking():
    K = random_K(np.random.default_rng(2), 3, 3)
    env = MatchingEnv(K, EnvConfig(revocable=True, max_steps=20))
    rng = np.random.default_rng(3)
    s = env.reset()
    seen = [0.0]
    while not s.done:
        s, _ = env.step(s, int(rng.integers(9)))
        seen.append(s.raw_score)
    assert s.best_score == max(seen)
    assert objective_score(K, s.best_solution) == s.best_score


def test_khat_follows_state():
    K = random_K(np.random.default_rng(4), 3, 3, nonneg=True)
    env = MatchingEnv(K, EnvConfig(use_regularization=True, reg_fn="f3"))
    s, _ = env.step(env.reset(), 0)
    s, _ = env.step(s, 4)
    a_cx, b_cx = s.reg_shift
    kh = env.khat(s).k
    assert kh[1, 2] == pytest.approx(K.k[1, 2] - a_cx)
    assert kh[3, 3] == pytest.approx(K.k[3, 3] - a_cx - b_cx)
    plain = MatchingEnv(K, EnvConfig())
    assert plain.khat(plain.step(plain.reset(), 0)[0]) is K


def test_step_is_pure(K33):
    env = MatchingEnv(K33, EnvConfig())
    s = state_with(env, ["1a", "2c"])
    a, ra = env.step(s, v("3b"))
    b, rb = env.step(s, v("3b"))
    assert a == b and ra == rb
    assert s.solution == PartialSolution(3, 3, [v("1a"), v("2c")])
