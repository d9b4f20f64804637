import itertools
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from revmatch.core import AffinityMatrix, PartialSolution, Sense, objective_score
from revmatch.instances import (ChecksumError, DimensionMismatchError, HeaderError, InstanceParseError,
                                InvalidInstanceError, KBInstance, SyntheticSpec, dumps_affinity, format_qaplib,
                                gen_synthetic, kb_objective, kb_to_lawler, load_instance, loads_affinity,
                                parse_qaplib, point_sets, read_affinity, read_qaplib, write_affinity)
from revmatch.oracle import brute_force

from helpers import random_K

DATA = Path(__file__).parent / "data" / "qaplib"


def perm_solution(perm):
    n = len(perm)
    return PartialSolution.from_pairs(n, n, enumerate(perm))


def test_parse_qaplib_basic():
    kb = parse_qaplib("2  0 1 1 0  0 2 2 0")
    assert kb.n == 2
    np.testing.assert_array_equal(kb.flow, [[0, 1], [1, 0]])
    np.testing.assert_array_equal(kb.dist, [[0, 2], [2, 0]])


def test_kb_objective_examples():
    kb = parse_qaplib("2  0 1 4 0  0 2 3 0")
    assert kb_objective(kb, [0, 1]) == 14
    assert kb_objective(kb, [1, 0]) == 11
    assert min(kb_objective(kb, p) for p in itertools.permutations(range(2))) == 11
    K = kb_to_lawler(kb)
    assert K.sense is Sense.MINIMIZE
    assert objective_score(K, perm_solution([0, 1])) == 14


def test_parse_qaplib_trailing_comment_and_whitespace():
    kb = parse_qaplib("2\n0 1\n1 0\n\n0 2\n2 0\n   \n# optimum 4\n")
    assert kb.n == 2


def test_parse_qaplib_errors():
    with pytest.raises(InstanceParseError) as err:
        parse_qaplib("2  0 1 1 0  0 2 2")
    assert err.value.offset == len("2  0 1 1 0  0 2 2")
    with pytest.raises(InstanceParseError) as err:
        parse_qaplib("2  0 1 1 0  0 2 2 0 7")
    assert err.value.offset == len("2  0 1 1 0  0 2 2 0 ")
    with pytest.raises(InstanceParseError) as err:
        parse_qaplib("2  0 x 1 0  0 2 2 0")
    assert err.value.offset == 5
    with pytest.raises(InvalidInstanceError):
        parse_qaplib("1 0 0")
    with pytest.raises(InstanceParseError):
        parse_qaplib("   ")


def test_zero_flow_gives_zero_K():
    kb = KBInstance(3, np.zeros((3, 3)), np.ones((3, 3)))
    K = kb_to_lawler(kb)
    assert not K.k.any()


@pytest.mark.parametrize("n", [3, 4, 5])
def test_lawler_matches_kb_exhaustively(n):
    rng = np.random.default_rng(n)
    kb = KBInstance(n, rng.integers(0, 10, (n, n)).astype(float), rng.integers(0, 10, (n, n)).astype(float))
    # round-trip through the text format too
    kb2 = parse_qaplib(format_qaplib(kb))
    np.testing.assert_array_equal(kb2.flow, kb.flow)
    np.testing.assert_array_equal(kb2.dist, kb.dist)
    K = kb_to_lawler(kb2)
    for perm in itertools.permutations(range(n)):
        assert objective_score(K, perm_solution(perm)) == pytest.approx(kb_objective(kb, perm), abs=1e-9)


def test_lawler_matches_kb_sampled_large():
    rng = np.random.default_rng(9)
    n = 9
    kb = KBInstance(n, rng.uniform(0, 5, (n, n)), rng.uniform(0, 5, (n, n)))
    K = kb_to_lawler(kb)
    for _ in range(50):
        perm = rng.permutation(n)
        assert objective_score(K, perm_solution(perm)) == pytest.approx(kb_objective(kb, perm), rel=1e-12)


def test_vendored_chr12c():
    kb = read_qaplib(DATA / "chr12c.dat")
    assert kb.n == 12
    assert kb.known_optimal == 11156
    perm = [int(t) - 1 for t in (DATA / "chr12c.sln").read_text().split()[2:]]
    assert kb_objective(kb, perm) == 11156
    inst = load_instance(DATA / "chr12c.dat")
    assert objective_score(inst.K, perm_solution(perm)) == pytest.approx(11156)
    assert inst.optimal == 11156


def test_opt_sidecar(tmp_path):
    (tmp_path / "toy.dat").write_text("2  0 1 4 0  0 2 3 0\n")
    (tmp_path / "toy.opt").write_text("11\n")
    assert read_qaplib(tmp_path / "toy.dat").known_optimal == 11


def test_synthetic_zero_noise_identical_up_to_shuffle():
    spec = SyntheticSpec(10, rng_seed=4)
    p1, p2, pairs = point_sets(spec)
    for i, a in pairs:
        np.testing.assert_array_equal(p1[i], p2[a])
    K, gt = gen_synthetic(spec)
    assert len(gt) == 10
    # every gt edge has identical lengths, so its affinity is exp(0)
    idx = np.array(sorted(gt.selected))
    sub = K.k[np.ix_(idx, idx)]
    assert np.all(sub[~np.eye(10, dtype=bool)] == 1.0)
    assert np.all(np.diag(K.k) == 0.0)


@pytest.mark.parametrize("n", [3, 4, 5, 6])
def test_synthetic_gt_is_brute_force_optimum(n):
    K, gt = gen_synthetic(SyntheticSpec(n, rng_seed=100 + n))
    _, best = brute_force(K, cardinality=n)
    assert objective_score(K, gt) == pytest.approx(best, abs=1e-12)


def test_synthetic_determinism_and_bounds():
    spec = SyntheticSpec(6, 2, 3, 0.5, rng_seed=8)
    K1, gt1 = gen_synthetic(spec)
    K2, gt2 = gen_synthetic(spec)
    assert K1 == K2 and gt1 == gt2
    assert (K1.n1, K1.n2) == (8, 9)
    np.testing.assert_array_equal(K1.k, K1.k.T)
    p1, p2, _ = point_sets(spec)
    for p in (p1, p2):
        assert p.min() >= 0.0 and p.max() <= 1.5


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.0, 0.5))
def test_synthetic_coordinates_bounded(seed, ds):
    p1, p2, _ = point_sets(SyntheticSpec(5, 1, 1, ds, rng_seed=seed))
    assert p2.max() <= 1.5 and p1.max() <= 1.0 and min(p1.min(), p2.min()) >= 0


def test_synthetic_spec_validation():
    from revmatch.core import ContractError
    with pytest.raises(ContractError):
        SyntheticSpec(5, delta_s=-0.1)
    with pytest.raises(ContractError):
        SyntheticSpec(5, sigma1=0.0)
    with pytest.raises(ContractError):
        SyntheticSpec(0)


def test_global_scale_mode():
    spec = SyntheticSpec(6, delta_s=0.3, rng_seed=1, scale_mode="global")
    p1, p2, pairs = point_sets(spec)
    ratios = [p2[a] / p1[i] for i, a in pairs]
    np.testing.assert_allclose(ratios, ratios[0][0])


def test_aff1_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    K = random_K(rng, 4, 4)
    gt = PartialSolution(4, 4, [0, 5, 10, 15])
    write_affinity(tmp_path / "a.aff", K, gt, {"name": "x"})
    K2, gt2, meta = read_affinity(tmp_path / "a.aff")
    assert K2 == K
    assert gt2 == gt
    assert meta == {"name": "x"}
    # negatives and awkward doubles survive bit-exactly
    k = np.array([[-1e-300, np.pi], [np.pi, -7.0]])
    K3, gt3, _ = loads_affinity(dumps_affinity(AffinityMatrix(1, 2, k, "min")))
    assert np.array_equal(K3.k, k) and K3.sense is Sense.MINIMIZE and gt3 is None


def test_aff1_errors():
    text = dumps_affinity(AffinityMatrix(1, 2, np.eye(2)))
    with pytest.raises(ChecksumError):
        loads_affinity(text.replace("1.0", "2.0", 1))
    with pytest.raises(ChecksumError):
        loads_affinity(text.rsplit("CRC", 1)[0])

    def resign(body):
        import zlib
        return body + f"CRC {zlib.crc32(body.encode()) & 0xFFFFFFFF:08x}\n"

    with pytest.raises(HeaderError):
        loads_affinity(resign("AFF2 1 2 0 max\n1 0\n0 1\n"))
    with pytest.raises(DimensionMismatchError):
        loads_affinity(resign("AFF1 2 2 0 max\n1 0\n0 1\n"))
    with pytest.raises(DimensionMismatchError):
        loads_affinity(resign("AFF1 1 2 0 max\n1 0\n0 1\n0 0\n"))
