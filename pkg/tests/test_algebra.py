import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import clause, naive_opt, random_instance
from robustcsp.algebra import (
    OperationTable,
    binarize,
    binarize_unary,
    boolean_majority,
    classify_01all,
    dual_discriminator,
    find_majority,
    is_2decomposable,
    is_nu,
    permutation_relation,
    preserves,
    profile_language,
    projection,
    subuniverse_closure,
)
from robustcsp.core import Constraint, CSPError, Instance, Relation, evaluate, opt_bruteforce

CYCLE = Relation.from_tuples([(1, 0), (2, 1), (0, 2)], 3)
XOR3 = Relation.from_tuples([t for t in itertools.product(range(2), repeat=3) if sum(t) % 2 == 0], 2)


def brute_preserves(f, R):
    for rows in itertools.product(sorted(R.tuples), repeat=f.arity):
        image = tuple(f(*(row[i] for row in rows)) for i in range(R.arity))
        if image not in R.tuples:
            return False
    return True


def test_dual_discriminator_values():
    f = dual_discriminator(3)
    assert f(0, 1, 2) == 0
    assert f(1, 1, 2) == 1
    assert f(2, 1, 2) == 2
    assert is_nu(f)


def test_preserves_examples():
    f = dual_discriminator(3)
    assert preserves(f, CYCLE)
    bad = Relation.from_tuples([(0, 0), (1, 1), (2, 2), (0, 1), (1, 2), (2, 0)], 3)
    assert not preserves(f, bad)
    assert not brute_preserves(f, bad)
    proj = projection(3, 3)
    rng = np.random.default_rng(0)
    for _ in range(20):
        R = Relation.from_matrix(rng.random((3, 3)) < 0.5)
        assert preserves(proj, R)


def test_is_nu_examples():
    assert is_nu(boolean_majority())
    assert not is_nu(projection(2, 3))
    with pytest.raises(CSPError):
        is_nu(projection(2, 2))


def test_classify_examples():
    assert classify_01all(Relation.from_tuples([(0, 0), (0, 1), (1, 0)], 2)).kind == "type1"
    shape = classify_01all(Relation.from_tuples([(0, 0), (0, 1), (1, 0)], 2))
    assert (shape.a, shape.b) == (0, 0)
    shape = classify_01all(CYCLE)
    assert shape.kind == "type2"
    assert Relation.from_tuples([(shape.perm[a], a) for a in range(3)], 3) == CYCLE
    shape = classify_01all(Relation.full(3))
    assert shape.kind == "type3" and shape.P == shape.Q == frozenset(range(3))


def test_classify_type4_and_none():
    # fan {(0, *)} u {(*, 0)} cut to {0, 1} x {0, 1}
    R = Relation.from_tuples([(0, 0), (0, 1), (1, 0)], 3)
    assert classify_01all(R).kind == "type4"
    assert classify_01all(Relation.from_tuples([(0, 0), (1, 1), (0, 1), (1, 2)], 3)) is None


@pytest.mark.parametrize("d", [2, 3])
def test_classifier_matches_dual_discriminator_exhaustively(d):
    f = dual_discriminator(d)
    cells = [(a, b) for a in range(d) for b in range(d)]
    mismatches = 0
    for bits in range(2 ** len(cells)):
        R = Relation(2, frozenset(t for i, t in enumerate(cells) if bits >> i & 1), d)
        mismatches += (classify_01all(R) is not None) != preserves(f, R)
    assert mismatches == 0


def test_preserves_agrees_with_plain_loop():
    rng = np.random.default_rng(1)
    f = dual_discriminator(3)
    for _ in range(60):
        R = Relation.from_matrix(rng.random((3, 3)) < 0.5)
        assert preserves(f, R) == brute_preserves(f, R)


def test_2decomposable():
    assert is_2decomposable(CYCLE)
    assert not is_2decomposable(XOR3)
    prod = Relation.from_tuples(itertools.product([0, 1], [1], [0, 2]), 3)
    assert is_2decomposable(prod)


def test_find_majority_examples():
    cells = [(a, b) for a in range(2) for b in range(2)]
    all_binary = [Relation(2, frozenset(t for i, t in enumerate(cells) if bits >> i & 1), 2) for bits in range(16)]
    m = find_majority(all_binary)
    assert m == boolean_majority()
    assert find_majority([XOR3]) is None
    empty = find_majority([], size=3)
    assert empty is not None and is_nu(empty)


def test_find_majority_result_is_a_polymorphism():
    rng = np.random.default_rng(2)
    for _ in range(15):
        lang = [Relation.from_matrix(rng.random((3, 3)) < 0.6) for _ in range(2)]
        m = find_majority(lang)
        if m is not None:
            assert is_nu(m)
            assert all(brute_preserves(m, R) for R in lang)


def test_find_majority_cap():
    with pytest.raises(CSPError):
        find_majority([Relation.full(5)])


def test_profile_flags():
    cells = [(a, b) for a in range(2) for b in range(2)]
    all_binary = [Relation(2, frozenset(t for i, t in enumerate(cells) if bits >> i & 1), 2) for bits in range(16)]
    prof = profile_language(all_binary, 2)
    assert prof.has_majority and prof.has_dual_discriminator and prof.has_nu == 3
    prof = profile_language([XOR3], 2)
    assert not prof.has_majority and prof.has_nu is None
    prof = profile_language([], 3)
    assert prof.has_majority and prof.has_dual_discriminator


def test_subuniverse_examples():
    f = dual_discriminator(3)
    assert subuniverse_closure(range(3), [f]) == frozenset(range(3))
    assert subuniverse_closure([1], [f, boolean_majority()]) == frozenset([1])
    assert subuniverse_closure([0, 1], [f]) == frozenset([0, 1])
    # x - y + z mod 3 generates everything from two points
    affine = OperationTable.from_function(lambda x, y, z: (x - y + z) % 3, 3, 3)
    assert subuniverse_closure([0, 1], [affine]) == frozenset(range(3))


@settings(max_examples=40, deadline=None)
@given(st.frozensets(st.integers(0, 3)), st.frozensets(st.integers(0, 3)), st.integers(0, 2**16))
def test_subuniverse_properties(S, T, seed):
    rng = np.random.default_rng(seed)
    f = OperationTable(3, rng.integers(0, 4, size=(4, 4, 4)))
    cS = subuniverse_closure(S, [f])
    assert S <= cS
    assert subuniverse_closure(cS, [f]) == cS
    assert cS <= subuniverse_closure(S | T, [f])


def test_binarize_unary_diagonal():
    inst = Instance(3, 1, (Constraint((0,), Relation.unary([0, 2], 3), 1.0),))
    out = binarize_unary(inst)
    c = out.constraints[0]
    assert c.scope == (0, 0)
    assert c.relation.tuples == {(0, 0), (2, 2)}


def test_binarize_binary_instance_keeps_opt():
    inst = random_instance(np.random.default_rng(4), 3, 2, 5, unary_rate=0.3)
    out, bmap = binarize(inst)
    assert out.m == inst.m
    assert opt_bruteforce(out)[0] == pytest.approx(opt_bruteforce(inst)[0])


def test_binarize_ternary_keeps_opt_and_lifts():
    R = Relation.from_tuples([(0, 1, 1), (1, 0, 1), (1, 1, 0)], 2)
    inst = Instance(2, 3, (Constraint((0, 1, 2), R, 0.5), Constraint((0, 1), clause(1, 1), 0.5)))
    out, bmap = binarize(inst)
    assert out.domain_size == 8 and out.is_binary()
    assert opt_bruteforce(out)[0] == pytest.approx(naive_opt(inst))
    for s in itertools.product(range(2), repeat=3):
        lifted = bmap.lift(s)
        assert evaluate(out, lifted) == pytest.approx(evaluate(inst, s))
        assert list(bmap.to_original(lifted)) == list(s)


def test_binarize_never_lowers_opt():
    rng = np.random.default_rng(6)
    for _ in range(5):
        cs = []
        for _ in range(3):
            scope = tuple(int(v) for v in rng.choice(3, size=3, replace=False))
            mask = rng.random(8) < 0.5
            mask[0] = True
            R = Relation(3, frozenset(t for i, t in enumerate(itertools.product(range(2), repeat=3)) if mask[i]), 2)
            cs.append(Constraint(scope, R, 1 / 3))
        inst = Instance(2, 3, tuple(cs))
        out, _ = binarize(inst)
        assert opt_bruteforce(out)[0] >= naive_opt(inst) - 1e-12


def test_operation_table_round_trip():
    f = dual_discriminator(3)
    assert OperationTable.from_list(f.to_list(), 3, 3) == f
    assert permutation_relation([1, 2, 0]) == CYCLE
