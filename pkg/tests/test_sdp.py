import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import chain_unsat, clause, contradictory_2sat, random_instance, ug_contradiction
from robustcsp.core import Constraint, CSPError, Instance, Relation, evaluate, generate_planted
from robustcsp.sdp import (
    TAU,
    SdpSolution,
    build_relaxation,
    loss,
    objective,
    preprocess1,
    solution_from_dict,
    solution_to_dict,
    solve,
    solve_instance,
    validate_feasibility,
)

# SDPOpt values from an independent full-Gram SCS solve, frozen. The first two
# also follow by hand: the pair products of two variables always sum to 1.
FROZEN_SDPOPT = {"contradictory_2sat": 0.25, "ug_contradiction": 0.5, "chain_unsat": 0.25}

LANG_2SAT = [clause(a, b) for a in range(2) for b in range(2)]


def test_dimension():
    inst = Instance(2, 2, (Constraint((0, 1), clause(0, 0), 1.0),))
    assert build_relaxation(inst).dim == 5


def test_relaxation_rejects_ternary():
    R = Relation.full(2, 3)
    with pytest.raises(CSPError):
        build_relaxation(Instance(2, 3, (Constraint((0, 1, 2), R, 1.0),)))


def test_objective_terms_are_the_excluded_pairs():
    inst = contradictory_2sat()
    prob = build_relaxation(inst)
    for (ci, scope, pairs), c in zip(prob.terms, inst.constraints):
        assert set(pairs) == {(a, b) for a in range(2) for b in range(2)} - set(c.relation.tuples)


def test_integral_solution_is_feasible_and_scores_unsatisfied_weight():
    rng = np.random.default_rng(0)
    inst = random_instance(rng, 4, 3, 8, unary_rate=0.3)
    for _ in range(5):
        s = rng.integers(0, 3, size=4)
        sol = SdpSolution.from_assignment(inst, s)
        assert sol.objective_value == pytest.approx(1 - evaluate(inst, s))
        rep = validate_feasibility(sol)
        assert max(rep.values()) == 0.0
        for c in inst.constraints:
            assert loss(c, sol) == (0.0 if c.satisfied_by(s) else 1.0)


@pytest.mark.parametrize("make", [contradictory_2sat, ug_contradiction, chain_unsat])
def test_frozen_sdp_values(make):
    sol = solve_instance(make(), delta=1e-6)
    assert sol.objective_value == pytest.approx(FROZEN_SDPOPT[make.__name__], abs=1e-5)
    assert validate_feasibility(sol, TAU)["ok"]


def test_contradictory_2sat_within_delta():
    sol = solve_instance(contradictory_2sat(), delta=1e-3)
    assert sol.objective_value <= 0.25 + 1e-3


def test_satisfiable_instance_reaches_zero():
    inst, _ = generate_planted(LANG_2SAT, 8, 30, 0.0, seed=4)
    delta = 1 / 30**2
    sol = solve_instance(inst, delta)
    assert -TAU <= sol.objective_value <= delta


def test_solver_output_on_random_instances():
    rng = np.random.default_rng(7)
    for _ in range(20):
        inst = random_instance(rng, int(rng.integers(2, 6)), int(rng.integers(2, 4)), int(rng.integers(2, 9)))
        sol = solve_instance(inst)
        rep = validate_feasibility(sol, TAU)
        assert rep["ok"], rep
        assert sol.objective_value >= -TAU
        total = sum(c.weight * loss(c, sol) for c in inst.constraints)
        assert total == pytest.approx(sol.objective_value, abs=1e-6)
        for c in inst.constraints:
            assert -TAU <= loss(c, sol) <= 1 + TAU


def test_corrupted_v0_is_flagged():
    inst = contradictory_2sat()
    sol = SdpSolution.from_assignment(inst, [0, 1])
    bad = SdpSolution(sol.vectors, 2 * sol.v0)
    rep = validate_feasibility(bad, TAU)
    assert rep["unit_v0"] == pytest.approx(1.0)
    assert not rep["ok"]


def test_delta_must_be_positive():
    with pytest.raises(ValueError):
        solve(build_relaxation(contradictory_2sat()), delta=0.0)


def test_subset_identities_on_solver_output():
    inst = random_instance(np.random.default_rng(11), 3, 3, 6)
    sol = solve_instance(inst)
    d = 3
    subsets = [frozenset(a for a in range(d) if bits >> a & 1) for bits in range(2**d)]
    D = frozenset(range(d))
    for x in range(3):
        for y in range(3):
            if x == y:
                continue
            for A in subsets:
                xA = sol.subset_vector(x, A)
                assert xA @ xA == pytest.approx(xA @ sol.subset_vector(y, D), abs=TAU)
                for B in subsets:
                    yB = sol.subset_vector(y, B)
                    lhs = (yB - xA) @ (yB - xA)
                    rhs = sol.subset_vector(x, D - A) @ yB + xA @ sol.subset_vector(y, D - B)
                    assert lhs == pytest.approx(rhs, abs=TAU)


def test_solution_json_round_trip():
    sol = solve_instance(contradictory_2sat())
    back = solution_from_dict(solution_to_dict(sol))
    assert np.allclose(back.vectors, sol.vectors) and np.allclose(back.v0, sol.v0)
    assert objective(contradictory_2sat(), back) == pytest.approx(sol.objective_value)


def test_preprocess1_satisfiable():
    inst, _ = generate_planted(LANG_2SAT, 8, 20, 0.0, seed=1)
    res = preprocess1(inst)
    assert not res.passed_through
    assert evaluate(inst, res.assignment) == pytest.approx(1.0)
    assert res.prefix_length == inst.m


def test_preprocess1_boundary_case():
    # prefix of three clauses is satisfiable and weighs exactly 1 - 1/4
    res = preprocess1(contradictory_2sat())
    assert res.prefix_length == 3
    assert res.prefix_weight == pytest.approx(0.75)
    assert not res.passed_through
    assert evaluate(contradictory_2sat(), res.assignment) == pytest.approx(0.75)


def test_preprocess1_heavy_constraint():
    eq = Relation.from_tuples([(0, 0), (1, 1)], 2)
    neq = Relation.from_tuples([(0, 1), (1, 0)], 2)
    cs = [Constraint((0, 1), eq, 0.99)]
    cs += [Constraint((0, 1), neq, 0.01 / 9) for _ in range(9)]
    inst = Instance(2, 2, tuple(cs))
    res = preprocess1(inst)
    assert not res.passed_through
    assert evaluate(inst, res.assignment) >= 1 - 1 / 10


def test_preprocess1_passes_through():
    # eq, neq, eq, neq: only the first constraint fits, 0.25 < 1 - 1/4
    cs = ug_contradiction().constraints * 2
    inst = Instance(2, 2, tuple(Constraint(c.scope, c.relation, 0.25) for c in cs))
    res = preprocess1(inst)
    assert res.prefix_length == 1 and res.passed_through


def test_preprocess1_stable_tie_order():
    calls = []

    def solver(sub):
        calls.append(tuple(c.relation for c in sub.constraints))
        from robustcsp.consistency import exact_solve
        return exact_solve(sub)

    inst = ug_contradiction()
    preprocess1(inst, exact_solver=solver)
    longest = max(calls, key=len)
    assert longest == tuple(c.relation for c in inst.constraints)


def test_preprocess1_propagates_solver_errors():
    def broken(sub):
        raise RuntimeError("boom")

    with pytest.raises(RuntimeError):
        preprocess1(contradictory_2sat(), exact_solver=broken)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_sandwich_property(seed):
    from robustcsp.core import opt_bruteforce

    inst = random_instance(np.random.default_rng(seed), 3, 2, 5)
    delta = 1 / inst.m**2
    sol = solve_instance(inst, delta)
    opt = opt_bruteforce(inst)[0]
    assert -TAU <= sol.objective_value <= 1 - opt + delta + TAU
