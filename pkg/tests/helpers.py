"""Small independent oracles and fixtures shared by the tests.

Everything here is written with plain loops on purpose so it does not share
code paths with the library implementations it checks.
"""
from __future__ import annotations

import itertools

import numpy as np

from robustcsp.consistency import Edge, Pattern
from robustcsp.core import Constraint, Instance, Relation


def clause(a: int, b: int) -> Relation:
    """Boolean clause (x = a) or (y = b)."""
    return Relation.from_tuples([(x, y) for x in range(2) for y in range(2) if x == a or y == b], 2)


def contradictory_2sat() -> Instance:
    rels = [clause(a, b) for a in (1, 0) for b in (1, 0)]
    return Instance(2, 2, tuple(Constraint((0, 1), r, 0.25) for r in rels))


def ug_contradiction() -> Instance:
    eq = Relation.from_tuples([(0, 0), (1, 1)], 2)
    neq = Relation.from_tuples([(0, 1), (1, 0)], 2)
    return Instance(2, 2, (Constraint((0, 1), eq, 0.5), Constraint((0, 1), neq, 0.5)))


def chain_unsat() -> Instance:
    """{x = y, y = z, x != z} on {0, 1}: arc consistent but unsatisfiable."""
    eq = Relation.from_tuples([(0, 0), (1, 1)], 2)
    neq = Relation.from_tuples([(0, 1), (1, 0)], 2)
    cs = (Constraint((0, 1), eq, 1 / 3), Constraint((1, 2), eq, 1 / 3), Constraint((0, 2), neq, 1 / 3))
    return Instance(2, 3, cs)


def naive_value(instance: Instance, s) -> float:
    total = 0.0
    for c in instance.constraints:
        if tuple(int(s[v]) for v in c.scope) in c.relation.tuples:
            total += c.weight
    return total


def naive_opt(instance: Instance) -> float:
    best = 0.0
    for s in itertools.product(range(instance.domain_size), repeat=instance.num_vars):
        best = max(best, naive_value(instance, s))
    return best


def naive_satisfiable(instance: Instance) -> bool:
    total = sum(c.weight for c in instance.constraints)
    return any(
        all(tuple(s[v] for v in c.scope) in c.relation.tuples for c in instance.constraints)
        for s in itertools.product(range(instance.domain_size), repeat=instance.num_vars)
    ) if instance.constraints else total == 0


def random_instance(rng, num_vars: int, d: int, m: int, unary_rate: float = 0.1) -> Instance:
    cs = []
    for _ in range(m):
        if rng.random() < unary_rate:
            x = int(rng.integers(num_vars))
            vals = [a for a in range(d) if rng.random() < 0.5] or [0]
            cs.append(Constraint((x,), Relation.unary(vals, d), float(rng.uniform(0.2, 1.0))))
            continue
        x, y = (int(v) for v in rng.choice(num_vars, size=2, replace=False))
        mask = rng.random((d, d)) < 0.6
        if not mask.any():
            mask[0, 0] = True
        cs.append(Constraint((x, y), Relation.from_matrix(mask), float(rng.uniform(0.2, 1.0))))
    total = sum(c.weight for c in cs)
    return Instance(d, num_vars, tuple(Constraint(c.scope, c.relation, c.weight / total) for c in cs))


def integral_vectors(instance: Instance, s) -> tuple[np.ndarray, np.ndarray]:
    """Vectors of the integral SDP solution of ``s``: ``x_{s(x)} = v0``, rest zero."""
    dim = instance.num_vars * instance.domain_size + 1
    v0 = np.zeros(dim)
    v0[0] = 1.0
    vecs = np.zeros((instance.num_vars, instance.domain_size, dim))
    for x, a in enumerate(s):
        vecs[x, a] = v0
    return vecs, v0


def random_tree_pattern(rng, max_vertices=8, d=None, num_vars=3):
    d = d or int(rng.integers(2, 4))
    nv = int(rng.integers(1, max_vertices + 1))
    labels = tuple(int(v) for v in rng.integers(0, num_vars, size=nv))
    edges = []
    for v in range(1, nv):
        u = int(rng.integers(0, v))
        rel = Relation.from_matrix(rng.random((d, d)) < 0.45)
        if rng.random() < 0.5:
            edges.append(Edge(u, v, rel))
        else:
            edges.append(Edge(v, u, rel))
    begin, end = (int(v) for v in rng.integers(0, nv, size=2))
    return Pattern(labels, tuple(edges), begin, end), d


def naive_reachable_pairs(p: Pattern, d: int) -> set:
    """(begin value, end value) over every edge-respecting map of the vertices."""
    pairs = set()
    for values in itertools.product(range(d), repeat=p.num_vertices):
        if all((values[e.tail], values[e.head]) in e.relation.tuples for e in p.edges):
            pairs.add((values[p.begin], values[p.end]))
    return pairs
