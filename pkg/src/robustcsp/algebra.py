"""Polymorphisms of finite relations and the arity-reduction transform."""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .core import Constraint, CSPError, Instance, Relation

MAJORITY_SEARCH_CAP = 4


@dataclass(frozen=True, eq=False)
class OperationTable:
    """A total operation ``D^arity -> D`` stored as a dense array."""

    arity: int
    table: np.ndarray

    def __post_init__(self):
        table = np.asarray(self.table, dtype=np.int64)
        if table.ndim != self.arity or len(set(table.shape)) > 1:
            raise CSPError("operation table must have shape (d,) * arity")
        if table.size and (table.min() < 0 or table.max() >= table.shape[0]):
            raise CSPError("operation value outside the domain")
        table.setflags(write=False)
        object.__setattr__(self, "table", table)

    @property
    def size(self) -> int:
        return self.table.shape[0]

    @classmethod
    def from_function(cls, f: Callable[..., int], size: int, arity: int) -> "OperationTable":
        table = np.empty((size,) * arity, dtype=np.int64)
        for args in itertools.product(range(size), repeat=arity):
            table[args] = f(*args)
        return cls(arity, table)

    def __call__(self, *args) -> int:
        return int(self.table[tuple(args)])

    def __eq__(self, other) -> bool:
        return isinstance(other, OperationTable) and np.array_equal(self.table, other.table)

    def __hash__(self):
        return hash(self.table.tobytes())

    def to_list(self) -> list[int]:
        return self.table.ravel().tolist()

    @classmethod
    def from_list(cls, values: Sequence[int], size: int, arity: int) -> "OperationTable":
        return cls(arity, np.asarray(values, dtype=np.int64).reshape((size,) * arity))


def projection(size: int, arity: int, coord: int = 0) -> OperationTable:
    return OperationTable.from_function(lambda *xs: xs[coord], size, arity)


def dual_discriminator(size: int) -> OperationTable:
    def dd(x, y, z):
        if y == z and x != y:
            return y
        return x

    return OperationTable.from_function(dd, size, 3)


def boolean_majority() -> OperationTable:
    return OperationTable.from_function(lambda x, y, z: int(x + y + z >= 2), 2, 3)


def preserves(f: OperationTable, R: Relation) -> bool:
    """Whether ``f`` applied coordinatewise to any ``f.arity`` tuples of ``R`` lands in ``R``."""
    if not R.tuples:
        return True
    tuples = np.array(R.sorted_tuples(), dtype=np.int64)
    k = len(tuples)
    n = f.arity
    member = R.table
    if k**n <= 2_000_000:
        choice = np.indices((k,) * n).reshape(n, -1)
        args = tuples[choice]  # (n, combos, r)
        image = f.table[tuple(args[i] for i in range(n))]  # (combos, r)
        return bool(member[tuple(image.T)].all())
    for combo in itertools.product(range(k), repeat=n):
        rows = tuples[list(combo)]
        image = f.table[tuple(rows)]
        if not member[tuple(image)]:
            return False
    return True


def preserves_all(f: OperationTable, relations: Iterable[Relation]) -> bool:
    return all(preserves(f, R) for R in relations)


def is_nu(f: OperationTable) -> bool:
    if f.arity < 3:
        raise CSPError("near-unanimity operations have arity at least 3")
    d = f.size
    for x in range(d):
        for y in range(d):
            for pos in range(f.arity):
                args = [x] * f.arity
                args[pos] = y
                if f(*args) != x:
                    return False
    return True


@dataclass(frozen=True)
class ZeroOneAll:
    """Template match of a binary relation preserved by the dual discriminator.

    ``kind`` is one of ``"type1"`` (``({a} x D) | (D x {b})``), ``"type2"``
    (``{(perm[a], a)}``), ``"type3"`` (``P x Q``) or ``"type4"``
    (type 1 or 2 part ``base`` intersected with ``P x Q``).
    """

    kind: str
    a: int | None = None
    b: int | None = None
    perm: tuple | None = None
    P: frozenset | None = None
    Q: frozenset | None = None
    base: "ZeroOneAll | None" = None


def fan_relation(a: int, b: int, size: int) -> Relation:
    tuples = {(a, v) for v in range(size)} | {(v, b) for v in range(size)}
    return Relation(2, frozenset(tuples), size)


def permutation_relation(perm: Sequence[int]) -> Relation:
    return Relation(2, frozenset((int(perm[a]), a) for a in range(len(perm))), len(perm))


def product_relation(P: Iterable[int], Q: Iterable[int], size: int) -> Relation:
    return Relation(2, frozenset(itertools.product(sorted(P), sorted(Q))), size)


def _as_permutation(R: Relation):
    """``perm`` with ``R == {(perm[a], a)}``, or None."""
    d = R.size
    if len(R) != d:
        return None
    perm = [-1] * d
    for x, a in R.tuples:
        if perm[a] != -1:
            return None
        perm[a] = x
    if sorted(perm) != list(range(d)):
        return None
    return tuple(perm)


def classify_01all(R: Relation) -> ZeroOneAll | None:
    """First matching 0/1/all template, tried in the order type1, type2, type3, type4."""
    if R.arity != 2:
        raise CSPError("classify_01all expects a binary relation")
    d = R.size
    tuples = R.tuples
    P = frozenset(t[0] for t in tuples)
    Q = frozenset(t[1] for t in tuples)
    for a in range(d):
        for b in range(d):
            if fan_relation(a, b, d).tuples == tuples:
                return ZeroOneAll("type1", a=a, b=b)
    perm = _as_permutation(R)
    if perm is not None:
        return ZeroOneAll("type2", perm=perm)
    if tuples == frozenset(itertools.product(P, Q)):
        return ZeroOneAll("type3", P=P, Q=Q)
    box = frozenset(itertools.product(P, Q))
    for a in range(d):
        for b in range(d):
            if fan_relation(a, b, d).tuples & box == tuples:
                return ZeroOneAll("type4", P=P, Q=Q, base=ZeroOneAll("type1", a=a, b=b))
    # a partial bijection P <-> Q extends to a permutation whose graph cut to P x Q is R
    if len(tuples) == len(P) == len(Q):
        forward = {a: x for x, a in tuples}
        rest_x = sorted(set(range(d)) - P)
        rest_a = sorted(set(range(d)) - Q)
        for x, a in zip(rest_x, rest_a):
            forward[a] = x
        full = tuple(forward[a] for a in range(d))
        return ZeroOneAll("type4", P=P, Q=Q, base=ZeroOneAll("type2", perm=full))
    return None


def is_2decomposable(R: Relation) -> bool:
    if R.arity < 2:
        raise CSPError("2-decomposability needs arity at least 2")
    r = R.arity
    projections = {(i, j): R.projection(i, j).tuples for i in range(r) for j in range(r)}
    for t in itertools.product(range(R.size), repeat=r):
        in_proj = all((t[i], t[j]) in projections[i, j] for i in range(r) for j in range(r))
        if in_proj != (t in R.tuples):
            return False
    return True


def find_majority(language: Sequence[Relation], size: int | None = None,
                  cap: int = MAJORITY_SEARCH_CAP) -> OperationTable | None:
    """Backtracking search for a majority polymorphism of ``language``.

    Rows with a repeated argument are forced by the majority identities; only
    pairwise-distinct argument triples are searched. The dual discriminator's
    value is tried first at every entry.
    """
    if size is None:
        if not language:
            raise CSPError("domain size is required for an empty language")
        size = language[0].size
    if size > cap:
        raise CSPError(f"majority search is capped at domain size {cap}")
    d = size
    table = -np.ones((d, d, d), dtype=np.int64)
    for x, y, z in itertools.product(range(d), repeat=3):
        if x == y or x == z:
            table[x, y, z] = x
        elif y == z:
            table[x, y, z] = y
    free = [t for t in itertools.product(range(d), repeat=3) if len(set(t)) == 3]
    order = {t: i for i, t in enumerate(free)}

    # each relation yields checks: (needed free entries, column triples, tuple membership)
    checks_by_last: list[list] = [[] for _ in free]
    initial: list = []
    for R in language:
        if R.arity < 1:
            continue
        tuples = R.sorted_tuples()
        for combo in itertools.product(tuples, repeat=3):
            columns = [tuple(c[j] for c in combo) for j in range(R.arity)]
            needed = sorted({order[c] for c in columns if c in order})
            item = (columns, R)
            if needed:
                checks_by_last[needed[-1]].append(item)
            else:
                initial.append(item)

    def ok(item) -> bool:
        columns, R = item
        return tuple(int(table[c]) for c in columns) in R.tuples

    if not all(ok(item) for item in initial):
        return None

    def search(i: int) -> bool:
        if i == len(free):
            return True
        x, y, z = free[i]
        for v in [x] + [v for v in range(d) if v != x]:
            table[x, y, z] = v
            if all(ok(item) for item in checks_by_last[i]) and search(i + 1):
                return True
        table[x, y, z] = -1
        return False

    if not search(0):
        return None
    return OperationTable(3, table.copy())


def subuniverse_closure(S: Iterable[int], operations: Sequence[OperationTable]) -> frozenset:
    """Smallest superset of ``S`` closed under every operation in ``operations``."""
    if not operations:
        raise CSPError("at least one operation is required")
    current = set(int(v) for v in S)
    while True:
        added = set()
        for f in operations:
            for args in itertools.product(sorted(current), repeat=f.arity):
                v = f(*args)
                if v not in current:
                    added.add(v)
        if not added:
            return frozenset(current)
        current |= added


@dataclass(frozen=True)
class LanguageProfile:
    relations: tuple
    size: int
    has_nu: int | None
    has_majority: bool
    has_dual_discriminator: bool
    max_arity: int
    majority: OperationTable | None = None


def profile_language(relations: Sequence[Relation], size: int) -> LanguageProfile:
    relations = tuple(relations)
    dd_ok = preserves_all(dual_discriminator(size), relations)
    majority = dual_discriminator(size) if dd_ok else None
    if majority is None and size <= MAJORITY_SEARCH_CAP:
        majority = find_majority(relations, size)
    return LanguageProfile(
        relations=relations,
        size=size,
        has_nu=3 if majority is not None else None,
        has_majority=majority is not None,
        has_dual_discriminator=dd_ok,
        max_arity=max((R.arity for R in relations), default=0),
        majority=majority,
    )


def binarize_unary(instance: Instance) -> Instance:
    """Replace every unary constraint ``(x, R)`` by ``((x, x), {(a, a) : a in R})``."""
    out = []
    for c in instance.constraints:
        if c.arity == 1:
            rel = Relation(2, frozenset((a, a) for (a,) in c.relation.tuples), c.relation.size)
            out.append(Constraint((c.scope[0], c.scope[0]), rel, c.weight))
        else:
            out.append(c)
    return instance.with_constraints(out)


@dataclass(frozen=True)
class BinarizationMap:
    """Correspondence between an instance and its binarization over ``D^r``.

    Variables ``0..n-1`` of the binarized instance stand for the original
    variables (only the first coordinate of their value is meaningful); each
    constraint of arity at least 3 gets one extra variable holding its tuple.
    """

    domain_size: int
    arity: int
    num_original: int
    constraint_vars: tuple  # (binarized var id, original constraint index)
    scopes: tuple

    def encode(self, t: Sequence[int]) -> int:
        code = 0
        padded = list(t) + [0] * (self.arity - len(t))
        for v in padded:
            code = code * self.domain_size + int(v)
        return code

    def decode(self, code: int) -> tuple:
        out = []
        for _ in range(self.arity):
            out.append(code % self.domain_size)
            code //= self.domain_size
        return tuple(reversed(out))

    def to_original(self, s) -> np.ndarray:
        lead = self.domain_size ** (self.arity - 1)
        return np.asarray(s[: self.num_original], dtype=np.int64) // lead

    def lift(self, s) -> np.ndarray:
        """Image of an original assignment in the binarized instance."""
        out = [self.encode([int(s[v])]) for v in range(self.num_original)]
        for _, ci in self.constraint_vars:
            out.append(self.encode([int(s[v]) for v in self.scopes[ci]]))
        return np.asarray(out, dtype=np.int64)


def binarize(instance: Instance):
    """Rewrite an instance of maximal arity ``r`` as a binary instance over ``D^r``.

    Returns ``(binary_instance, BinarizationMap)``. Unary and binary constraints
    act on first coordinates with their own weight; a constraint of arity at
    least 3 becomes a tuple-valued variable linked to each scope variable, its
    weight split evenly over the links. Lifted assignments keep their satisfied
    weight exactly, and satisfiability is preserved.
    """
    d = instance.domain_size
    r = max(instance.max_arity, 1)
    D = d**r
    lead = d ** (r - 1)
    n = instance.num_vars
    extra = []
    scopes = tuple(c.scope for c in instance.constraints)
    next_var = n
    for ci, c in enumerate(instance.constraints):
        if c.arity >= 3:
            extra.append((next_var, ci))
            next_var += 1
    bmap = BinarizationMap(d, r, n, tuple(extra), scopes)
    extra_of = {ci: v for v, ci in extra}

    constraints = []
    for ci, c in enumerate(instance.constraints):
        if c.arity == 1:
            good = {a for (a,) in c.relation.tuples}
            rel = Relation(2, frozenset((u, u) for u in range(D) if u // lead in good), D)
            constraints.append(Constraint((c.scope[0], c.scope[0]), rel, c.weight))
        elif c.arity == 2:
            rel = Relation(
                2,
                frozenset((u, v) for u in range(D) for v in range(D)
                          if (u // lead, v // lead) in c.relation.tuples),
                D,
            )
            constraints.append(Constraint(c.scope, rel, c.weight))
        else:
            z = extra_of[ci]
            codes = [(bmap.encode(t), t) for t in c.relation.sorted_tuples()]
            for i, x in enumerate(c.scope):
                rel = Relation(
                    2,
                    frozenset((code, u) for code, t in codes for u in range(D) if u // lead == t[i]),
                    D,
                )
                constraints.append(Constraint((z, x), rel, c.weight / c.arity))
    return Instance(D, next_var, tuple(constraints)), bmap
