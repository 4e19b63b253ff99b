"""Weighted CSP instances over a finite domain ``{0, ..., d-1}``.

Instances are immutable. Weights are floats and, after :func:`normalize_weights`,
sum to one.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

WEIGHT_TOL = 1e-12
BRUTE_FORCE_CAP = 10**7


class CSPError(ValueError):
    """Malformed instance, relation or assignment."""


class InvalidAssignmentError(CSPError):
    pass


class BruteForceCapError(CSPError):
    pass


@dataclass(frozen=True)
class Relation:
    """An extensional relation of a fixed arity on ``{0, ..., size-1}``."""

    arity: int
    tuples: frozenset
    size: int

    def __post_init__(self):
        if self.arity < 1:
            raise CSPError("relation arity must be positive")
        if self.size < 1:
            raise CSPError("domain size must be positive")
        tuples = frozenset(tuple(int(v) for v in t) for t in self.tuples)
        for t in tuples:
            if len(t) != self.arity:
                raise CSPError(f"tuple {t} does not have arity {self.arity}")
            if any(v < 0 or v >= self.size for v in t):
                raise CSPError(f"tuple {t} has an entry outside the domain")
        object.__setattr__(self, "tuples", tuples)

    @classmethod
    def from_tuples(cls, tuples: Iterable[Sequence[int]], size: int, arity: int | None = None) -> "Relation":
        tuples = [tuple(t) for t in tuples]
        if arity is None:
            if not tuples:
                raise CSPError("arity is required for an empty relation")
            arity = len(tuples[0])
        return cls(arity, frozenset(tuples), size)

    @classmethod
    def from_matrix(cls, matrix) -> "Relation":
        m = np.asarray(matrix, dtype=bool)
        size = m.shape[0]
        return cls(2, frozenset(zip(*map(list, np.nonzero(m)))), size)

    @classmethod
    def unary(cls, values: Iterable[int], size: int) -> "Relation":
        return cls(1, frozenset((int(v),) for v in values), size)

    @classmethod
    def full(cls, size: int, arity: int = 2) -> "Relation":
        return cls(arity, frozenset(itertools.product(range(size), repeat=arity)), size)

    def __contains__(self, t) -> bool:
        return tuple(t) in self.tuples

    def __len__(self) -> int:
        return len(self.tuples)

    @cached_property
    def table(self) -> np.ndarray:
        """Boolean membership array of shape ``(size,) * arity``."""
        out = np.zeros((self.size,) * self.arity, dtype=bool)
        for t in self.tuples:
            out[t] = True
        return out

    def inverse(self) -> "Relation":
        if self.arity != 2:
            raise CSPError("inverse is defined for binary relations")
        return Relation(2, frozenset((b, a) for a, b in self.tuples), self.size)

    def projection(self, *coords: int) -> "Relation":
        return Relation(len(coords), frozenset(tuple(t[i] for i in coords) for t in self.tuples), self.size)

    def sorted_tuples(self) -> list[tuple[int, ...]]:
        return sorted(self.tuples)


@dataclass(frozen=True)
class Constraint:
    scope: tuple
    relation: Relation
    weight: float = 1.0

    def __post_init__(self):
        scope = tuple(int(v) for v in self.scope)
        object.__setattr__(self, "scope", scope)
        object.__setattr__(self, "weight", float(self.weight))
        if len(scope) != self.relation.arity:
            raise CSPError(f"scope {scope} does not match relation arity {self.relation.arity}")
        if not self.weight >= 0:
            raise CSPError("constraint weights must be nonnegative")

    @property
    def arity(self) -> int:
        return self.relation.arity

    def satisfied_by(self, s) -> bool:
        return tuple(int(s[v]) for v in self.scope) in self.relation.tuples


@dataclass(frozen=True)
class Instance:
    domain_size: int
    num_vars: int
    constraints: tuple = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "constraints", tuple(self.constraints))
        if self.domain_size < 1:
            raise CSPError("domain size must be positive")
        if self.num_vars < 0:
            raise CSPError("number of variables must be nonnegative")
        for c in self.constraints:
            if c.relation.size != self.domain_size:
                raise CSPError("constraint relation is over a different domain")
            if any(v < 0 or v >= self.num_vars for v in c.scope):
                raise CSPError(f"scope {c.scope} references an unknown variable")

    @property
    def m(self) -> int:
        return len(self.constraints)

    @property
    def total_weight(self) -> float:
        return float(sum(c.weight for c in self.constraints))

    @property
    def max_arity(self) -> int:
        return max((c.arity for c in self.constraints), default=0)

    def is_binary(self) -> bool:
        return all(c.arity <= 2 for c in self.constraints)

    def with_constraints(self, constraints: Iterable[Constraint]) -> "Instance":
        return Instance(self.domain_size, self.num_vars, tuple(constraints))

    def variables_in_use(self) -> set[int]:
        return {v for c in self.constraints for v in c.scope}


def check_assignment(instance: Instance, s) -> np.ndarray:
    arr = np.asarray(s, dtype=np.int64)
    if arr.shape != (instance.num_vars,):
        raise InvalidAssignmentError(
            f"assignment has shape {arr.shape}, expected ({instance.num_vars},)"
        )
    if arr.size and (arr.min() < 0 or arr.max() >= instance.domain_size):
        raise InvalidAssignmentError("assignment value outside the domain")
    return arr


def evaluate(instance: Instance, s) -> float:
    """Total weight of the constraints satisfied by ``s``."""
    arr = check_assignment(instance, s)
    return math.fsum(c.weight for c in instance.constraints if c.satisfied_by(arr))


def unsatisfied_weight(instance: Instance, s) -> float:
    arr = check_assignment(instance, s)
    return math.fsum(c.weight for c in instance.constraints if not c.satisfied_by(arr))


def normalize_weights(instance: Instance) -> Instance:
    total = instance.total_weight
    if total <= 0:
        raise CSPError("cannot normalize an instance with zero total weight")
    if abs(total - 1.0) <= WEIGHT_TOL:
        return instance
    return instance.with_constraints(
        Constraint(c.scope, c.relation, c.weight / total) for c in instance.constraints
    )


def _satisfied_weights(instance: Instance, block: np.ndarray) -> np.ndarray:
    total = np.zeros(block.shape[0])
    for c in instance.constraints:
        idx = tuple(block[:, v] for v in c.scope)
        total += c.weight * c.relation.table[idx]
    return total


def opt_bruteforce(instance: Instance, cap: int = BRUTE_FORCE_CAP, chunk: int = 1 << 16):
    """Exact ``Opt(I)`` by enumeration, with an arg-max witness.

    Ties between optimal assignments go to the lexicographically smallest one.
    """
    d, n = instance.domain_size, instance.num_vars
    count = d**n
    if count > cap:
        raise BruteForceCapError(f"{d}^{n} assignments exceed the cap {cap}")
    if n == 0:
        return 0.0, np.zeros(0, dtype=np.int64)
    powers = d ** np.arange(n - 1, -1, -1, dtype=np.int64)
    best_val, best_idx = -1.0, 0
    for start in range(0, count, chunk):
        codes = np.arange(start, min(start + chunk, count), dtype=np.int64)
        block = (codes[:, None] // powers[None, :]) % d
        vals = _satisfied_weights(instance, block)
        i = int(np.argmax(vals))
        if vals[i] > best_val + 1e-15:
            best_val, best_idx = float(vals[i]), int(codes[i])
    witness = (best_idx // powers) % d
    return best_val, witness.astype(np.int64)


def generate_planted(language: Sequence[Relation], num_vars: int, num_constraints: int,
                     eps: float, seed=None):
    """Random instance with a planted assignment violating at most ``eps`` of the weight.

    Weights are uniform. ``floor(eps * m)`` constraints are corrupted: their relation is
    replaced by a language relation excluding the planted tuple on that scope. Scopes are
    drawn without repeated variables where ``num_vars`` allows it.
    """
    if not language:
        raise CSPError("language must be nonempty")
    if not 0 <= eps < 1:
        raise CSPError("eps must lie in [0, 1)")
    size = language[0].size
    if any(r.size != size for r in language):
        raise CSPError("language relations must share a domain")
    rng = np.random.default_rng(seed)
    planted = rng.integers(0, size, size=num_vars)
    n_bad = int(np.floor(eps * num_constraints + 1e-9))
    if n_bad and not any(len(r) < size**r.arity for r in language):
        raise CSPError("every language relation is full, so no constraint can be violated")
    bad_slots = set(rng.choice(num_constraints, size=n_bad, replace=False).tolist()) if n_bad else set()

    constraints = []
    for i in range(num_constraints):
        want_violated = i in bad_slots
        for _ in range(10_000):
            rel = language[int(rng.integers(len(language)))]
            scope = _draw_scope(rng, num_vars, rel.arity)
            t = tuple(int(planted[v]) for v in scope)
            if (t in rel.tuples) != want_violated:
                break
        else:
            raise CSPError("could not draw a constraint with the requested planted status")
        constraints.append(Constraint(scope, rel, 1.0 / num_constraints))
    return Instance(size, num_vars, tuple(constraints)), planted


def _draw_scope(rng, num_vars: int, arity: int) -> tuple:
    if num_vars >= arity:
        return tuple(int(v) for v in rng.choice(num_vars, size=arity, replace=False))
    return tuple(int(v) for v in rng.integers(0, num_vars, size=arity))


def instance_to_dict(instance: Instance) -> dict:
    return {
        "domain_size": instance.domain_size,
        "num_vars": instance.num_vars,
        "constraints": [
            {
                "scope": list(c.scope),
                "tuples": [list(t) for t in c.relation.sorted_tuples()],
                "weight": c.weight,
            }
            for c in instance.constraints
        ],
    }


def instance_from_dict(data: dict) -> Instance:
    try:
        d = int(data["domain_size"])
        constraints = []
        for entry in data["constraints"]:
            scope = tuple(entry["scope"])
            rel = Relation(len(scope), frozenset(tuple(t) for t in entry["tuples"]), d)
            constraints.append(Constraint(scope, rel, float(entry.get("weight", 1.0))))
        return Instance(d, int(data["num_vars"]), tuple(constraints))
    except (KeyError, TypeError) as exc:
        raise CSPError(f"malformed instance: {exc}") from exc


def dumps_instance(instance: Instance) -> str:
    return json.dumps(instance_to_dict(instance), sort_keys=True)


def loads_instance(text: str) -> Instance:
    return instance_from_dict(json.loads(text))
