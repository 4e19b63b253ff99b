"""Rounding for binary languages closed under the dual discriminator.

Constraints are first rewritten into disjunctions ``(x = a) or (y = b)``,
unique-games constraints ``x = perm(y)`` and unary constraints ``x in P``. The
SDP solution of the rewritten instance then drives a partition of the
variables: heavy single values are fixed (``V0``), two-valued variables form a
Boolean instance (``V1``) and the rest a unique-games instance (``V2``).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .algebra import (ZeroOneAll, classify_01all, fan_relation, permutation_relation)
from .core import Constraint, CSPError, Instance, Relation, check_assignment, evaluate, normalize_weights
from .sdp import SdpSolution, preprocess1, solve_instance, validate_feasibility

log = logging.getLogger(__name__)

DISJUNCTION, UG, UNARY = "disjunction", "ug", "unary"


@dataclass(frozen=True)
class Piece:
    """One rewritten constraint. ``origin`` indexes the input instance."""

    kind: str
    scope: tuple
    weight: float
    origin: int
    a: int | None = None  # disjunction (x = a) or (y = b)
    b: int | None = None
    perm: tuple | None = None  # x = perm[y]
    P: frozenset | None = None  # x in P

    def relation(self, d: int) -> Relation:
        if self.kind == DISJUNCTION:
            return fan_relation(self.a, self.b, d)
        if self.kind == UG:
            return permutation_relation(self.perm)
        return Relation.unary(self.P, d)

    def satisfied_by(self, s) -> bool:
        if self.kind == DISJUNCTION:
            x, y = self.scope
            return s[x] == self.a or s[y] == self.b
        if self.kind == UG:
            x, y = self.scope
            return s[x] == self.perm[s[y]]
        return s[self.scope[0]] in self.P


def _pieces_of(shape: ZeroOneAll, x: int, y: int, d: int) -> list[tuple]:
    full = frozenset(range(d))
    if shape.kind == "type1":
        return [(DISJUNCTION, (x, y), dict(a=shape.a, b=shape.b))]
    if shape.kind == "type2":
        return [(UG, (x, y), dict(perm=tuple(shape.perm)))]
    if shape.kind == "type3":
        out = []
        if shape.P != full:
            out.append((UNARY, (x,), dict(P=frozenset(shape.P))))
        if shape.Q != full:
            out.append((UNARY, (y,), dict(P=frozenset(shape.Q))))
        return out
    if shape.kind == "type4":
        base = _pieces_of(shape.base, x, y, d)
        return base + _pieces_of(ZeroOneAll("type3", P=shape.P, Q=shape.Q), x, y, d)
    raise CSPError(f"unknown relation type {shape.kind}")


def triage_language(instance: Instance) -> list[Piece]:
    """Rewrite every constraint into disjunction / UG / unary pieces.

    A constraint split into several pieces shares its weight equally among
    them; constraints that hold everywhere produce no piece.
    """
    d = instance.domain_size
    pieces = []
    for i, c in enumerate(instance.constraints):
        if c.arity == 1:
            found = [(UNARY, c.scope, dict(P=frozenset(a for (a,) in c.relation.tuples)))]
            if found[0][2]["P"] == frozenset(range(d)):
                found = []
        elif c.arity == 2:
            shape = classify_01all(c.relation)
            if shape is None:
                raise CSPError(f"constraint {i} is not preserved by the dual discriminator")
            found = _pieces_of(shape, *c.scope, d)
        else:
            raise CSPError("dual-discriminator rounding needs unary/binary constraints")
        for kind, scope, extra in found:
            pieces.append(Piece(kind, tuple(scope), c.weight / len(found), i, **extra))
    return pieces


def pieces_instance(instance: Instance, pieces: list[Piece]) -> Instance:
    d = instance.domain_size
    return Instance(d, instance.num_vars, tuple(Constraint(p.scope, p.relation(d), p.weight) for p in pieces))


# partition --------------------------------------------------------------------------

@dataclass
class Partition:
    r: float
    domains: list  # D_x as sorted tuples
    V0: dict  # x -> fixed value
    V1: dict  # x -> (a, b) with a < b
    V2: list

    def kind(self, x: int) -> int:
        if x in self.V0:
            return 0
        if x in self.V1:
            return 1
        return 2


def partition_variables(sol: SdpSolution, r: float) -> Partition:
    if not 0 < r < 1 / 6:
        raise ValueError("r must lie in (0, 1/6)")
    mass = sol.vectors @ sol.v0  # (n, d)
    domains, V0, V1, V2 = [], {}, {}, []
    for x in range(sol.num_vars):
        Dx = tuple(int(a) for a in np.flatnonzero(mass[x] > 0.5 - r))
        heavy = np.flatnonzero(mass[x] > 0.5 + r)
        if heavy.size and Dx != (int(heavy[0]),):
            raise AssertionError(f"variable {x}: a value above 1/2 + r must be the only candidate")
        if len(Dx) >= 3:
            raise AssertionError(f"variable {x}: {len(Dx)} candidate values; the SDP solution is infeasible")
        domains.append(Dx)
        if len(Dx) == 1:
            V0[x] = Dx[0]
        elif len(Dx) == 2:
            V1[x] = Dx
        else:
            V2.append(x)
    return Partition(r, domains, V0, V1, V2)


# splitting --------------------------------------------------------------------------

@dataclass
class Split:
    satisfied: list  # C_s, piece ids
    violated: list  # C_v
    groups: dict  # 1..4 -> piece ids (C'' by group)
    reasons: dict = field(default_factory=dict)  # piece id -> list item that put it in C_s / C_v

    @property
    def C1(self) -> list:
        return self.groups[1] + self.groups[2]

    @property
    def C2(self) -> list:
        return self.groups[3] + self.groups[4]


def split_constraints(pieces: list[Piece], part: Partition) -> Split:
    Cs, Cv, groups, reasons = [], [], {1: [], 2: [], 3: [], 4: []}, {}
    K = part.kind
    for i, p in enumerate(pieces):
        if p.kind == UNARY:
            (x,) = p.scope
            if (x in part.V0 and part.V0[x] in p.P) or (x in part.V1 and set(part.V1[x]) <= p.P):
                Cs.append(i); reasons[i] = "s3"
            elif K(x) in (0, 1):
                Cv.append(i); reasons[i] = "v1"
            else:
                groups[4].append(i)
        elif p.kind == DISJUNCTION:
            x, y = p.scope
            if (x in part.V0 and part.V0[x] == p.a) or (y in part.V0 and part.V0[y] == p.b):
                Cs.append(i); reasons[i] = "s2"
            elif K(x) != 1 or K(y) != 1:
                Cv.append(i); reasons[i] = "v2"
            elif p.a not in part.V1[x] or p.b not in part.V1[y]:
                Cv.append(i); reasons[i] = "v3"
            else:
                groups[1].append(i)
        else:
            x, y = p.scope
            kx, ky = K(x), K(y)
            if kx == 0 and ky == 0 and part.V0[x] == p.perm[part.V0[y]]:
                Cs.append(i); reasons[i] = "s1"
            elif kx == 0 or ky == 0:
                Cv.append(i); reasons[i] = "v4"
            elif {kx, ky} == {1, 2}:
                Cv.append(i); reasons[i] = "v5"
            elif kx == 1:
                if set(part.V1[x]) != {p.perm[b] for b in part.V1[y]}:
                    Cv.append(i); reasons[i] = "v6"
                else:
                    groups[2].append(i)
            else:
                groups[3].append(i)
    return Split(Cs, Cv, groups, reasons)


# I1: Min Uncut labelling, SDP transformation, Boolean rounding ------------------------

@dataclass
class UgLabeling:
    alpha: dict  # x -> alpha_x
    beta: dict
    bad: list  # piece ids of UG constraints in C1 with alpha_x != perm(alpha_y)


def _starred(sol: SdpSolution, x: int, a: int, b: int) -> np.ndarray:
    diff = sol.vectors[x, a] - sol.vectors[x, b]
    norm = np.linalg.norm(diff)
    if norm == 0:
        raise AssertionError(f"variable {x}: zero difference vector on its two candidate values")
    return diff / norm


def gw_round_ug(pieces: list[Piece], split: Split, part: Partition, sol: SdpSolution,
                seed=None, g: np.ndarray | None = None) -> UgLabeling:
    """One random hyperplane picks ``alpha_x`` on the side of the normal ``g``."""
    if g is None:
        g = np.random.default_rng(seed).standard_normal(sol.dim)
    alpha, beta = {}, {}
    for x, (a, b) in part.V1.items():
        if g @ _starred(sol, x, a, b) >= 0:
            alpha[x], beta[x] = a, b
        else:
            alpha[x], beta[x] = b, a
    bad = [i for i in split.groups[2]
           if alpha[pieces[i].scope[0]] != pieces[i].perm[alpha[pieces[i].scope[1]]]]
    return UgLabeling(alpha, beta, bad)


@dataclass
class BooleanInstance:
    """``I1'``: variables of ``V1`` over ``{0, 1}`` where 0 means ``alpha_x``."""

    instance: Instance
    variables: list  # position -> original variable
    pieces: list  # position -> piece id
    labeling: UgLabeling

    def decode(self, bits) -> dict:
        lab = self.labeling
        return {x: (lab.alpha[x] if bits[j] == 0 else lab.beta[x]) for j, x in enumerate(self.variables)}


def boolean_instance(pieces: list[Piece], split: Split, labeling: UgLabeling, d: int) -> BooleanInstance:
    variables = sorted(labeling.alpha)
    pos = {x: j for j, x in enumerate(variables)}
    bad = set(labeling.bad)
    code = lambda x, v: 0 if v == labeling.alpha[x] else 1  # noqa: E731
    cons, ids = [], []
    identity = Relation.from_tuples([(0, 0), (1, 1)], 2)
    for i in split.C1:
        if i in bad:
            continue
        p = pieces[i]
        x, y = p.scope
        if p.kind == DISJUNCTION:
            rel = fan_relation(code(x, p.a), code(y, p.b), 2)
        else:
            rel = identity
        cons.append(Constraint((pos[x], pos[y]), rel, p.weight))
        ids.append(i)
    return BooleanInstance(Instance(2, len(variables), tuple(cons)), variables, ids, labeling)


def transform_sdp(boolean: BooleanInstance, sol: SdpSolution) -> SdpSolution:
    """``x~_alpha = x_alpha`` and ``x~_beta = v0 - x_alpha`` for each ``x`` in ``V1``."""
    n = len(boolean.variables)
    vectors = np.zeros((n, 2, sol.dim))
    for j, x in enumerate(boolean.variables):
        xa = sol.vectors[x, boolean.labeling.alpha[x]]
        vectors[j, 0] = xa
        vectors[j, 1] = sol.v0 - xa
    out = SdpSolution(vectors, sol.v0.copy())
    out.residuals = validate_feasibility(out)
    out.feasibility_residual = max(out.residuals.values()) if out.residuals else 0.0
    return out


def disjunction_cost(sol: SdpSolution, x: int, a: int, y: int, b: int) -> float:
    return float((sol.v0 - sol.vectors[x, a]) @ (sol.v0 - sol.vectors[y, b]))


def ug_cost(sol: SdpSolution, x: int, y: int, perm, values) -> float:
    """``1/2 sum_{a in values} |x_{perm(a)} - y_a|^2``."""
    total = 0.0
    for a in values:
        diff = sol.vectors[x, perm[a]] - sol.vectors[y, a]
        total += float(diff @ diff)
    return total / 2


@dataclass
class CostComparison:
    piece: int
    kind: str
    old: float
    new: float


def compare_costs(pieces: list[Piece], boolean: BooleanInstance, sol: SdpSolution,
                  transformed: SdpSolution) -> list[CostComparison]:
    """Per kept constraint of ``I1'``: cost under the original and transformed solution."""
    pos = {x: j for j, x in enumerate(boolean.variables)}
    lab = boolean.labeling
    code = lambda x, v: 0 if v == lab.alpha[x] else 1  # noqa: E731
    out = []
    d = sol.domain_size
    for i in boolean.pieces:
        p = pieces[i]
        x, y = p.scope
        if p.kind == DISJUNCTION:
            old = disjunction_cost(sol, x, p.a, y, p.b)
            new = disjunction_cost(transformed, pos[x], code(x, p.a), pos[y], code(y, p.b))
        else:
            old = ug_cost(sol, x, y, p.perm, range(d))
            new = ug_cost(transformed, pos[x], pos[y], (0, 1), (0, 1))
        out.append(CostComparison(i, p.kind, old, new))
    return out


def hyperplane_boolean(transformed: SdpSolution, g: np.ndarray) -> np.ndarray:
    """Bit 0 (``alpha``) iff ``g . (x~_alpha - x~_beta) >= 0``, with ``g`` oriented along ``v0``."""
    if g @ transformed.v0 < 0:
        g = -g
    z = transformed.vectors[:, 0] - transformed.vectors[:, 1]
    return np.where(z @ g >= 0, 0, 1).astype(np.int64)


def round_boolean_2csp(boolean: BooleanInstance, transformed: SdpSolution, seed=None,
                       rounder: Callable | None = None, g: np.ndarray | None = None) -> dict:
    """Assignment of ``V1`` (original values) from the transformed solution."""
    if g is None:
        g = np.random.default_rng(seed).standard_normal(transformed.dim)
    bits = (rounder or hyperplane_boolean)(transformed, g)
    return boolean.decode(bits)


# I2: unique games with unary constraints as dummy variables ---------------------------

@dataclass
class UgInstance:
    variables: list  # original V2 variables, then dummies
    dummies: dict  # dummy position -> (x, P)
    vectors: np.ndarray  # (len(variables), d, dim)
    constraints: list  # (pos_x, pos_y, perm, weight, piece id)


def ug_instance(pieces: list[Piece], split: Split, part: Partition, sol: SdpSolution) -> UgInstance:
    d = sol.domain_size
    variables = list(part.V2)
    pos = {x: j for j, x in enumerate(variables)}
    vecs = [sol.vectors[x] for x in variables]
    dummies, cons = {}, []
    for i in split.groups[3]:
        p = pieces[i]
        cons.append((pos[p.scope[0]], pos[p.scope[1]], p.perm, p.weight, i))
    identity = tuple(range(d))
    for i in split.groups[4]:
        p = pieces[i]
        x = p.scope[0]
        z = len(variables) + len(dummies)
        dummies[z] = (x, p.P)
        v = sol.vectors[x].copy()
        v[[a for a in range(d) if a not in p.P]] = 0.0
        vecs.append(v)
        cons.append((pos[x], z, identity, p.weight, i))
    allvars = variables + [None] * len(dummies)
    vectors = np.array(vecs) if vecs else np.zeros((0, d, sol.dim))
    return UgInstance(allvars, dummies, vectors, cons)


def gaussian_ug(vectors: np.ndarray, g: np.ndarray, threshold: float) -> np.ndarray:
    """Per variable: best ``g . x_a/|x_a|`` among values with ``|x_a|^2 >= threshold``."""
    out = np.zeros(vectors.shape[0], dtype=np.int64)
    for j, vx in enumerate(vectors):
        normsq = np.einsum("ak,ak->a", vx, vx)
        cand = np.flatnonzero(normsq >= threshold)
        if cand.size == 0:
            best = normsq.max()
            out[j] = int(np.flatnonzero(normsq >= best - 1e-12)[0])
            continue
        scores = (vx[cand] @ g) / np.sqrt(normsq[cand])
        top = scores.max()
        out[j] = int(cand[np.flatnonzero(scores >= top - 1e-12)[0]])
    return out


def round_unique_games(ug: UgInstance, sol: SdpSolution, seed=None, rounder: Callable | None = None,
                       g: np.ndarray | None = None) -> dict:
    """Values for ``V2`` (dummies are rounded too but not returned)."""
    if g is None:
        g = np.random.default_rng(seed).standard_normal(sol.dim)
    threshold = 1.0 / (2 * sol.domain_size)
    values = (rounder or gaussian_ug)(ug.vectors, g, threshold) if ug.vectors.size else np.zeros(0, int)
    return {x: int(values[j]) for j, x in enumerate(ug.variables) if x is not None}


# the pipeline -------------------------------------------------------------------------

@dataclass
class DDReport:
    path: str = "sdp"
    partition_sizes: dict = field(default_factory=dict)
    r: float | None = None
    w_satisfied: float = 0.0
    w_violated: float = 0.0
    w_bad: float = 0.0
    w_groups: dict = field(default_factory=dict)
    i1_loss: float = 0.0
    i2_loss: float = 0.0
    satisfied_weight: float = 0.0
    sdp_objective: float | None = None
    dummies: int = 0
    transform_residual: float | None = None
    cost_comparisons: list = field(default_factory=list)
    assignment: np.ndarray | None = None

    @property
    def loss(self) -> float:
        return 1.0 - self.satisfied_weight

    def to_dict(self) -> dict:
        return {
            "path": self.path,
            "partition_sizes": self.partition_sizes,
            "r": self.r,
            "w_C_s": self.w_satisfied,
            "w_C_v": self.w_violated,
            "w_C_bad": self.w_bad,
            "w_groups": {str(k): v for k, v in self.w_groups.items()},
            "I1_loss": self.i1_loss,
            "I2_loss": self.i2_loss,
            "satisfied_weight": self.satisfied_weight,
            "loss": self.loss,
            "sdp_objective": self.sdp_objective,
            "dummies": self.dummies,
            "transform_residual": self.transform_residual,
            "assignment": None if self.assignment is None else [int(v) for v in self.assignment],
        }


def _weight(pieces, ids) -> float:
    return float(sum(pieces[i].weight for i in ids))


def run_dd(instance: Instance, seed=None, delta: float | None = None, sol: SdpSolution | None = None,
           use_preprocess1: bool = True, boolean_rounder: Callable | None = None,
           ug_rounder: Callable | None = None):
    """Round an instance over a dual-discriminator language; returns ``(assignment, report)``."""
    inst = normalize_weights(instance) if instance.m else instance
    pieces = triage_language(inst)  # validates the language up front
    report = DDReport()
    if use_preprocess1 and sol is None:
        pre = preprocess1(inst)
        if not pre.passed_through:
            report.path = "preprocess1"
            report.assignment = pre.assignment
            report.satisfied_weight = evaluate(inst, pre.assignment)
            return pre.assignment, report

    rewritten = pieces_instance(inst, pieces)
    if sol is None:
        sol = solve_instance(rewritten, delta)
    report.sdp_objective = sol.objective_value
    rng = np.random.default_rng(seed)
    r = float(rng.uniform(0.0, 1.0 / 6))
    while r == 0.0:
        r = float(rng.uniform(0.0, 1.0 / 6))
    g_cut, g_bool, g_ug = (rng.standard_normal(sol.dim) for _ in range(3))

    part = partition_variables(sol, r)
    split = split_constraints(pieces, part)
    labeling = gw_round_ug(pieces, split, part, sol, g=g_cut)
    boolean = boolean_instance(pieces, split, labeling, inst.domain_size)
    transformed = transform_sdp(boolean, sol)
    v1_values = round_boolean_2csp(boolean, transformed, rounder=boolean_rounder, g=g_bool)
    ug = ug_instance(pieces, split, part, sol)
    v2_values = round_unique_games(ug, sol, rounder=ug_rounder, g=g_ug)

    s = np.zeros(inst.num_vars, dtype=np.int64)
    for x, v in part.V0.items():
        s[x] = v
    for x, v in v1_values.items():
        s[x] = v
    for x, v in v2_values.items():
        s[x] = v
    check_assignment(inst, s)
    broken = [i for i in split.satisfied if not pieces[i].satisfied_by(s)]
    if broken:
        raise AssertionError(f"constraints {broken} of C_s are violated by an admissible assignment")

    report.r = r
    report.partition_sizes = {"V0": len(part.V0), "V1": len(part.V1), "V2": len(part.V2)}
    report.w_satisfied = _weight(pieces, split.satisfied)
    report.w_violated = _weight(pieces, split.violated)
    report.w_bad = _weight(pieces, labeling.bad)
    report.w_groups = {k: _weight(pieces, ids) for k, ids in split.groups.items()}
    report.i1_loss = _weight(pieces, [i for i in split.C1 if not pieces[i].satisfied_by(s)])
    report.i2_loss = _weight(pieces, [i for i in split.C2 if not pieces[i].satisfied_by(s)])
    report.dummies = len(ug.dummies)
    report.transform_residual = transformed.feasibility_residual
    report.cost_comparisons = compare_costs(pieces, boolean, sol, transformed)
    report.satisfied_weight = evaluate(inst, s)
    report.assignment = s
    return s, report
