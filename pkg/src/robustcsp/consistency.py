"""Patterns, propagation, arc consistency and the exact decision procedure.

A pattern is a directed multigraph whose vertices carry variable labels and
whose edges carry binary relations. Propagation of a value set along a tree
pattern is computed by dynamic programming; :func:`propagate_naive` enumerates
realizations and serves as its oracle.

Sets of domain values are handled as Python ``frozenset`` at the API boundary
and as integer bitmasks inside the bounded consistency checkers.
"""
from __future__ import annotations

import itertools
from collections import defaultdict, deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .core import Constraint, CSPError, Instance, Relation


@dataclass(frozen=True)
class Edge:
    tail: int
    head: int
    relation: Relation
    constraint: int | None = None  # index into the instance, if drawn from one


@dataclass(frozen=True)
class Pattern:
    labels: tuple
    edges: tuple
    begin: int
    end: int

    def __post_init__(self):
        object.__setattr__(self, "labels", tuple(int(v) for v in self.labels))
        object.__setattr__(self, "edges", tuple(self.edges))
        nv = len(self.labels)
        if not (0 <= self.begin < nv and 0 <= self.end < nv):
            raise CSPError("begin/end vertex out of range")
        for e in self.edges:
            if not (0 <= e.tail < nv and 0 <= e.head < nv):
                raise CSPError("edge endpoint out of range")

    @property
    def num_vertices(self) -> int:
        return len(self.labels)

    @property
    def size(self) -> int:
        return len(self.edges)

    @property
    def domain_size(self) -> int | None:
        return self.edges[0].relation.size if self.edges else None

    @classmethod
    def single(cls, label: int) -> "Pattern":
        return cls((label,), (), 0, 0)

    @classmethod
    def from_constraint(cls, c: Constraint, index: int | None = None, reverse: bool = False) -> "Pattern":
        """One-edge path along ``c`` (traversed backwards when ``reverse``)."""
        rel = _binary_view(c)
        x, y = c.scope if c.arity == 2 else (c.scope[0], c.scope[0])
        edge = Edge(0, 1, rel, index)
        if reverse:
            return cls((x, y), (edge,), 1, 0)
        return cls((x, y), (edge,), 0, 1)

    def shape(self, n: int | None = None) -> str:
        """Most specific tag among ``path``, ``n-tree``, ``path-of-n-trees``, ``general``."""
        if is_path(self):
            return "path"
        if n is not None and is_ntree(self, n):
            return "n-tree"
        if n is not None and is_path_of_ntrees(self, n):
            return "path-of-n-trees"
        return "general"


def _binary_view(c: Constraint) -> Relation:
    if c.arity == 2:
        return c.relation
    if c.arity == 1:
        return Relation(2, frozenset((a, a) for (a,) in c.relation.tuples), c.relation.size)
    raise CSPError("patterns are built from unary and binary constraints only")


def add(p: Pattern, q: Pattern) -> Pattern:
    """Glue the end of ``p`` to the beginning of ``q``."""
    if p.labels[p.end] != q.labels[q.begin]:
        raise CSPError("end of p and beginning of q carry different variables")
    remap = {}
    labels = list(p.labels)
    for v in range(q.num_vertices):
        if v == q.begin:
            remap[v] = p.end
        else:
            remap[v] = len(labels)
            labels.append(q.labels[v])
    edges = list(p.edges) + [Edge(remap[e.tail], remap[e.head], e.relation, e.constraint) for e in q.edges]
    return Pattern(tuple(labels), tuple(edges), p.begin, remap[q.end])


def repeat(p: Pattern, j: int) -> Pattern:
    """``jp = p + ... + p``; ``j = 0`` gives the one-vertex pattern at the beginning's label."""
    if j < 0:
        raise ValueError("j must be nonnegative")
    if j == 0:
        return Pattern.single(p.labels[p.begin])
    out = p
    for _ in range(j - 1):
        out = add(out, p)
    return out


jp = repeat


# structure ----------------------------------------------------------------

def _adjacency(p: Pattern):
    adj = defaultdict(list)
    for i, e in enumerate(p.edges):
        adj[e.tail].append((e.head, i))
        adj[e.head].append((e.tail, i))
    return adj


def _simple_neighbors(p: Pattern):
    nb = defaultdict(set)
    for e in p.edges:
        nb[e.tail].add(e.head)
        nb[e.head].add(e.tail)
    return nb


def is_tree(p: Pattern) -> bool:
    """Underlying multigraph is a tree (connected, no loops or parallel edges)."""
    nv = p.num_vertices
    if len(p.edges) != nv - 1:
        return False
    if any(e.tail == e.head for e in p.edges):
        return False
    nb = _simple_neighbors(p)
    seen = {0}
    stack = [0]
    while stack:
        v = stack.pop()
        for w in nb[v]:
            if w not in seen:
                seen.add(w)
                stack.append(w)
    return len(seen) == nv


def _degrees(p: Pattern):
    deg = [0] * p.num_vertices
    for e in p.edges:
        deg[e.tail] += 1
        deg[e.head] += 1
    return deg


def _tree_path(p: Pattern, src: int, dst: int) -> list[int]:
    nb = _simple_neighbors(p)
    parent = {src: None}
    queue = deque([src])
    while queue:
        v = queue.popleft()
        for w in nb[v]:
            if w not in parent:
                parent[w] = v
                queue.append(w)
    path = [dst]
    while path[-1] != src:
        path.append(parent[path[-1]])
    return path[::-1]


def is_path(p: Pattern) -> bool:
    if not is_tree(p):
        return False
    if p.num_vertices == 1:
        return True
    deg = _degrees(p)
    return max(deg) <= 2 and deg[p.begin] == 1 and deg[p.end] == 1 and p.begin != p.end


def is_ntree(p: Pattern, n: int) -> bool:
    if not is_tree(p) or p.num_vertices < 2 or p.begin == p.end:
        return False
    deg = _degrees(p)
    leaves = sum(1 for d in deg if d == 1)
    return deg[p.begin] == 1 and deg[p.end] == 1 and leaves <= n


def is_path_of_ntrees(p: Pattern, n: int) -> bool:
    """A concatenation ``t_1 + ... + t_j`` of ``n``-tree patterns.

    Pieces meet at a vertex that is a leaf of both, so cutting the
    beginning-to-end path at every interior vertex of degree two gives the
    finest decomposition; it is a valid one iff each piece is an ``n``-tree.
    """
    if not is_tree(p) or p.num_vertices < 2 or p.begin == p.end:
        return False
    deg = _degrees(p)
    if deg[p.begin] != 1 or deg[p.end] != 1:
        return False
    spine = _tree_path(p, p.begin, p.end)
    cuts = [0] + [i for i in range(1, len(spine) - 1) if deg[spine[i]] == 2] + [len(spine) - 1]
    on_spine = set(spine)
    nb = _simple_neighbors(p)
    for lo, hi in zip(cuts, cuts[1:]):
        seg = set(spine[lo:hi + 1])
        stack = [v for v in seg]
        comp = set(seg)
        while stack:
            v = stack.pop()
            for w in nb[v]:
                if w not in comp and w not in on_spine:
                    comp.add(w)
                    stack.append(w)
        inner_leaves = sum(1 for v in comp - seg if deg[v] == 1)
        if 2 + inner_leaves > n:
            return False
    return True


# propagation --------------------------------------------------------------

def _allowed_masks(p: Pattern, d: int, levels=None, ell=None) -> np.ndarray:
    allowed = np.ones((p.num_vertices, d), dtype=bool)
    if levels is not None:
        for v, x in enumerate(p.labels):
            allowed[v] = False
            allowed[v, sorted(levels.level(x, ell + 1))] = True
    return allowed


def _propagate_dp(A, p: Pattern, d: int, allowed: np.ndarray) -> frozenset:
    if not is_tree(p):
        raise CSPError("dynamic-programming propagation needs a tree pattern")
    start = np.zeros(d, dtype=bool)
    start[[a for a in A if 0 <= a < d]] = True
    adj = _adjacency(p)
    root = p.end
    parent = {root: None}
    order = [root]
    for v in order:
        for w, _ in adj[v]:
            if w not in parent:
                parent[w] = v
                order.append(w)
    feasible = {}
    for v in reversed(order):
        s = allowed[v].copy()
        if v == p.begin:
            s &= start
        for w, ei in adj[v]:
            if parent.get(w) != v:
                continue
            e = p.edges[ei]
            table = e.relation.table
            if e.tail == v:  # v -> w
                s &= (table & feasible[w][None, :]).any(axis=1)
            else:  # w -> v
                s &= (table & feasible[w][:, None]).any(axis=0)
        feasible[v] = s
    return frozenset(int(a) for a in np.flatnonzero(feasible[root]))


def _infer_d(p: Pattern, d: int | None) -> int:
    if d is not None:
        return d
    if p.edges:
        return p.edges[0].relation.size
    raise CSPError("domain size is required for an edgeless pattern")


def propagate(A: Iterable[int], p: Pattern, d: int | None = None) -> frozenset:
    """``A + p``: end values of realizations whose beginning lies in ``A``."""
    d = _infer_d(p, d)
    return _propagate_dp(frozenset(A), p, d, _allowed_masks(p, d))


def propagate_level(A: Iterable[int], p: Pattern, ell: int, levels: "LevelSets") -> frozenset:
    """``A +^ell p``: as :func:`propagate` with every vertex inside its level ``ell + 1`` set."""
    d = levels.domain_size
    return _propagate_dp(frozenset(A), p, d, _allowed_masks(p, d, levels, ell))


def propagate_constraint(A: Iterable[int], relation: Relation, x: int, y: int, ell: int,
                         levels: "LevelSets") -> frozenset:
    """``A +^ell (x, R, y)`` for a single constraint."""
    src = frozenset(A) & levels.level(x, ell + 1)
    dst = levels.level(y, ell + 1)
    return frozenset(b for a, b in relation.tuples if a in src and b in dst)


def propagate_naive(A: Iterable[int], p: Pattern, d: int | None = None, levels=None,
                    ell: int | None = None, cap: int = 10**6) -> frozenset:
    """Enumerate every vertex map and keep the realizations (oracle)."""
    d = _infer_d(p, d)
    if d ** p.num_vertices > cap:
        raise CSPError("pattern too large for enumeration")
    A = frozenset(A)
    allowed = _allowed_masks(p, d, levels, ell)
    out = set()
    for r in itertools.product(range(d), repeat=p.num_vertices):
        if r[p.begin] not in A or r[p.end] in out:
            continue
        if not all(allowed[v, r[v]] for v in range(p.num_vertices)):
            continue
        if all((r[e.tail], r[e.head]) in e.relation.tuples for e in p.edges):
            out.add(r[p.end])
    return frozenset(out)


# level sets ---------------------------------------------------------------

@dataclass(frozen=True)
class LevelSets:
    """Nested sets ``D_x^1 <= ... <= D_x^{|D|+1} = D`` for each variable.

    ``sets[x]`` lists levels ``1..|D|``; level ``|D|+1`` is implicit.
    """

    domain_size: int
    sets: tuple

    def __post_init__(self):
        d = self.domain_size
        normed = tuple(tuple(frozenset(int(a) for a in s) for s in chain) for chain in self.sets)
        object.__setattr__(self, "sets", normed)
        for x, chain in enumerate(normed):
            if len(chain) != d:
                raise CSPError(f"variable {x}: expected {d} levels, got {len(chain)}")
            for s in chain:
                if not s or any(not 0 <= a < d for a in s):
                    raise CSPError(f"variable {x}: level sets must be nonempty subsets of D")
            for lo, hi in zip(chain, chain[1:]):
                if not lo <= hi:
                    raise CSPError(f"variable {x}: level sets are not nested")

    @property
    def num_vars(self) -> int:
        return len(self.sets)

    def level(self, x: int, ell: int) -> frozenset:
        if ell == self.domain_size + 1:
            return frozenset(range(self.domain_size))
        if not 1 <= ell <= self.domain_size:
            raise IndexError(f"level {ell} outside 1..{self.domain_size + 1}")
        return self.sets[x][ell - 1]

    @classmethod
    def full(cls, num_vars: int, d: int) -> "LevelSets":
        return cls(d, tuple((frozenset(range(d)),) * d for _ in range(num_vars)))

    @classmethod
    def constant(cls, sets: Sequence, d: int) -> "LevelSets":
        """Every level below the top equal to ``sets[x]``."""
        return cls(d, tuple((frozenset(s),) * d for s in sets))

    def to_list(self) -> list:
        return [[sorted(s) for s in chain] for chain in self.sets]


# arc consistency and exact solving ----------------------------------------

def _arcs(instance: Instance):
    """Directed binary arcs ``(x, y, table)`` plus per-variable unary masks."""
    d = instance.domain_size
    unary = np.ones((instance.num_vars, d), dtype=bool)
    arcs = []
    for c in instance.constraints:
        if c.arity == 1:
            unary[c.scope[0]] &= c.relation.table
        elif c.arity == 2:
            x, y = c.scope
            t = c.relation.table
            if x == y:
                unary[x] &= np.diag(t).copy()
            else:
                arcs.append((x, y, t))
                arcs.append((y, x, t.T))
        else:
            raise CSPError("arc consistency is implemented for unary and binary constraints")
    return unary, arcs


def _ac_fixpoint(domains: np.ndarray, arcs, by_target, queue) -> bool:
    in_queue = set(queue)
    queue = deque(queue)
    while queue:
        i = queue.popleft()
        in_queue.discard(i)
        x, y, t = arcs[i]
        supported = domains[x] & (t & domains[y][None, :]).any(axis=1)
        if not np.array_equal(supported, domains[x]):
            domains[x] = supported
            if not supported.any():
                return False
            for j in by_target[x]:
                if j not in in_queue:
                    in_queue.add(j)
                    queue.append(j)
    return True


def _prepare(instance: Instance):
    unary, arcs = _arcs(instance)
    by_target = defaultdict(list)  # arcs whose support depends on domain of key
    for i, (x, y, _) in enumerate(arcs):
        by_target[y].append(i)
    return unary, arcs, by_target


def arc_consistency(instance: Instance):
    """Largest arc-consistent sets, or ``None`` when some set empties."""
    unary, arcs, by_target = _prepare(instance)
    domains = unary.copy()
    if instance.num_vars and not domains.any(axis=1).all():
        return None
    if not _ac_fixpoint(domains, arcs, by_target, range(len(arcs))):
        return None
    return [frozenset(int(a) for a in np.flatnonzero(row)) for row in domains]


def exact_solve(instance: Instance):
    """A satisfying assignment, or ``None`` if there is none.

    Backtracking with arc consistency maintained after every decision; the
    variable with the fewest remaining values is chosen first (lowest index on
    ties) and values are tried in ascending order, so the result is
    deterministic. Unconstrained variables receive 0.
    """
    n = instance.num_vars
    unary, arcs, by_target = _prepare(instance)
    domains = unary.copy()
    if n and not domains.any(axis=1).all():
        return None
    if not _ac_fixpoint(domains, arcs, by_target, range(len(arcs))):
        return None

    def search(doms):
        sizes = doms.sum(axis=1)
        open_vars = np.flatnonzero(sizes > 1)
        if open_vars.size == 0:
            return doms.argmax(axis=1)
        x = int(open_vars[np.argmin(sizes[open_vars])])
        for a in np.flatnonzero(doms[x]):
            trial = doms.copy()
            trial[x] = False
            trial[x, a] = True
            if _ac_fixpoint(trial, arcs, by_target, by_target[x]):
                found = search(trial)
                if found is not None:
                    return found
        return None

    result = search(domains)
    return None if result is None else np.asarray(result, dtype=np.int64)


def is_satisfiable(instance: Instance) -> bool:
    return exact_solve(instance) is not None


# bounded (IPQ)_n / (PQ) checkers ------------------------------------------
#
# Propagation along a pattern distributes over unions, so every pattern from x
# to y induces a relation T with A + p = A o T. Relations are tuples of row
# bitmasks. Patterns are enumerated semantically by size, one witness pattern
# kept per distinct relation.

def _mask(values) -> int:
    m = 0
    for a in values:
        m |= 1 << a
    return m


def _bits(mask: int) -> list[int]:
    out, a = [], 0
    while mask:
        if mask & 1:
            out.append(a)
        mask >>= 1
        a += 1
    return out


def _compose(T, S):
    out = []
    for row in T:
        acc = 0
        for b in _bits(row):
            acc |= S[b]
        out.append(acc)
    return tuple(out)


def _image(A: int, T) -> int:
    acc = 0
    for a in _bits(A):
        acc |= T[a]
    return acc


def _graft(p: Pattern, at: int, tree: Pattern) -> Pattern:
    """Identify vertex ``at`` of ``p`` with the root (``begin``) of ``tree``."""
    remap = {}
    labels = list(p.labels)
    for v in range(tree.num_vertices):
        if v == tree.begin:
            remap[v] = at
        else:
            remap[v] = len(labels)
            labels.append(tree.labels[v])
    edges = list(p.edges) + [Edge(remap[e.tail], remap[e.head], e.relation, e.constraint) for e in tree.edges]
    return Pattern(tuple(labels), tuple(edges), p.begin, p.end)


def _steps(instance: Instance, allowed: list[int]) -> dict:
    """Moves out of each variable: ``(y, row masks, constraint index, relation, reversed)``."""
    d = instance.domain_size
    out = defaultdict(list)
    for i, c in enumerate(instance.constraints):
        rel = _binary_view(c)
        x, y = c.scope if c.arity == 2 else (c.scope[0], c.scope[0])
        fwd = [0] * d
        bwd = [0] * d
        for a, b in rel.tuples:
            if allowed[x] >> a & 1 and allowed[y] >> b & 1:
                fwd[a] |= 1 << b
                bwd[b] |= 1 << a
        out[x].append((y, tuple(fwd), i, rel, False))
        out[y].append((x, tuple(bwd), i, rel, True))
    return out


def _edge_pattern(x: int, y: int, rel: Relation, index: int, reverse: bool) -> Pattern:
    """One-edge pattern from an ``x``-vertex to a ``y``-vertex."""
    if reverse:  # the constraint is ((y, x), rel)
        return Pattern((x, y), (Edge(1, 0, rel, index),), 0, 1)
    return Pattern((x, y), (Edge(0, 1, rel, index),), 0, 1)


class _PatternSpace:
    """Relations realised by bounded path-of-n-trees patterns at one level."""

    def __init__(self, instance: Instance, allowed: list[int], n: int, cap: int):
        self.instance = instance
        self.d = instance.domain_size
        self.allowed = allowed
        self.n = n
        self.cap = cap
        self.moves = _steps(instance, allowed)
        self.exhausted = False
        self._filters = self._build_filters() if n > 2 else {}
        self._trees = self._build_trees()
        self._paths = self._build_paths()

    # hanging forests: filters[z][(edges, leaves)] = {mask: rooted witness}
    def _build_filters(self):
        budget_leaves = self.n - 2
        filt = defaultdict(lambda: defaultdict(dict))
        branch = defaultdict(lambda: defaultdict(dict))
        for e in range(1, self.cap + 1):
            for z in range(self.instance.num_vars):
                for (w, T, ci, rel, rev) in self.moves[z]:
                    base = _edge_pattern(z, w, rel, ci, rev)
                    # bare edge: w is a leaf
                    if e == 1:
                        mask = self._preimage(T, self.allowed[w])
                        branch[z][(1, 1)].setdefault(mask, base)
                        continue
                    for (e2, k2), forest in list(filt[w].items()):
                        if e2 != e - 1 or k2 > budget_leaves:
                            continue
                        for fmask, fw in forest.items():
                            mask = self._preimage(T, fmask)
                            branch[z][(e, k2)].setdefault(mask, _graft_at_end(base, fw))
            for z in range(self.instance.num_vars):
                for key, items in branch[z].items():
                    if key[0] == e:
                        for mask, pat in items.items():
                            filt[z][key].setdefault(mask, pat)
                # forests with several branches
                for (e1, k1), b_items in list(branch[z].items()):
                    for (e2, k2), f_items in list(filt[z].items()):
                        if e1 + e2 != e or k1 + k2 > budget_leaves:
                            continue
                        for m1, p1 in b_items.items():
                            for m2, p2 in f_items.items():
                                filt[z][(e, k1 + k2)].setdefault(m1 & m2, _graft(p2, p2.begin, p1))
        return filt

    def _preimage(self, T, mask: int) -> int:
        out = 0
        for a, row in enumerate(T):
            if row & mask:
                out |= 1 << a
        return out

    # n-tree relations: trees[(x, y)][edges] = {relation: witness}
    def _build_trees(self):
        budget = self.n - 2
        partial = defaultdict(dict)  # (x, w, e, k) -> {relation: pattern}
        for x in range(self.instance.num_vars):
            for (w, T, ci, rel, rev) in self.moves[x]:
                partial[(x, w, 1, 0)].setdefault(T, _edge_pattern(x, w, rel, ci, rev))
        for e in range(1, self.cap):
            for key in [k for k in list(partial) if k[2] == e]:
                x, w, _, k = key
                options = [(0, 0, None, None)]
                for (ef, kf), items in self._filters.get(w, {}).items():
                    if e + ef + 1 <= self.cap and k + kf <= budget:
                        options += [(ef, kf, fm, fp) for fm, fp in items.items()]
                for T, pat in list(partial[key].items()):
                    for ef, kf, fm, fp in options:
                        Tf = T if fm is None else tuple(row & fm for row in T)
                        pf = pat if fp is None else _graft(pat, pat.end, fp)
                        for (w2, S, ci, rel, rev) in self.moves[w]:
                            tgt = (x, w2, e + ef + 1, k + kf)
                            if tgt[2] > self.cap:
                                continue
                            R = _compose(Tf, S)
                            if R not in partial[tgt]:
                                partial[tgt][R] = add(pf, _edge_pattern(w, w2, rel, ci, rev))
        trees = defaultdict(lambda: defaultdict(dict))
        for (x, w, e, k), items in partial.items():
            for R, pat in items.items():
                trees[(x, w)][e].setdefault(R, pat)
        return trees

    def _build_paths(self):
        paths = defaultdict(lambda: defaultdict(dict))  # (x, y) -> e -> {R: pattern}
        for e in range(1, self.cap + 1):
            for (x, y), by_e in self._trees.items():
                for R, pat in by_e.get(e, {}).items():
                    paths[(x, y)][e].setdefault(R, pat)
            for (x, w), by_e in list(self._trees.items()):
                for e1, t_items in by_e.items():
                    e2 = e - e1
                    if e2 < 1:
                        continue
                    for (w_, y), p_by_e in list(paths.items()):
                        if w_ != w:
                            continue
                        for T, tp in t_items.items():
                            for S, sp in list(p_by_e.get(e2, {}).items()):
                                R = _compose(T, S)
                                if R not in paths[(x, y)][e]:
                                    paths[(x, y)][e][R] = add(tp, sp)
        return paths

    def loops(self, x: int) -> dict:
        """Distinct relations of bounded paths of n-trees from ``x`` to ``x``."""
        out = {}
        for e in sorted(self._paths.get((x, x), {})):
            for R, pat in self._paths[(x, x)][e].items():
                out.setdefault(R, pat)
        return out


def _graft_at_end(edge_pattern: Pattern, forest: Pattern) -> Pattern:
    """Rooted tree: edge from root ``z`` to ``w`` with ``forest`` hanging at ``w``."""
    grown = _graft(edge_pattern, edge_pattern.end, forest)
    return Pattern(grown.labels, grown.edges, edge_pattern.begin, edge_pattern.begin)


@dataclass
class Verdict:
    """Outcome of a bounded consistency check.

    ``status`` is ``"no-violation-up-to-bound"``, ``"violated"`` or
    ``"cap-exhausted"`` (the ``j`` sequence did not repeat within ``j_cap``).
    """

    status: str
    witness: dict | None = None
    pairs_checked: int = 0
    bound: dict = field(default_factory=dict)

    @property
    def violated(self) -> bool:
        return self.status == "violated"

    def to_dict(self) -> dict:
        out = {"status": self.status, "pairs_checked": self.pairs_checked, "bound": self.bound}
        if self.witness is not None:
            w = dict(self.witness)
            for key in ("p", "q"):
                if key in w:
                    w[key] = pattern_to_dict(w[key])
            out["witness"] = w
        return out


def _returns(a: int, P, Q, j_cap: int):
    """First ``j <= j_cap`` with ``a`` in ``{a} o (PQ)^j P``; ``None`` if the
    sequence cycles without it; ``-1`` if ``j_cap`` runs out first."""
    PQ = _compose(P, Q)
    state = 1 << a
    seen = set()
    for j in range(j_cap + 1):
        if _image(state, P) >> a & 1:
            return j
        if state in seen:
            return None
        seen.add(state)
        state = _image(state, PQ)
    return -1


def _check_loops(space: _PatternSpace, x: int, candidates, j_cap: int, extra: dict):
    loops = space.loops(x)
    checked = 0
    exhausted = None
    items = list(loops.items())
    for P, p in items:
        for Q, q in items:
            for a in candidates:
                checked += 1
                j = _returns(a, P, Q, j_cap)
                if j is None:
                    return checked, dict(extra, x=x, a=a, p=p, q=q), None
                if j == -1 and exhausted is None:
                    exhausted = dict(extra, x=x, a=a, p=p, q=q)
    return checked, None, exhausted


def check_ipq(instance: Instance, levels: LevelSets, n: int = 2, pattern_size_cap: int = 6,
              j_cap: int | None = None) -> Verdict:
    """Bounded falsifier for condition (IPQ)_n.

    All paths of ``n``-trees from ``x`` to ``x`` with at most
    ``pattern_size_cap`` edges are considered (any constraint, either
    direction); propagation at level ``ell`` keeps every vertex inside its level
    ``ell + 1`` set.
    """
    if pattern_size_cap < 1 or n < 2:
        raise ValueError("pattern_size_cap must be >= 1 and n >= 2")
    d = instance.domain_size
    j_cap = 2**d if j_cap is None else j_cap
    if j_cap < 1:
        raise ValueError("j_cap must be >= 1")
    bound = {"n": n, "pattern_size_cap": pattern_size_cap, "j_cap": j_cap}
    total = 0
    exhausted = None
    for ell in range(1, d + 1):
        allowed = [_mask(levels.level(x, ell + 1)) for x in range(instance.num_vars)]
        space = _PatternSpace(instance, allowed, n, pattern_size_cap)
        for x in range(instance.num_vars):
            checked, witness, ex = _check_loops(space, x, sorted(levels.level(x, ell)), j_cap, {"ell": ell})
            total += checked
            if witness is not None:
                return Verdict("violated", witness, total, bound)
            exhausted = exhausted or ex
    if exhausted is not None:
        return Verdict("cap-exhausted", exhausted, total, bound)
    return Verdict("no-violation-up-to-bound", None, total, bound)


def check_pq(instance: Instance, sets: Sequence, cap: int = 6, j_cap: int | None = None) -> Verdict:
    """Bounded falsifier for condition (PQ) in the given sets.

    Part one (arc consistency of every constraint in ``sets``) is checked
    exactly; part two uses path patterns of at most ``cap`` edges with plain
    propagation.
    """
    if cap < 1:
        raise ValueError("cap must be >= 1")
    d = instance.domain_size
    j_cap = 2**d if j_cap is None else j_cap
    sets = [frozenset(s) for s in sets]
    if len(sets) != instance.num_vars:
        raise CSPError("one set per variable is required")
    bound = {"pattern_size_cap": cap, "j_cap": j_cap}
    for i, c in enumerate(instance.constraints):
        for pos, x in enumerate(c.scope):
            if c.relation.projection(pos).tuples != frozenset((a,) for a in sets[x]):
                return Verdict("violated", {"arc_consistency": True, "constraint": i, "x": x}, 0, bound)
    full = [(1 << d) - 1] * instance.num_vars
    space = _PatternSpace(instance, full, 2, cap)
    total = 0
    exhausted = None
    for x in range(instance.num_vars):
        checked, witness, ex = _check_loops(space, x, sorted(sets[x]), j_cap, {})
        total += checked
        if witness is not None:
            return Verdict("violated", witness, total, bound)
        exhausted = exhausted or ex
    if exhausted is not None:
        return Verdict("cap-exhausted", exhausted, total, bound)
    return Verdict("no-violation-up-to-bound", None, total, bound)


def pattern_relation(p: Pattern, d: int, levels: LevelSets | None = None, ell: int | None = None) -> tuple:
    """Row masks of the relation induced by ``p`` (``{a} + p`` for each ``a``)."""
    rows = []
    for a in range(d):
        if levels is None:
            rows.append(_mask(propagate({a}, p, d)))
        else:
            rows.append(_mask(propagate_level({a}, p, ell, levels)))
    return tuple(rows)


# serialization ------------------------------------------------------------

def pattern_to_dict(p: Pattern) -> dict:
    return {
        "labels": list(p.labels),
        "begin": p.begin,
        "end": p.end,
        "edges": [
            {"tail": e.tail, "head": e.head, "constraint": e.constraint,
             "tuples": [list(t) for t in e.relation.sorted_tuples()]}
            for e in p.edges
        ],
        "domain_size": p.domain_size,
    }


def pattern_from_dict(data: dict) -> Pattern:
    d = data["domain_size"]
    edges = tuple(
        Edge(e["tail"], e["head"], Relation(2, frozenset(tuple(t) for t in e["tuples"]), d), e.get("constraint"))
        for e in data["edges"]
    )
    return Pattern(tuple(data["labels"]), edges, data["begin"], data["end"])
