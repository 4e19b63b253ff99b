"""Standard SDP relaxation of a binary weighted CSP (minimisation form).

The relaxation has one vector ``x_a`` per variable/value pair and a unit vector
``v0``. It is solved over the Gram matrix with an interior-point solver and the
vectors are recovered by eigendecomposition.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from itertools import product

import cvxpy as cp
import numpy as np
import scipy.sparse as sps

from .core import Constraint, CSPError, Instance, Relation

log = logging.getLogger(__name__)

TAU = 1e-6
EIG_CLAMP = 1e-10
ITERATION_CAP = 10_000


class SolverFailure(RuntimeError):
    def __init__(self, message: str, best=None):
        super().__init__(message)
        self.best = best


def folded_relation(c: Constraint) -> tuple[tuple[int, int], Relation]:
    """Scope and relation of ``c`` seen as a binary constraint."""
    if c.arity == 2:
        return c.scope, c.relation
    if c.arity == 1:
        x = c.scope[0]
        rel = Relation(2, frozenset((a, a) for (a,) in c.relation.tuples), c.relation.size)
        return (x, x), rel
    raise CSPError(f"the SDP relaxation needs arity <= 2, got {c.arity}")


def excluded_pairs(relation: Relation) -> list[tuple[int, int]]:
    d = relation.size
    return [(a, b) for a, b in product(range(d), repeat=2) if (a, b) not in relation.tuples]


@dataclass
class SdpProblem:
    instance: Instance
    dim: int
    terms: list  # (constraint index, (x, y), excluded pairs)

    def index(self, x: int, a: int) -> int:
        return 1 + x * self.instance.domain_size + a


def build_relaxation(instance: Instance) -> SdpProblem:
    terms = []
    for i, c in enumerate(instance.constraints):
        scope, rel = folded_relation(c)
        terms.append((i, scope, excluded_pairs(rel)))
    return SdpProblem(instance, instance.num_vars * instance.domain_size + 1, terms)


@dataclass
class SdpSolution:
    """Vectors ``vectors[x, a]`` and ``v0``, all in ``R^dim``."""

    vectors: np.ndarray  # (num_vars, d, dim)
    v0: np.ndarray
    objective_value: float = 0.0
    feasibility_residual: float = 0.0
    status: str = "optimal"
    residuals: dict = field(default_factory=dict)

    @property
    def num_vars(self) -> int:
        return self.vectors.shape[0]

    @property
    def domain_size(self) -> int:
        return self.vectors.shape[1]

    @property
    def dim(self) -> int:
        return self.v0.shape[0]

    def norms_sq(self) -> np.ndarray:
        return np.einsum("xak,xak->xa", self.vectors, self.vectors)

    def pair_products(self, x: int, y: int) -> np.ndarray:
        """Matrix ``P[a, b] = x_a . y_b``."""
        return self.vectors[x] @ self.vectors[y].T

    def subset_vector(self, x: int, A) -> np.ndarray:
        idx = sorted(A)
        if not idx:
            return np.zeros(self.dim)
        return self.vectors[x, idx].sum(axis=0)

    def flat(self) -> np.ndarray:
        return self.vectors.reshape(-1, self.dim)

    @classmethod
    def from_assignment(cls, instance: Instance, s, dim: int | None = None) -> "SdpSolution":
        """Integral solution: ``x_{s(x)} = v0`` and all other vectors zero."""
        n, d = instance.num_vars, instance.domain_size
        dim = dim or n * d + 1
        v0 = np.zeros(dim)
        v0[0] = 1.0
        vectors = np.zeros((n, d, dim))
        for x in range(n):
            vectors[x, int(s[x])] = v0
        sol = cls(vectors, v0)
        sol.objective_value = objective(instance, sol)
        return sol


def loss(c: Constraint, sol: SdpSolution) -> float:
    """SDP probability mass the solution puts on pairs outside the relation."""
    (x, y), rel = folded_relation(c)
    products = sol.pair_products(x, y)
    mask = ~rel.table
    return float(products[mask].sum())


def objective(instance: Instance, sol: SdpSolution) -> float:
    return float(sum(c.weight * loss(c, sol) for c in instance.constraints))


class _Basis:
    """Reduced coordinates: ``v0`` and ``x_a`` for ``a < d-1``.

    The last value of each variable is ``x_{d-1} = v0 - sum_{a<d-1} x_a``, so
    the sum constraint holds by construction and the Gram matrix is smaller.
    """

    def __init__(self, n: int, d: int):
        self.n, self.d = n, d
        self.size = 1 + n * (d - 1)

    def coeffs(self, x: int, a: int) -> dict:
        if a < self.d - 1:
            return {1 + x * (self.d - 1) + a: 1.0}
        out = {0: 1.0}
        for b in range(self.d - 1):
            out[1 + x * (self.d - 1) + b] = -1.0
        return out

    def functional(self, x: int, a: int, y: int, b: int, scale: float = 1.0) -> dict:
        """``x_a . y_b`` as weights on column-major ``vec(G)``."""
        N = self.size
        out = {}
        for i, ci in self.coeffs(x, a).items():
            for j, cj in self.coeffs(y, b).items():
                out[i + j * N] = out.get(i + j * N, 0.0) + scale * ci * cj
        return out

    def vectors(self, V: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Full family from the reduced vectors (rows of ``V``)."""
        v0 = V[0]
        red = V[1:].reshape(self.n, self.d - 1, -1)
        last = v0[None, :] - red.sum(axis=1)
        return np.concatenate([red, last[:, None, :]], axis=1), v0


def _rows(functionals: list[dict], N: int) -> sps.csr_matrix:
    rows, cols, vals = [], [], []
    for r, f in enumerate(functionals):
        for k, v in f.items():
            rows.append(r)
            cols.append(k)
            vals.append(v)
    return sps.csr_matrix((vals, (rows, cols)), shape=(len(functionals), N * N))


def _solve_gram(problem: SdpProblem, tol: float) -> tuple[np.ndarray, str, "_Basis"]:
    inst = problem.instance
    n, d = inst.num_vars, inst.domain_size
    basis = _Basis(n, d)
    N = basis.size
    G = cp.Variable((N, N), PSD=True)
    g = cp.vec(G, order="F")
    cons = [G[0, 0] == 1]
    ortho = [basis.functional(x, a, x, b) for x in range(n) for a in range(d) for b in range(a + 1, d)]
    if ortho:
        cons.append(_rows(ortho, N) @ g == 0)
    cross = [basis.functional(x, a, y, b) for x in range(n) for y in range(x + 1, n)
             for a in range(d) for b in range(d)]
    if cross:
        cons.append(_rows(cross, N) @ g >= 0)
    cost = {}
    for ci, (x, y), pairs in problem.terms:
        w = inst.constraints[ci].weight
        for a, b in pairs:
            for k, v in basis.functional(x, a, y, b, w).items():
                cost[k] = cost.get(k, 0.0) + v
    c = np.zeros(N * N)
    for k, v in cost.items():
        c[k] = v
    prob = cp.Problem(cp.Minimize(c @ g), cons)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UserWarning)
            prob.solve(solver="CLARABEL", tol_gap_abs=tol, tol_gap_rel=tol, tol_feas=tol,
                       max_iter=ITERATION_CAP)
    except cp.error.SolverError as exc:
        raise SolverFailure(str(exc), best=G.value) from exc
    return G.value, prob.status, basis


def vectors_from_gram(G: np.ndarray, basis: "_Basis", dim: int) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-factor the reduced Gram matrix and rebuild the full family in ``R^dim``."""
    G = (G + G.T) / 2
    lam, U = np.linalg.eigh(G)
    lam = np.where(lam < EIG_CLAMP, 0.0, lam)
    V = U * np.sqrt(lam)
    if V.shape[1] < dim:
        V = np.concatenate([V, np.zeros((V.shape[0], dim - V.shape[1]))], axis=1)
    return basis.vectors(V)


def solve(problem: SdpProblem, delta: float | None = None) -> SdpSolution:
    """Solve the relaxation to within ``delta`` of the optimum (default ``1/m^2``)."""
    inst = problem.instance
    if delta is None:
        delta = 1.0 / max(inst.m, 1) ** 2
    if not delta > 0:
        raise ValueError("delta must be positive")
    n, d = inst.num_vars, inst.domain_size
    if n == 0:
        v0 = np.zeros(1)
        v0[0] = 1.0
        return SdpSolution(np.zeros((0, d, 1)), v0)
    tol = min(1e-8, delta / 10)
    G, status, basis = _solve_gram(problem, tol)
    if status not in ("optimal", "optimal_inaccurate") or G is None:
        raise SolverFailure(f"SDP solver finished with status {status!r}", best=G)
    vectors, v0 = vectors_from_gram(G, basis, problem.dim)
    scale = np.linalg.norm(v0)  # unit v0 without disturbing the sums
    vectors, v0 = vectors / scale, v0 / scale
    sol = SdpSolution(vectors, v0, status=status)
    sol.objective_value = objective(inst, sol)
    sol.residuals = validate_feasibility(sol)
    sol.feasibility_residual = max(sol.residuals.values())
    if status == "optimal_inaccurate":
        # interior point stalls near rank-deficient optima; the gap is far below delta
        log.debug("SDP solver reported an inaccurate optimum; residual %.2e", sol.feasibility_residual)
    return sol


def solve_instance(instance: Instance, delta: float | None = None) -> SdpSolution:
    return solve(build_relaxation(instance), delta)


def validate_feasibility(sol: SdpSolution, tol: float | None = None) -> dict:
    """Largest violation of each SDP constraint and derived identity.

    The first four keys are the relaxation constraints; the last four are
    identities every feasible solution satisfies:

    * ``norm_equals_v0_product``: ``|x_a|^2 = x_a . v0``
    * ``product_below_norm``: ``x_a . y_b <= |x_a|^2``
    * ``norm_gap_below_distance``: ``|x_a|^2 - |y_b|^2 <= |x_a - y_b|^2``
    * ``complements_nonnegative``: ``(v0 - x_a) . (v0 - y_b) >= 0``

    When ``tol`` is given the report also carries ``ok``.
    """
    n, d = sol.num_vars, sol.domain_size
    W = sol.flat()
    G = W @ W.T
    norms = np.diag(G).reshape(n, d)
    with_v0 = (W @ sol.v0).reshape(n, d)
    var_of = np.repeat(np.arange(n), d)
    same_var = var_of[:, None] == var_of[None, :]
    off_diag = ~np.eye(n * d, dtype=bool)

    rep = {}
    rep["nonnegative"] = float(max(0.0, -G.min())) if G.size else 0.0
    rep["orthogonal"] = float(np.abs(G[same_var & off_diag]).max()) if d > 1 and n else 0.0
    sums = sol.vectors.sum(axis=1) - sol.v0[None, :]
    rep["sum_to_v0"] = float(np.linalg.norm(sums, axis=1).max()) if n else 0.0
    rep["unit_v0"] = float(abs(np.linalg.norm(sol.v0) - 1.0))
    rep["norm_equals_v0_product"] = float(np.abs(norms - with_v0).max()) if n else 0.0
    flat_norms = norms.reshape(-1)
    rep["product_below_norm"] = float(max(0.0, (G - flat_norms[:, None]).max())) if n else 0.0
    if n:
        dist = flat_norms[:, None] + flat_norms[None, :] - 2 * G
        rep["norm_gap_below_distance"] = float(max(0.0, (flat_norms[:, None] - flat_norms[None, :] - dist).max()))
        flat_v0 = with_v0.reshape(-1)
        comp = 1.0 - flat_v0[:, None] - flat_v0[None, :] + G
        rep["complements_nonnegative"] = float(max(0.0, -comp.min()))
    else:
        rep["norm_gap_below_distance"] = rep["complements_nonnegative"] = 0.0
    if tol is not None:
        rep["ok"] = all(v <= tol for k, v in rep.items())
    return rep


@dataclass
class Preprocess1Result:
    assignment: np.ndarray | None
    prefix_length: int
    prefix_weight: float

    @property
    def passed_through(self) -> bool:
        return self.assignment is None


def preprocess1(instance: Instance, exact_solver=None) -> Preprocess1Result:
    """Early exit on a heavy satisfiable prefix.

    Constraints are sorted by weight (descending, stable), the longest
    satisfiable prefix is found by bisection, and its assignment is returned
    when the prefix carries weight at least ``1 - 1/m``.
    """
    if exact_solver is None:
        from .consistency import exact_solve as exact_solver
    m = instance.m
    if m == 0:
        return Preprocess1Result(np.zeros(instance.num_vars, dtype=np.int64), 0, 0.0)
    order = sorted(range(m), key=lambda i: -instance.constraints[i].weight)
    ranked = [instance.constraints[i] for i in order]

    def prefix(j):
        return instance.with_constraints(ranked[:j])

    lo, hi = 0, m  # prefix lo is satisfiable
    best = exact_solver(prefix(0))
    full = exact_solver(prefix(m))
    if full is not None:
        lo, best = m, full
    else:
        while hi - lo > 1:
            mid = (lo + hi) // 2
            s = exact_solver(prefix(mid))
            if s is None:
                hi = mid
            else:
                lo, best = mid, s
    weight = float(sum(c.weight for c in ranked[:lo]))
    if weight >= 1.0 - 1.0 / m - 1e-12:
        return Preprocess1Result(np.asarray(best, dtype=np.int64), lo, weight)
    return Preprocess1Result(None, lo, weight)


def solution_to_dict(sol: SdpSolution) -> dict:
    return {
        "v0": sol.v0.tolist(),
        "vectors": sol.vectors.tolist(),
        "objective_value": sol.objective_value,
        "status": sol.status,
        "residuals": sol.residuals,
    }


def solution_from_dict(data: dict) -> SdpSolution:
    vectors = np.asarray(data["vectors"], dtype=float)
    v0 = np.asarray(data["v0"], dtype=float)
    return SdpSolution(vectors, v0, float(data.get("objective_value", 0.0)),
                       status=data.get("status", "optimal"), residuals=dict(data.get("residuals", {})))
