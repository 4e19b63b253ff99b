"""Robust rounding for binary languages with a near-unanimity polymorphism.

After the SDP is solved, level sets are computed per variable, constraints are
removed in six passes (steps 0 to 5), and the survivor is solved exactly.
Everything random is drawn from one generator seeded by the caller, in a fixed
order (level shifts, coarse-grid offsets, then cut vectors).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .consistency import LevelSets, exact_solve
from .core import CSPError, Instance, check_assignment, evaluate, normalize_weights
from .sdp import SdpSolution, folded_relation, loss, preprocess1, solve_instance

log = logging.getLogger(__name__)

TIE_TOL = 1e-12


class PipelineContractViolation(RuntimeError):
    """The survivor of steps 0-5 turned out unsatisfiable."""

    def __init__(self, message: str, survivor: Instance, report=None):
        super().__init__(message)
        self.survivor = survivor
        self.report = report


class AlphaTooLarge(CSPError):
    pass


def k_for_domain(d: int) -> int:
    return 6 * d + 7


def alpha_cap(d: int, kappa: float) -> float:
    """Largest α for which the level-set gap conditions are guaranteed.

    These are ``c α^{3κ} < 1`` and ``|D| c² α^{6κ} < 1`` with
    ``c = (2|D|)^{|D|/2}``.
    """
    c = (2 * d) ** (d / 2)
    first = c ** (-1.0 / (3 * kappa))
    second = (d * c * c) ** (-1.0 / (6 * kappa))
    return min(first, second)


@dataclass
class PipelineParams:
    d: int
    alpha: float
    n: int = 2
    seed: int | None = None
    k: int = 0
    kappa: float = 0.0
    m0: int = 0
    m_ell: list = field(default_factory=list)
    spacing: list = field(default_factory=list)
    r_ell: list = field(default_factory=list)
    s_ell: list = field(default_factory=list)
    u_vectors: list = field(default_factory=list)

    @classmethod
    def draw(cls, d: int, alpha: float, dim: int, seed=None, n: int = 2, k: int | None = None) -> "PipelineParams":
        if n < 2:
            raise ValueError("n must be at least 2 (NU arity at least 3)")
        k = k_for_domain(d) if k is None else k
        kappa = 1.0 / k
        rng = np.random.default_rng(seed)
        levels = range(1, d + 1)
        spacing = [alpha ** ((6 * ell + 4) * kappa) for ell in levels]
        m0 = max(1, math.floor(alpha ** (-2 * kappa)))
        m_ell = [max(1, math.ceil(alpha ** (-(3 * ell + 1) * kappa))) for ell in levels]
        r_ell = [float(rng.uniform(0.0, sp)) for sp in spacing]
        s_ell = [int(rng.integers(0, m0)) for _ in levels]
        u_vectors = []
        for count in m_ell:
            g = rng.standard_normal((count, dim))
            u_vectors.append(g / np.linalg.norm(g, axis=1, keepdims=True))
        return cls(d, alpha, n, seed, k, kappa, m0, m_ell, spacing, r_ell, s_ell, u_vectors)

    def closeness(self, ell: int) -> float:
        return (2 * self.n - 3) * self.spacing[ell - 1]

    def summary(self) -> dict:
        return {
            "n": self.n, "k": self.k, "kappa": self.kappa, "alpha": self.alpha, "m0": self.m0,
            "m_ell": list(self.m_ell), "spacing": list(self.spacing),
            "r_ell": list(self.r_ell), "s_ell": list(self.s_ell), "seed": self.seed,
        }


# grid predicates -----------------------------------------------------------

def preceq(normsq_src: float, normsq_dst: float, r: float, spacing: float) -> bool:
    """No grid point ``r + j*spacing`` with ``dst < point <= src``."""
    if not spacing > 0:
        raise ValueError("spacing must be positive")
    j = math.floor((normsq_dst - r) / spacing) + 1
    return not (r + j * spacing <= normsq_src)


def preceq_weak(normsq_src: float, normsq_dst: float, r: float, s: int, m0: int, spacing: float) -> bool:
    """:func:`preceq` on the coarse grid ``r + (s + j*m0)*spacing``."""
    return preceq(normsq_src, normsq_dst, r + s * spacing, m0 * spacing)


# level sets ------------------------------------------------------------------

def _raw_levels(norms: np.ndarray, alpha: float, kappa: float, d: int):
    """Thresholded sets for one variable (``norms`` are plain, not squared)."""
    step = math.sqrt(2 * d)
    out = []
    for ell in range(1, d + 1):
        base = alpha ** (3 * ell * kappa)
        for i in range(d + 1):
            r = base * step**i
            if not np.any((norms >= r / step) & (norms < r)):
                break
        else:  # pragma: no cover - pigeonhole makes this unreachable
            raise AssertionError("no empty band among |D|+1 disjoint bands")
        out.append(frozenset(int(a) for a in np.flatnonzero(norms >= r)))
    return out


def preprocess2(sol: SdpSolution, alpha: float, kappa: float, strict: bool = True) -> LevelSets:
    """Level sets of heavy values per variable.

    With ``strict`` the call refuses α above :func:`alpha_cap`. Otherwise every
    level is widened to the union of the levels below it plus the heaviest
    value, which keeps the chain nested and nonempty; below the cap this changes
    nothing.
    """
    d = sol.domain_size
    if strict and alpha > alpha_cap(d, kappa):
        raise AlphaTooLarge(f"alpha={alpha:.3g} exceeds the admissible cap {alpha_cap(d, kappa):.3g}")
    norms_all = np.sqrt(np.clip(sol.norms_sq(), 0.0, None))
    chains = []
    for x in range(sol.num_vars):
        raw = _raw_levels(norms_all[x], alpha, kappa, d)
        heaviest = frozenset({_argmax_value(norms_all[x] ** 2)})
        chain, acc = [], frozenset()
        for s in raw:
            acc = acc | s
            if strict:
                chain.append(s)
            else:
                chain.append(acc | heaviest)
        chains.append(tuple(chain))
    return LevelSets(d, tuple(chains))


def level_set_conditions(sol: SdpSolution, levels: LevelSets, alpha: float, kappa: float) -> dict:
    """Check the four gap conditions the level sets are built to satisfy."""
    d = sol.domain_size
    c = (2 * d) ** (d / 2)
    normsq = np.clip(sol.norms_sq(), 0.0, None)
    norms = np.sqrt(normsq)
    ok = {"heavy_inside": True, "light_outside": True, "gap": True, "nested": True}
    for x in range(sol.num_vars):
        for ell in range(1, d + 1):
            s = levels.level(x, ell)
            t = alpha ** (3 * ell * kappa)
            rest = sorted(set(range(d)) - s)
            outside = float(np.sum(normsq[x, rest])) if rest else 0.0
            for a in range(d):
                if a in s:
                    ok["heavy_inside"] &= norms[x, a] >= t * (1 - 1e-12)
                    ok["gap"] &= normsq[x, a] >= 2 * outside - 1e-12
                else:
                    ok["light_outside"] &= norms[x, a] <= c * t * (1 + 1e-12)
            if not s <= levels.level(x, ell + 1):
                ok["nested"] = False
    return ok


def _argmax_value(values: np.ndarray) -> int:
    best = float(np.max(values))
    return int(np.flatnonzero(values >= best - TIE_TOL)[0])


# per-solution caches -----------------------------------------------------------

class _Geometry:
    """Subset norms and cut signs for every variable, subsets as bitmasks."""

    def __init__(self, sol: SdpSolution, params: PipelineParams):
        d = sol.domain_size
        self.d = d
        self.full = (1 << d) - 1
        self.ind = np.array([[(mask >> a) & 1 for a in range(d)] for mask in range(1 << d)], dtype=float)
        grams = np.einsum("xak,xbk->xab", sol.vectors, sol.vectors)
        self.grams = grams
        self.normsq = np.einsum("sa,xab,sb->xs", self.ind, grams, self.ind)
        signs = []
        for U in params.u_vectors:
            proj = sol.vectors @ U.T  # (n, d, m_ell)
            diff = np.einsum("sa,xam->xsm", 2 * self.ind - 1, proj)
            signs.append(diff >= 0)
        self.signs = signs

    def diff_normsq(self, x: int, A: int, B: int) -> float:
        """``|x_B - x_A|^2`` for arbitrary masks."""
        coef = self.ind[B] - self.ind[A]
        return float(coef @ self.grams[x] @ coef)

    def cut(self, ell: int, x: int, A: int, y: int, B: int) -> bool:
        return bool(np.any(self.signs[ell - 1][x, A] != self.signs[ell - 1][y, B]))


def _mask_of(values) -> int:
    m = 0
    for a in values:
        m |= 1 << a
    return m


def _propagate_mask(A: int, table: np.ndarray, src_level: int, dst_level: int) -> int:
    src = A & src_level
    out = 0
    for a in range(table.shape[0]):
        if src >> a & 1:
            for b in np.flatnonzero(table[a]):
                out |= 1 << int(b)
    return out & dst_level


def ell_cut(sol: SdpSolution, u_vectors: np.ndarray, x: int, A, y: int, B) -> bool:
    """Some ``u`` separates the signs of ``x_A - x_{D-A}`` and ``y_B - y_{D-B}``."""
    D = set(range(sol.domain_size))
    dx = sol.subset_vector(x, A) - sol.subset_vector(x, D - set(A))
    dy = sol.subset_vector(y, B) - sol.subset_vector(y, D - set(B))
    U = np.atleast_2d(u_vectors)
    return bool(np.any((U @ dx >= 0) != (U @ dy >= 0)))


# removal steps -------------------------------------------------------------------

@dataclass
class StepResult:
    step: int
    removed: list
    weight: float
    reasons: dict = field(default_factory=dict)  # constraint id -> (level, detail)


def _binary_pieces(instance: Instance, ids):
    for i in ids:
        (x, y), rel = folded_relation(instance.constraints[i])
        yield i, x, y, rel.table


def step0(instance: Instance, sol: SdpSolution, alpha: float, kappa: float, alive=None) -> StepResult:
    """Drop constraints whose SDP loss exceeds ``alpha^(1-kappa)``."""
    alive = range(instance.m) if alive is None else alive
    cutoff = alpha ** (1 - kappa)
    removed, reasons = [], {}
    for i in alive:
        value = loss(instance.constraints[i], sol)
        if value > cutoff:
            removed.append(i)
            reasons[i] = (0, f"loss {value:.3g} > {cutoff:.3g}")
    return StepResult(0, removed, _weight(instance, removed), reasons)


def step1_violation(geo: _Geometry, levels_masks, params: PipelineParams, x: int, y: int,
                    table: np.ndarray):
    """First ``(ell, A, direction)`` breaking the mass-preservation grid test, or ``None``."""
    for ell in range(1, params.d + 1):
        r, sp = params.r_ell[ell - 1], params.spacing[ell - 1]
        up = levels_masks[ell + 1]
        for src, dst, t, tag in ((x, y, table, "forward"), (y, x, table.T, "backward")):
            for A in range(geo.full + 1):
                B = _propagate_mask(A, t, up[src], up[dst])
                if not preceq(geo.normsq[src, A], geo.normsq[dst, B], r, sp):
                    return ell, A, tag
    return None


def step1(instance, sol, levels, params, alive=None, geo=None) -> StepResult:
    geo = geo or _Geometry(sol, params)
    masks = _level_masks(levels)
    alive = range(instance.m) if alive is None else alive
    removed, reasons = [], {}
    for i, x, y, table in _binary_pieces(instance, alive):
        hit = step1_violation(geo, masks, params, x, y, table)
        if hit is not None:
            removed.append(i)
            reasons[i] = (hit[0], f"A={hit[1]:b} {hit[2]}")
    return StepResult(1, removed, _weight(instance, removed), reasons)


def _submasks(mask: int):
    sub = mask
    while True:
        yield sub
        if sub == 0:
            return
        sub = (sub - 1) & mask


def step2_offenders(geo: _Geometry, levels, params: PipelineParams) -> dict:
    masks = _level_masks(levels)
    out = {}
    for ell in range(1, params.d + 1):
        r, sp = params.r_ell[ell - 1], params.spacing[ell - 1]
        s = params.s_ell[ell - 1]
        close = params.closeness(ell)
        for x in range(levels.num_vars):
            if x in out:
                continue
            top = masks[ell + 1][x]
            for B in _submasks(top):
                hit = False
                for A in _submasks(B):
                    if A == B:
                        continue
                    if geo.diff_normsq(x, A, B) <= close and not preceq_weak(
                            geo.normsq[x, B], geo.normsq[x, A], r, s, params.m0, sp):
                        out[x] = (ell, f"A={A:b} B={B:b}")
                        hit = True
                        break
                if hit:
                    break
    return out


def step3_offenders(geo: _Geometry, levels, params: PipelineParams) -> dict:
    masks = _level_masks(levels)
    out = {}
    for ell in range(1, params.d + 1):
        for x in range(levels.num_vars):
            if x in out:
                continue
            lv = masks[ell][x]
            sg = geo.signs[ell - 1][x]
            found = None
            for A in range(geo.full + 1):
                for B in range(A + 1, geo.full + 1):
                    if (A & lv) != (B & lv) and np.array_equal(sg[A], sg[B]):
                        found = (A, B)
                        break
                if found:
                    break
            if found:
                out[x] = (ell, f"A={found[0]:b} B={found[1]:b} not cut")
    return out


def step4_violation(geo: _Geometry, levels_masks, params: PipelineParams, x: int, y: int,
                    table: np.ndarray):
    for ell in range(1, params.d + 1):
        up = levels_masks[ell + 1]
        for src, dst, t, tag in ((x, y, table, "forward"), (y, x, table.T, "backward")):
            for A in range(geo.full + 1):
                B = _propagate_mask(A, t, up[src], up[dst])
                if geo.cut(ell, src, A, dst, B):
                    return ell, A, tag
    return None


def step5_offenders(geo: _Geometry, levels, params: PipelineParams) -> dict:
    masks = _level_masks(levels)
    out = {}
    for ell in range(1, params.d + 1):
        close = params.closeness(ell)
        for x in range(levels.num_vars):
            if x in out:
                continue
            subs = list(_submasks(masks[ell + 1][x]))
            found = None
            for i, A in enumerate(subs):
                for B in subs[i + 1:]:
                    if geo.diff_normsq(x, A, B) <= close and geo.cut(ell, x, A, x, B):
                        found = (A, B)
                        break
                if found:
                    break
            if found:
                out[x] = (ell, f"A={found[0]:b} B={found[1]:b} close but cut")
    return out


def _remove_variables(instance: Instance, alive, offenders: dict, step: int) -> StepResult:
    removed, reasons = [], {}
    for i in alive:
        scope = instance.constraints[i].scope
        hit = next((v for v in scope if v in offenders), None)
        if hit is not None:
            removed.append(i)
            ell, detail = offenders[hit]
            reasons[i] = (ell, f"variable {hit}: {detail}")
    return StepResult(step, removed, _weight(instance, removed), reasons)


def step2(instance, sol, levels, params, alive=None, geo=None) -> StepResult:
    geo = geo or _Geometry(sol, params)
    alive = range(instance.m) if alive is None else alive
    return _remove_variables(instance, alive, step2_offenders(geo, levels, params), 2)


def step3(instance, sol, levels, params, alive=None, geo=None) -> StepResult:
    geo = geo or _Geometry(sol, params)
    alive = range(instance.m) if alive is None else alive
    return _remove_variables(instance, alive, step3_offenders(geo, levels, params), 3)


def step4(instance, sol, levels, params, alive=None, geo=None) -> StepResult:
    geo = geo or _Geometry(sol, params)
    masks = _level_masks(levels)
    alive = range(instance.m) if alive is None else alive
    removed, reasons = [], {}
    for i, x, y, table in _binary_pieces(instance, alive):
        hit = step4_violation(geo, masks, params, x, y, table)
        if hit is not None:
            removed.append(i)
            reasons[i] = (hit[0], f"A={hit[1]:b} {hit[2]} cut")
    return StepResult(4, removed, _weight(instance, removed), reasons)


def step5(instance, sol, levels, params, alive=None, geo=None) -> StepResult:
    geo = geo or _Geometry(sol, params)
    alive = range(instance.m) if alive is None else alive
    return _remove_variables(instance, alive, step5_offenders(geo, levels, params), 5)


def _level_masks(levels: LevelSets) -> dict:
    d = levels.domain_size
    out = {}
    for ell in range(1, d + 2):
        out[ell] = [_mask_of(levels.level(x, ell)) for x in range(levels.num_vars)]
    return out


def _weight(instance: Instance, ids) -> float:
    return float(sum(instance.constraints[i].weight for i in ids))


# the pipeline --------------------------------------------------------------------

@dataclass
class RemovalReport:
    steps: list = field(default_factory=list)
    survivors: list = field(default_factory=list)
    assignment: np.ndarray | None = None
    path: str = "sdp"  # or "preprocess1"
    regime: str = "small"  # "large" when alpha exceeds the level-set cap
    epsilon_prime: float | None = None
    params: PipelineParams | None = None
    levels: LevelSets | None = None
    satisfied_weight: float | None = None
    alpha_cap: float | None = None

    @property
    def removed_weight(self) -> float:
        return float(sum(s.weight for s in self.steps))

    def step(self, index: int) -> StepResult:
        return next(s for s in self.steps if s.step == index)

    def to_dict(self) -> dict:
        out = {
            "path": self.path,
            "regime": self.regime,
            "epsilon_prime": self.epsilon_prime,
            "alpha_cap": self.alpha_cap,
            "satisfied_weight": self.satisfied_weight,
            "removed_weight": self.removed_weight,
            "survivors": list(self.survivors),
            "assignment": None if self.assignment is None else [int(v) for v in self.assignment],
            "steps": [
                {"step": s.step, "removed": list(s.removed), "weight": s.weight,
                 "reasons": {str(k): list(v) for k, v in s.reasons.items()}}
                for s in self.steps
            ],
        }
        if self.params is not None:
            out["params"] = self.params.summary()
        if self.levels is not None:
            out["levels"] = self.levels.to_list()
        return out


def positive_objective(instance: Instance, sol: SdpSolution) -> float:
    """``sum_C w_C max(loss(C), 0)``: the SDP value with solver noise clipped."""
    return float(sum(c.weight * max(loss(c, sol), 0.0) for c in instance.constraints))


def run_nu(instance: Instance, seed=None, n: int = 2, delta: float | None = None,
           sol: SdpSolution | None = None, k: int | None = None, use_preprocess1: bool = True):
    """Round a binary instance whose language has an NU polymorphism of arity ``n + 1``.

    Returns ``(assignment, report)``. Raises :class:`PipelineContractViolation`
    when the survivor of the removal steps is unsatisfiable.
    """
    if instance.max_arity > 2:
        raise CSPError("run_nu needs unary/binary constraints; binarize the instance first")
    inst = normalize_weights(instance) if instance.m else instance
    d = inst.domain_size
    report = RemovalReport()

    if use_preprocess1 and sol is None:
        pre = preprocess1(inst)
        if not pre.passed_through:
            report.path = "preprocess1"
            report.assignment = pre.assignment
            report.survivors = list(range(inst.m))
            report.satisfied_weight = evaluate(inst, pre.assignment)
            return pre.assignment, report

    if sol is None:
        sol = solve_instance(inst, delta)
    m = max(inst.m, 1)
    eps_prime = positive_objective(inst, sol)
    alpha = max(eps_prime, 1.0 / m**2)
    params = PipelineParams.draw(d, alpha, sol.dim, seed=seed, n=n, k=k)
    cap = alpha_cap(d, params.kappa)
    regime = "small" if alpha <= cap else "large"
    levels = preprocess2(sol, alpha, params.kappa, strict=(regime == "small"))
    report.regime, report.epsilon_prime, report.params = regime, eps_prime, params
    report.levels, report.alpha_cap = levels, cap

    geo = _Geometry(sol, params)
    alive = list(range(inst.m))
    passes = [
        lambda a: step0(inst, sol, alpha, params.kappa, a),
        lambda a: step1(inst, sol, levels, params, a, geo),
        lambda a: step2(inst, sol, levels, params, a, geo),
        lambda a: step3(inst, sol, levels, params, a, geo),
        lambda a: step4(inst, sol, levels, params, a, geo),
        lambda a: step5(inst, sol, levels, params, a, geo),
    ]
    for run_step in passes:
        res = run_step(alive)
        gone = set(res.removed)
        alive = [i for i in alive if i not in gone]
        report.steps.append(res)
    report.survivors = alive

    survivor = inst.with_constraints(inst.constraints[i] for i in alive)
    found = exact_solve(survivor)
    if found is None:
        raise PipelineContractViolation(
            f"survivor of steps 0-5 is unsatisfiable (regime {regime})", survivor, report)
    in_use = survivor.variables_in_use()
    normsq = sol.norms_sq()
    s = np.array([found[x] if x in in_use else _argmax_value(normsq[x]) for x in range(inst.num_vars)],
                 dtype=np.int64)
    check_assignment(inst, s)
    report.assignment = s
    report.satisfied_weight = evaluate(inst, s)
    return s, report
