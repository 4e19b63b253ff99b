"""Seeded loss-scaling experiments over planted instance families."""
from __future__ import annotations

import csv
import io
import itertools
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from .algebra import classify_01all, fan_relation, permutation_relation
from .core import CSPError, Instance, Relation, dumps_instance, generate_planted
from .nu import PipelineContractViolation

SCHEMA = 1


# language families --------------------------------------------------------------

def _all_binary(size: int):
    cells = [(a, b) for a in range(size) for b in range(size)]
    for bits in range(1, 2 ** len(cells) - 1):
        yield Relation(2, frozenset(t for i, t in enumerate(cells) if bits >> i & 1), size)


def language_family(name: str) -> list[Relation]:
    """Relations for a named family.

    ``2sat`` are the four Boolean clauses, ``ug:<d>`` all permutation graphs on d
    values, ``bool2`` every nonempty proper binary Boolean relation (majority
    closed), and ``01all:<d>`` every nonempty proper binary relation preserved by the
    dual discriminator on d values.
    """
    head, _, arg = name.partition(":")
    if head == "2sat" and not arg:
        return [fan_relation(a, b, 2) for a in range(2) for b in range(2)]
    if head == "bool2" and not arg:
        return list(_all_binary(2))
    if head in ("ug", "01all"):
        try:
            d = int(arg)
        except ValueError:
            raise CSPError(f"family {name!r} needs a domain size, e.g. {head}:3") from None
        if d < 2:
            raise CSPError("domain size must be at least 2")
        if head == "ug":
            return [permutation_relation(p) for p in itertools.permutations(range(d))]
        if d > 3:
            raise CSPError("01all families are enumerated only for d <= 3")
        return [r for r in _all_binary(d) if classify_01all(r) is not None]
    raise CSPError(f"unknown language family {name!r}")


# configuration and results ------------------------------------------------------

_PIPELINES = ("nu", "dd")


@dataclass
class ExperimentConfig:
    language: str = "2sat"
    eps_grid: tuple = (0.0025, 0.01, 0.04)
    trials: int = 10
    master_seed: int = 0
    pipeline: str = "dd"  # nu, dd or both
    num_vars: int = 40
    num_constraints: int = 400
    delta: float | None = None
    workers: int = 1
    output: str | None = None

    def __post_init__(self):
        self.eps_grid = tuple(float(e) for e in self.eps_grid)
        # eps = 0 is allowed as the trivial row
        if not self.eps_grid or any(not 0 <= e < 1 for e in self.eps_grid):
            raise CSPError("eps values must lie in [0, 1)")
        if self.trials < 1:
            raise CSPError("trials must be at least 1")
        if self.pipeline not in _PIPELINES + ("both",):
            raise CSPError(f"pipeline must be nu, dd or both, not {self.pipeline!r}")
        if self.workers < 1:
            raise CSPError("workers must be at least 1")
        language_family(self.language)

    @property
    def pipelines(self) -> tuple:
        return _PIPELINES if self.pipeline == "both" else (self.pipeline,)


@dataclass
class TrialResult:
    pipeline: str
    eps: float
    eps_index: int
    trial: int
    loss: float
    path: str
    removed: dict = field(default_factory=dict)
    runtime: float = 0.0


class ExperimentFailure(RuntimeError):
    """A pipeline broke its contract during an experiment; carries the instance."""

    def __init__(self, message: str, instance: Instance, cause: Exception):
        super().__init__(message)
        self.instance = instance
        self.cause = cause

    def dump(self) -> str:
        return dumps_instance(self.instance)


def _seeds(master: int, eps_index: int, trial: int) -> tuple[int, int]:
    ss = np.random.SeedSequence([master, eps_index, trial])
    gen, run = ss.spawn(2)
    return int(gen.generate_state(1)[0]), int(run.generate_state(1)[0])


def _removed(pipeline: str, report) -> dict:
    if pipeline == "nu":
        return {str(s.step): s.weight for s in report.steps}
    if report.path != "sdp":
        return {}
    return {"C_v": report.w_violated, "C_bad": report.w_bad, "I1": report.i1_loss, "I2": report.i2_loss}


def run_trial(config: ExperimentConfig, pipeline: str, eps_index: int, trial: int) -> TrialResult:
    from .dd import run_dd
    from .nu import run_nu

    eps = config.eps_grid[eps_index]
    gen_seed, run_seed = _seeds(config.master_seed, eps_index, trial)
    language = language_family(config.language)
    inst, _ = generate_planted(language, config.num_vars, config.num_constraints, eps, seed=gen_seed)
    runner = run_nu if pipeline == "nu" else run_dd
    t0 = time.perf_counter()
    try:
        _, report = runner(inst, seed=run_seed, delta=config.delta)
    except (PipelineContractViolation, AssertionError) as exc:
        raise ExperimentFailure(
            f"{pipeline} pipeline failed at eps={eps}, trial={trial}: {exc}", inst, exc) from exc
    elapsed = time.perf_counter() - t0
    loss = min(max(1.0 - report.satisfied_weight, 0.0), 1.0)
    return TrialResult(pipeline, eps, eps_index, trial, loss, report.path, _removed(pipeline, report), elapsed)


# aggregation --------------------------------------------------------------------

@dataclass
class SlopeFit:
    slope: float | None
    intercept: float | None
    r_squared: float | None
    points: int


def fit_slope(eps, losses) -> SlopeFit:
    """Least-squares fit of log(loss) against log(eps) over the positive points."""
    pts = [(math.log(e), math.log(v)) for e, v in zip(eps, losses) if e > 0 and v > 0]
    if len(pts) < 2 or len({p[0] for p in pts}) < 2:
        return SlopeFit(None, None, None, len(pts))
    xs, ys = zip(*pts)
    fit = stats.linregress(xs, ys)
    r2 = float(fit.rvalue**2) if np.isfinite(fit.rvalue) else None
    return SlopeFit(float(fit.slope), float(fit.intercept), r2, len(pts))


@dataclass
class ExperimentReport:
    config: ExperimentConfig
    trials: list
    include_timing: bool = False

    def rows(self, pipeline: str):
        return [t for t in self.trials if t.pipeline == pipeline]

    def median_losses(self, pipeline: str) -> list[tuple[float, float]]:
        out = []
        for i, eps in enumerate(self.config.eps_grid):
            losses = [t.loss for t in self.rows(pipeline) if t.eps_index == i]
            out.append((eps, float(np.median(losses))))
        return out

    def fit(self, pipeline: str) -> SlopeFit:
        eps, med = zip(*self.median_losses(pipeline))
        return fit_slope(eps, med)

    def aggregate(self) -> dict:
        out = {}
        for p in self.config.pipelines:
            fit = self.fit(p)
            out[p] = {
                "median_loss": [{"eps": e, "median_loss": v} for e, v in self.median_losses(p)],
                "slope": fit.slope,
                "intercept": fit.intercept,
                "r_squared": fit.r_squared,
                "fit_points": fit.points,
            }
        return out

    def to_dict(self) -> dict:
        trials = []
        for t in self.trials:
            row = asdict(t)
            if not self.include_timing:
                row.pop("runtime")
            trials.append(row)
        cfg = asdict(self.config)
        cfg["eps_grid"] = list(cfg["eps_grid"])
        cfg.pop("workers")
        cfg.pop("output")
        return {"schema": SCHEMA, "config": cfg, "trials": trials, "aggregate": self.aggregate()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["pipeline", "eps", "median_loss", "trials", "slope", "r_squared"])
        for p, agg in self.aggregate().items():
            for row in agg["median_loss"]:
                n = sum(1 for t in self.rows(p) if t.eps == row["eps"])
                w.writerow([p, repr(row["eps"]), repr(row["median_loss"]), n,
                            "" if agg["slope"] is None else repr(agg["slope"]),
                            "" if agg["r_squared"] is None else repr(agg["r_squared"])])
        return buf.getvalue()


def run_experiment(config: ExperimentConfig, include_timing: bool = False) -> ExperimentReport:
    jobs = [(p, i, t) for p in config.pipelines for i in range(len(config.eps_grid))
            for t in range(config.trials)]
    if config.workers == 1:
        results = [run_trial(config, *job) for job in jobs]
    else:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(lambda job: run_trial(config, *job), jobs))
    # sorted merge keeps the report independent of completion order
    results.sort(key=lambda t: (t.pipeline, t.eps_index, t.trial))
    return ExperimentReport(config, results, include_timing)
