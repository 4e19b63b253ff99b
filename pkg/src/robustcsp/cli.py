"""Command-line front end: ``robustcsp <command> ...``."""
from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path

from .algebra import classify_01all, is_2decomposable, profile_language
from .core import (
    BruteForceCapError,
    CSPError,
    Instance,
    Relation,
    dumps_instance,
    generate_planted,
    instance_from_dict,
    normalize_weights,
    opt_bruteforce,
)

SCHEMA = 1
EXIT_OK, EXIT_USAGE, EXIT_CONTRACT = 0, 1, 2


class UsageError(Exception):
    pass


class ContractViolation(Exception):
    def __init__(self, message: str, instance: Instance | None = None):
        super().__init__(message)
        self.instance = instance


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# I/O helpers --------------------------------------------------------------------

def _read_instance(path: str | None) -> Instance:
    if path is None:
        raise UsageError("--input is required")
    try:
        text = sys.stdin.read() if path == "-" else Path(path).read_text()
        return instance_from_dict(json.loads(text))
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc


def _write(text: str, path: str | None):
    if path is None or path == "-":
        sys.stdout.write(text if text.endswith("\n") else text + "\n")
    else:
        Path(path).write_text(text if text.endswith("\n") else text + "\n")


def _to_csv(data: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["key", "value"])
    for key, value in data.items():
        if isinstance(value, (dict, list)):
            value = json.dumps(value, sort_keys=True)
        w.writerow([key, value])
    return buf.getvalue()


def _emit(data: dict, fmt: str, path: str | None):
    data = {"schema": SCHEMA, **data}
    _write(_to_csv(data) if fmt == "csv" else json.dumps(data, sort_keys=True, indent=2), path)


def _dump_failure(instance: Instance | None, args) -> str | None:
    if instance is None:
        return None
    target = getattr(args, "dump", None) or "failing_instance.json"
    Path(target).write_text(dumps_instance(instance) + "\n")
    return target


# language files -----------------------------------------------------------------

class LanguageParseError(CSPError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


def parse_language(text: str) -> tuple[int, list[tuple[str, Relation]]]:
    """Parse a language file.

    The first directive is ``domain <size>``; every later line is
    ``[name:] t t ...`` where each tuple ``t`` is comma-separated values, e.g.
    ``neq: 0,1 1,0``. Blank lines and ``#`` comments are ignored. A JSON
    instance is also accepted, its language being the distinct relations used.
    """
    stripped = text.lstrip()
    if stripped.startswith("{"):
        try:
            inst = instance_from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise LanguageParseError(exc.lineno, exc.msg) from exc
        seen = []
        for c in inst.constraints:
            if c.relation not in seen:
                seen.append(c.relation)
        return inst.domain_size, [(f"R{i}", r) for i, r in enumerate(seen)]

    size = None
    relations = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if size is None:
            parts = line.split()
            if len(parts) != 2 or parts[0] != "domain":
                raise LanguageParseError(lineno, "expected 'domain <size>' before any relation")
            try:
                size = int(parts[1])
            except ValueError:
                raise LanguageParseError(lineno, f"domain size {parts[1]!r} is not an integer") from None
            if size < 1:
                raise LanguageParseError(lineno, "domain size must be positive")
            continue
        name, sep, body = line.partition(":")
        if not sep:
            name, body = f"R{len(relations)}", line
        tuples = []
        for token in body.split():
            try:
                t = tuple(int(v) for v in token.split(","))
            except ValueError:
                raise LanguageParseError(lineno, f"bad tuple {token!r}") from None
            if any(not 0 <= v < size for v in t):
                raise LanguageParseError(lineno, f"tuple {token!r} has a value outside 0..{size - 1}")
            tuples.append(t)
        if not tuples:
            raise LanguageParseError(lineno, f"relation {name.strip()!r} has no tuples")
        if len({len(t) for t in tuples}) != 1:
            raise LanguageParseError(lineno, "tuples of one relation must share an arity")
        relations.append((name.strip(), Relation(len(tuples[0]), frozenset(tuples), size)))
    if size is None:
        raise LanguageParseError(1, "missing 'domain <size>' directive")
    return size, relations


def _shape_dict(shape) -> dict | None:
    if shape is None:
        return None
    out = {"kind": shape.kind}
    for key in ("a", "b"):
        if getattr(shape, key) is not None:
            out[key] = getattr(shape, key)
    if shape.perm is not None:
        out["perm"] = list(shape.perm)
    for key in ("P", "Q"):
        if getattr(shape, key) is not None:
            out[key] = sorted(getattr(shape, key))
    if shape.base is not None:
        out["base"] = _shape_dict(shape.base)
    return out


def analyze_language(size: int, named: list[tuple[str, Relation]]) -> dict:
    profile = profile_language([r for _, r in named], size)
    rows = []
    for name, rel in named:
        row = {"name": name, "arity": rel.arity, "tuples": len(rel)}
        if rel.arity == 2:
            row["01all"] = _shape_dict(classify_01all(rel))
        if rel.arity >= 2:
            row["2decomposable"] = is_2decomposable(rel)
        rows.append(row)
    return {
        "domain_size": size,
        "has_nu": profile.has_nu,
        "has_majority": profile.has_majority,
        "has_dual_discriminator": profile.has_dual_discriminator,
        "max_arity": profile.max_arity,
        "majority": None if profile.majority is None else profile.majority.to_list(),
        "relations": rows,
    }


# commands -----------------------------------------------------------------------

def cmd_gen(args):
    from .experiment import language_family

    language = language_family(args.family)
    inst, planted = generate_planted(language, args.num_vars, args.num_constraints, args.eps, seed=args.seed)
    _write(dumps_instance(inst), args.out)
    if args.planted:
        Path(args.planted).write_text(json.dumps([int(v) for v in planted]) + "\n")


def cmd_solve_sdp(args):
    from .sdp import solution_to_dict, solve_instance

    inst = normalize_weights(_read_instance(args.input))
    sol = solve_instance(inst, args.delta)
    _emit(solution_to_dict(sol), "json", args.out)


def _round(args, pipeline: str):
    from .nu import PipelineContractViolation

    inst = _read_instance(args.input)
    try:
        if pipeline == "nu":
            from .nu import run_nu
            s, report = run_nu(inst, seed=args.seed, delta=args.delta)
        else:
            from .dd import run_dd
            s, report = run_dd(inst, seed=args.seed, delta=args.delta)
    except PipelineContractViolation as exc:
        raise ContractViolation(str(exc), inst) from exc
    except AssertionError as exc:
        raise ContractViolation(str(exc), inst) from exc
    data = report.to_dict()
    if args.report:
        _emit(data, "json", args.report)
    summary = {"pipeline": pipeline, "satisfied_weight": data["satisfied_weight"], "path": data["path"],
               "assignment": [int(v) for v in s]}
    _emit(summary, args.format, args.out)


def cmd_round_nu(args):
    _round(args, "nu")


def cmd_round_dd(args):
    _round(args, "dd")


def cmd_exact(args):
    from .consistency import exact_solve

    found = exact_solve(_read_instance(args.input))
    data = {"satisfiable": found is not None,
            "assignment": None if found is None else [int(v) for v in found]}
    _emit(data, args.format, args.out)


def cmd_check_ipq(args):
    from .consistency import LevelSets, arc_consistency, check_ipq, check_pq

    inst = _read_instance(args.input)
    if args.pq:
        sets = arc_consistency(inst)
        if sets is None:
            verdict = {"status": "violated", "witness": {"arc_consistency": "empty domain"}}
        else:
            verdict = check_pq(inst, sets, cap=args.cap, j_cap=args.jcap).to_dict()
    else:
        if args.levels:
            raw = json.loads(Path(args.levels).read_text())
            levels = LevelSets(inst.domain_size, tuple(tuple(chain) for chain in raw))
        else:
            levels = LevelSets.full(inst.num_vars, inst.domain_size)
        verdict = check_ipq(inst, levels, n=args.n, pattern_size_cap=args.cap, j_cap=args.jcap).to_dict()
    _emit(verdict, args.format, args.out)


def cmd_analyze(args):
    path = args.input or args.language
    if path is None:
        raise UsageError("a language file is required")
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc}") from exc
    try:
        size, named = parse_language(text)
    except LanguageParseError as exc:
        raise UsageError(f"{path}: {exc}") from exc
    _emit(analyze_language(size, named), args.format, args.out)


def oracle_report(inst: Instance, delta: float | None = None, cap: int | None = None) -> dict:
    from .sdp import TAU, solve_instance

    inst = normalize_weights(inst) if inst.m else inst
    m = max(inst.m, 1)
    delta = 1.0 / m**2 if delta is None else delta
    opt, witness = opt_bruteforce(inst) if cap is None else opt_bruteforce(inst, cap=cap)
    sol = solve_instance(inst, delta)
    sdp_opt = sol.objective_value
    upper = 1.0 - opt + delta
    return {
        "opt": opt,
        "min_unsatisfied": 1.0 - opt,
        "sdp_opt": sdp_opt,
        "gap": (1.0 - opt) - sdp_opt,
        "delta": delta,
        "witness": [int(v) for v in witness],
        "sandwich_ok": bool(-TAU <= sdp_opt <= upper + TAU),
    }


def cmd_oracle(args):
    try:
        data = oracle_report(_read_instance(args.input), args.delta, args.cap)
    except BruteForceCapError as exc:
        raise UsageError(str(exc)) from exc
    _emit(data, args.format, args.out)
    if not data["sandwich_ok"]:
        raise ContractViolation(f"SDP value {data['sdp_opt']} escapes [0, 1 - Opt + delta]")


def cmd_experiment(args):
    from .experiment import ExperimentConfig, ExperimentFailure, run_experiment

    config = ExperimentConfig(
        language=args.family, eps_grid=tuple(args.eps), trials=args.trials, master_seed=args.seed,
        pipeline=args.pipeline, num_vars=args.num_vars, num_constraints=args.num_constraints,
        delta=args.delta, workers=args.workers, output=args.out)
    try:
        report = run_experiment(config, include_timing=args.timings)
    except ExperimentFailure as exc:
        raise ContractViolation(str(exc), exc.instance) from exc
    _write(report.to_csv() if args.format == "csv" else report.to_json(), args.out)


# parser -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--input", help="input file (JSON instance unless stated otherwise)")
    common.add_argument("--out", help="output path (default: stdout)")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--delta", type=float, default=None, help="SDP additive error (default 1/m^2)")
    common.add_argument("--format", choices=("json", "csv"), default="json")
    common.add_argument("--dump", help="where to write the failing instance on a contract violation")

    parser = _Parser(prog="robustcsp", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", parents=[common], help="generate a planted instance")
    p.add_argument("--family", default="2sat", help="2sat, bool2, ug:<d> or 01all:<d>")
    p.add_argument("--num-vars", type=int, default=10)
    p.add_argument("--num-constraints", type=int, default=40)
    p.add_argument("--eps", type=float, default=0.0)
    p.add_argument("--planted", help="also write the planted assignment here")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("solve-sdp", parents=[common], help="solve the SDP relaxation")
    p.set_defaults(func=cmd_solve_sdp)

    for name, func, what in (("round-nu", cmd_round_nu, "near-unanimity"),
                             ("round-dd", cmd_round_dd, "dual-discriminator")):
        p = sub.add_parser(name, parents=[common], help=f"run the {what} rounding pipeline")
        p.add_argument("--report", help="write the full pipeline report here")
        p.set_defaults(func=func)

    p = sub.add_parser("exact", parents=[common], help="decide satisfiability exactly")
    p.set_defaults(func=cmd_exact)

    p = sub.add_parser("check-ipq", parents=[common], help="bounded search for consistency violations")
    p.add_argument("--cap", type=int, default=6, help="maximum pattern size in edges")
    p.add_argument("--jcap", type=int, default=None, help="repetition bound (default 2^|D|)")
    p.add_argument("-n", "--n", type=int, default=2, help="leaf bound of the trees")
    p.add_argument("--levels", help="JSON level sets, one list of |D| sets per variable")
    p.add_argument("--pq", action="store_true", help="check the path condition in arc-consistent sets")
    p.set_defaults(func=cmd_check_ipq)

    p = sub.add_parser("analyze", parents=[common], help="profile a constraint language")
    p.add_argument("language", nargs="?", help="language file (same as --input)")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("oracle", parents=[common], help="brute-force Opt against the SDP value")
    p.add_argument("--cap", type=int, default=None, help="brute-force assignment cap")
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("experiment", parents=[common], help="loss-scaling experiment")
    p.add_argument("--family", default="2sat")
    p.add_argument("--eps", type=float, nargs="+", default=[0.0025, 0.01, 0.04])
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--pipeline", choices=("nu", "dd", "both"), default="dd")
    p.add_argument("--num-vars", type=int, default=40)
    p.add_argument("--num-constraints", type=int, default=400)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--timings", action="store_true", help="include per-trial runtimes")
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args.func(args)
    except UsageError as exc:
        print(f"robustcsp: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ContractViolation as exc:
        where = _dump_failure(exc.instance, args)
        print(f"robustcsp: contract violation: {exc}", file=sys.stderr)
        if where:
            print(f"robustcsp: failing instance written to {where}", file=sys.stderr)
        return EXIT_CONTRACT
    except CSPError as exc:
        print(f"robustcsp: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except RuntimeError as exc:  # solver failures
        print(f"robustcsp: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
