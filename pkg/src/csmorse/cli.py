"""Command-line entry point: ``csmorse analyze | fibers | check-derivatives``."""

from __future__ import annotations

import argparse
import json
import shutil
import sys
from pathlib import Path

from .nonsmooth import HandleBoundError
from .report import (
    SCHEMA_PATH,
    InternalConsistencyError,
    ValidationFailure,
    analyze_scenario,
    check_derivatives,
    dumps,
    fibers_scenario,
    level_filename,
)
from .scenario import ScenarioError, fixture_names, load_scenario
from .strata import FiberError, FiberRangeError, write_point_cloud

EXIT_OK, EXIT_VALIDATION, EXIT_INTERNAL = 0, 2, 3


def _fail(code: int, payload: dict) -> int:
    sys.stderr.write(json.dumps(payload, sort_keys=True) + "\n")
    return code


def _levels(s: str):
    try:
        return [float(p) for p in s.split(",") if p.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"levels must be comma-separated numbers, got {s!r}")


def _positive_int(s: str) -> int:
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="csmorse",
        description="Critical points, strata and fibers of max/min selections on manifolds.",
        epilog="Built-in fixtures: " + ", ".join(fixture_names()),
    )
    sub = p.add_subparsers(dest="command", required=True)

    a = sub.add_parser("analyze", help="full stratification and critical point report")
    a.add_argument("file", help="scenario TOML file or built-in fixture name")
    a.add_argument("--out", default=".", help="output directory (default: current)")
    a.add_argument("--seed", type=int, help="override the scenario seed")
    a.add_argument("--jobs", type=_positive_int, default=1, help="worker processes for the search")

    fb = sub.add_parser("fibers", help="sample level sets and count their components")
    fb.add_argument("file")
    g = fb.add_mutually_exclusive_group(required=True)
    g.add_argument("--levels", type=_levels, help="comma-separated levels, e.g. 0,0.6,0.8")
    g.add_argument("--grid", type=_positive_int, help="k levels spread over the regular intervals")
    fb.add_argument("--out", default=".")
    fb.add_argument("--seed", type=int)
    fb.add_argument("--samples", type=_positive_int, help="points per fiber")
    fb.add_argument("--jobs", type=_positive_int, default=1)

    d = sub.add_parser("check-derivatives", help="compare AD derivatives with finite differences")
    d.add_argument("file")
    d.add_argument("--seed", type=int)
    d.add_argument("--json", action="store_true", help="print the table as JSON")
    return p


def _load(args):
    sc = load_scenario(args.file)
    if getattr(args, "seed", None) is not None:
        if args.seed < 0:
            raise ScenarioError("seed must be non-negative", field="seed")
        sc = sc.with_seed(args.seed)
    return sc


def cmd_analyze(args) -> int:
    sc = _load(args)
    report = analyze_scenario(sc, jobs=args.jobs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(dumps(report))
    shutil.copyfile(SCHEMA_PATH, out / "schema.json")
    cps = report["critical_points"]
    tri = report["trisection"]
    verdict = f"({tri['g']},{tri['k']})" if tri["applies"] else "n/a"
    print(f"{sc.name}: {len(cps)} critical points, {len(report['degenerate_sets'])} degenerate sets, "
          f"cs_morse={str(report['cs_morse']).lower()}, trisection {verdict} -> {out / 'report.json'}")
    return EXIT_OK


def cmd_fibers(args) -> int:
    sc = _load(args)
    summary, clouds = fibers_scenario(sc, levels=args.levels, grid=args.grid, samples=args.samples, jobs=args.jobs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for t, (X, labels) in clouds.items():
        write_point_cloud(out / level_filename(t), X, labels, t)
    text = dumps(summary)
    (out / "fibers.json").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_check_derivatives(args) -> int:
    sc = _load(args)
    table = check_derivatives(sc)
    if args.json:
        sys.stdout.write(dumps(table))
    else:
        print(f"{'expression':<16} {'grad err':>10} {'hess err':>10}  result  source")
        for r in table["rows"]:
            note = f"  ({'; '.join(r['warnings'])})" if r["warnings"] else ""
            print(f"{r['expression']:<16} {r['gradient_error']:>10.2e} {r['hessian_error']:>10.2e}  "
                  f"{'pass' if r['pass'] else 'FAIL':<6}  {r['source']}{note}")
    if not table["pass"]:
        return _fail(EXIT_INTERNAL, {"error": "derivative check failed", "tolerance": table["tolerance"],
                                     "failed": [r["expression"] for r in table["rows"] if not r["pass"]]})
    return EXIT_OK


COMMANDS = {"analyze": cmd_analyze, "fibers": cmd_fibers, "check-derivatives": cmd_check_derivatives}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ScenarioError as e:
        return _fail(EXIT_VALIDATION, e.to_json())
    except ValidationFailure as e:
        return _fail(EXIT_VALIDATION, {"error": "validation", "message": str(e), "details": e.details})
    except FiberRangeError as e:
        return _fail(EXIT_VALIDATION, {"error": "range", "message": str(e)})
    except (InternalConsistencyError, HandleBoundError) as e:
        return _fail(EXIT_INTERNAL, {"error": "internal consistency", "message": str(e)})
    except (FiberError, ValueError, RuntimeError, ArithmeticError) as e:
        return _fail(EXIT_INTERNAL, {"error": type(e).__name__, "message": str(e)})


if __name__ == "__main__":
    sys.exit(main())
