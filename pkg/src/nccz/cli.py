"""Command line entry point: ``nccz <group> <command> [options]``.

Exit codes: 0 when every exact suite passes, 1 when one fails, 2 for
configuration or usage errors, 130 after an interrupt (partial report written).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from typing import List, Optional

from . import harness
from .cubes import CubeAxiomViolation, build_cube_system
from .space import build_torus_space, measure_doubling_and_geo, quarter_scale
from .weights import WEIGHT_KINDS, ap_characteristic, make_weight, weight_to_csv

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_INTERRUPT = 0, 1, 2, 130


class _Partial:
    """Holds the report under construction so an interrupt can still flush it."""

    def __init__(self, out_dir: Optional[str]):
        self.out_dir = out_dir
        self.report: Optional[dict] = None


def _space_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dim", type=int, default=1)
    p.add_argument("--side", type=int, default=16)
    p.add_argument("--metric", default="linf_word", choices=("linf_word", "l1_word"))


def _emit(obj: dict, out: Optional[str]) -> None:
    text = json.dumps(obj, sort_keys=True, indent=1)
    if out:
        with open(out, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)


def _write_csv(path: str, header: List[str], rows: List[list]) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(header)
        out.writerows(rows)


def _write_xy(path: str, xs, ys, labels=("x", "y")) -> None:
    with open(path, "w") as fh:
        fh.write(f"# {labels[0]} {labels[1]}\n")
        for x, y in zip(xs, ys):
            fh.write(f"{x!r} {y!r}\n")


def _suite_rows(report: dict) -> List[list]:
    rows = []
    for name, suite in sorted(report.get("suites", {}).items()):
        for key, val in sorted(suite.get("max", {}).items()):
            rows.append([name, suite.get("kind"), suite.get("pass"), suite.get("instances"), key, val])
    return rows


def _write_outputs(report: dict, out_dir: Optional[str]) -> None:
    if out_dir is None:
        print(harness.report_json(report))
        return
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "report.json"), "w") as fh:
        fh.write(harness.report_json(report) + "\n")
    _write_csv(os.path.join(out_dir, "suites.csv"),
               ["suite", "kind", "pass", "instances", "quantity", "max"], _suite_rows(report))
    weak = report.get("sections", {}).get("weak11")
    if weak:
        sides = sorted(weak["cells"], key=int)
        _write_csv(os.path.join(out_dir, "weak11_cells.csv"),
                   ["side"] + sorted(weak["cells"][sides[0]]),
                   [[s] + [weak["cells"][s][k] for k in sorted(weak["cells"][s])] for s in sides])
        _write_xy(os.path.join(out_dir, "weak11_trend.dat"), [int(s) for s in sides],
                  [weak["cells"][s]["max_R"] for s in sides], ("side", "max_R"))
    strong = report.get("sections", {}).get("strongpp")
    if strong:
        sides = sorted(strong["cells"], key=int)
        keys = sorted(k for k in strong["cells"][sides[0]] if k.startswith("S("))
        _write_csv(os.path.join(out_dir, "strongpp_cells.csv"), ["side"] + keys,
                   [[s] + [strong["cells"][s][k] for k in keys] for s in sides])
        for s in sides:
            _write_xy(os.path.join(out_dir, f"strongpp_profile_N{s}.dat"),
                      [float(k[2:-1]) for k in keys], [strong["cells"][s][k] for k in keys],
                      ("p", "S"))


def _finish(report: dict, out_dir: Optional[str]) -> int:
    _write_outputs(report, out_dir)
    return EXIT_OK if harness.exact_suites_pass(report) else EXIT_FAIL


def _cmd_space_probe(args) -> int:
    space = build_torus_space(args.dim, args.side, args.metric)
    top = max(1, int(quarter_scale(space)))
    rep = measure_doubling_and_geo(space, [float(r) for r in range(1, top + 1)], seed=args.seed or 0)
    _emit({"dim": args.dim, "side": args.side, "metric": args.metric, **rep.to_dict()}, args.out)
    return EXIT_OK


def _cmd_cubes_build(args) -> int:
    space = build_torus_space(args.dim, args.side, args.metric)
    try:
        system = build_cube_system(space, args.delta, args.c0, args.C0, seed=args.seed or 0)
    except CubeAxiomViolation as exc:
        print(f"cube axiom violation: {exc}", file=sys.stderr)
        return EXIT_FAIL
    data = system.to_dict() if args.full else {
        k: v for k, v in system.to_dict().items() if k not in ("centers", "membership", "parents")}
    _emit(data, args.out)
    return EXIT_OK


def _cmd_weights_ap(args) -> int:
    space = build_torus_space(args.dim, args.side, args.metric)
    params = {}
    for item in args.param or []:
        key, _, val = item.partition("=")
        params[key] = float(val)
    w = make_weight(space, args.kind, params, seed=args.seed or 0)
    out = {"weight": w.tag, "p": args.p, "characteristic": ap_characteristic(space, w, args.p)}
    if args.csv:
        weight_to_csv(w, args.csv)
    _emit(out, args.out)
    return EXIT_OK


def _config(args) -> harness.ExperimentConfig:
    return harness.load_config(args.config, seed=args.seed)


def _cmd_cz_run(args, partial: _Partial) -> int:
    cfg = _config(args)
    report = harness.run_all(cfg)
    partial.report = report
    missing = harness.missing_suites(report)
    if missing:
        print(f"nccz: report is missing suites {missing}", file=sys.stderr)
        _write_outputs(report, args.out)
        return EXIT_FAIL
    return _finish(report, args.out)


def _cmd_verify_identities(args, partial: _Partial) -> int:
    cfg = _config(args)
    report = harness.new_report("verify identities", cfg)
    partial.report = report
    t0 = time.perf_counter()
    res = harness.run_identities(cfg)
    report["timing"]["identities"] = time.perf_counter() - t0
    report["suites"].update(res["suites"])
    report["sections"].update(constants=res["constants"], checks=res["checks"],
                              lambda_dropped=res["lambda_dropped"])
    return _finish(report, args.out)


def _cmd_verify_weak11(args, partial: _Partial) -> int:
    cfg = _config(args)
    report = harness.new_report("verify weak11", cfg)
    partial.report = report
    section = {"cells": {}, "growth": []}
    report["sections"]["weak11"] = section
    for side in cfg.sides:
        t0 = time.perf_counter()
        res = harness.run_weak11(cfg, [side])
        report["timing"][f"N={side}"] = time.perf_counter() - t0
        section["cells"].update(res["cells"])
        for name, suite in res["per_side"][str(side)]["suites"].items():
            report["suites"][f"{name}@N={side}"] = suite
        report["sections"][f"checks@N={side}"] = res["per_side"][str(side)]["checks"]
    sides = [str(s) for s in cfg.sides]
    for a, b in zip(sides, sides[1:]):
        ra, rb = section["cells"][a]["max_R"], section["cells"][b]["max_R"]
        section["growth"].append(rb / ra if ra > 0 else float("inf"))
    section["no_doubling_growth"] = all(g < 2 for g in section["growth"])
    # per-side checks feed the exit code through the suites
    for key in [k for k in report["sections"] if k.startswith("checks@")]:
        for name, chk in report["sections"][key].items():
            report["suites"][f"{name}@{key[7:]}"] = {"kind": "exact", "pass": chk["pass"]}
    return _finish(report, args.out)


def _cmd_verify_strongpp(args, partial: _Partial) -> int:
    cfg = _config(args)
    report = harness.new_report("verify strongpp", cfg)
    partial.report = report
    t0 = time.perf_counter()
    res = harness.run_strongpp(cfg)
    report["timing"]["strongpp"] = time.perf_counter() - t0
    report["suites"]["strong_pp"] = res["strong_pp"]
    report["suites"]["strong_estimate"] = res["strong_estimate"]
    report["sections"]["strongpp"] = {"cells": res["cells"], "drift": res["drift"],
                                      "stable": all(v < 2 for v in res["drift"].values())}
    return _finish(report, args.out)


def _cmd_report_merge(args) -> int:
    reports = {}
    for path in args.reports:
        with open(path) as fh:
            reports[path] = json.load(fh)
    merged = harness.merge_reports(reports)
    text = json.dumps(merged, sort_keys=True, indent=1)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)
    ok = all(harness.exact_suites_pass(r) for r in reports.values())
    return EXIT_OK if ok else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nccz", description=__doc__.splitlines()[0])
    groups = parser.add_subparsers(dest="group", required=True)

    space = groups.add_parser("space").add_subparsers(dest="command", required=True)
    p = space.add_parser("probe", help="doubling, geometric doubling and annular decay constants")
    _space_args(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_space_probe)

    cubes = groups.add_parser("cubes").add_subparsers(dest="command", required=True)
    p = cubes.add_parser("build", help="build and certify a dyadic cube system")
    _space_args(p)
    p.add_argument("--delta", type=float, default=2.0)
    p.add_argument("--c0", type=float, default=1.0)
    p.add_argument("--C0", type=float, default=1.5)
    p.add_argument("--seed", type=int)
    p.add_argument("--full", action="store_true", help="include centers and memberships")
    p.add_argument("--out")
    p.set_defaults(func=_cmd_cubes_build)

    weights = groups.add_parser("weights").add_subparsers(dest="command", required=True)
    p = weights.add_parser("ap", help="A_p characteristic of a generated weight")
    _space_args(p)
    p.add_argument("--kind", default="constant", choices=WEIGHT_KINDS)
    p.add_argument("--param", action="append", help="weight parameter as key=value")
    p.add_argument("--p", type=float, default=2.0)
    p.add_argument("--seed", type=int)
    p.add_argument("--csv", help="also write the weight values to this CSV")
    p.add_argument("--out")
    p.set_defaults(func=_cmd_weights_ap)

    def config_cmd(sub, name, func, help_text):
        q = sub.add_parser(name, help=help_text)
        q.add_argument("--config", required=True)
        q.add_argument("--seed", type=int, help="override experiment.seed")
        q.add_argument("--out", help="output directory (report.json, CSV tables, plot data)")
        q.set_defaults(func=func, needs_partial=True)

    cz = groups.add_parser("cz").add_subparsers(dest="command", required=True)
    config_cmd(cz, "run", _cmd_cz_run, "every suite on the configured space")
    verify = groups.add_parser("verify").add_subparsers(dest="command", required=True)
    config_cmd(verify, "weak11", _cmd_verify_weak11, "weak-type ratio sweep over sides")
    config_cmd(verify, "strongpp", _cmd_verify_strongpp, "strong L^p ratio sweep over sides")
    config_cmd(verify, "identities", _cmd_verify_identities, "exact identity suites")

    report = groups.add_parser("report").add_subparsers(dest="command", required=True)
    p = report.add_parser("merge", help="union of reports keyed by source")
    p.add_argument("reports", nargs="+")
    p.add_argument("--out")
    p.set_defaults(func=_cmd_report_merge)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    partial = _Partial(getattr(args, "out", None))
    try:
        if getattr(args, "needs_partial", False):
            return args.func(args, partial)
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"nccz: file not found: {exc.filename}", file=sys.stderr)
        return EXIT_USAGE
    except harness.ConfigError as exc:
        print(f"nccz: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        if partial.report is not None:
            partial.report["interrupted"] = True
            _write_outputs(partial.report, partial.out_dir)
        print("nccz: interrupted, partial results written", file=sys.stderr)
        return EXIT_INTERRUPT


if __name__ == "__main__":
    sys.exit(main())
