"""Command-line entry points: analyze, certify, solve, export.

Exit codes: 0 success, 2 infeasible or unsolvable, 3 input error, 4 budget exhausted.
BIMANIP_THREADS sets the default number of planning threads."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .certificate import (CertificateError, compute_certificate, placement_grids, solve_query,
                          verify_certificate)
from .fileio import (FileFormatError, atomic_write_text, export_csv, load_certificate, load_trajectory,
                     save_certificate, save_trajectory, summary)
from .reachability import analyze_placement_connectivity, write_grid
from .scene import SceneError, load_scene
from .trajectory import validate_trajectory
from .world import PlacementCoord, PlacementError, placement_to_transform

EXIT_OK, EXIT_INFEASIBLE, EXIT_INPUT, EXIT_BUDGET = 0, 2, 3, 4

log = logging.getLogger("bimanip")


class InputError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def default_threads() -> int:
    v = os.environ.get("BIMANIP_THREADS", "")
    try:
        return max(1, int(v)) if v else 1
    except ValueError:
        raise InputError(f"BIMANIP_THREADS must be an integer, got {v!r}") from None


def parse_coord(text: str) -> PlacementCoord:
    parts = text.split(",")
    if len(parts) != 4:
        raise InputError(f"expected 'class,x,y,theta', got {text!r}")
    try:
        return PlacementCoord(int(parts[0]), float(parts[1]), float(parts[2]), float(parts[3]))
    except ValueError:
        raise InputError(f"expected 'class,x,y,theta', got {text!r}") from None


def _metadata(args, t0: float) -> dict:
    return {"created": datetime.now(timezone.utc).isoformat(timespec="seconds"),
            "elapsed_s": round(time.monotonic() - t0, 3), "command": args.cmd, "version": __version__}


def _out(text: str, path):
    if path is None or str(path) == "-":
        sys.stdout.write(text)
    else:
        atomic_write_text(path, text)


def cmd_analyze(args) -> int:
    w = load_scene(args.scene)
    res = None
    if args.resolution:
        dx, dt = (float(v) for v in args.resolution.split(","))
        res = (dx, dx, np.deg2rad(dt))
    classes = [args.class_id] if args.class_id is not None else list(w.stable_classes)
    for c in classes:
        if c not in w.stable_classes:
            raise InputError(f"class {c} is not a stable placement class")
    report = {"scene": str(args.scene), "fingerprint": w.fingerprint, "classes": {}}
    for c in classes:
        g = analyze_placement_connectivity(w, c, res)
        report["classes"][str(c)] = {"shape": list(g.shape), "feasible_cells": int(g.occupancy.sum()),
                                     "components": g.n_components, "sizes": list(g.component_sizes)}
        print(f"class {c}: {g.n_components} component(s), sizes {list(g.component_sizes)}, "
              f"{int(g.occupancy.sum())}/{g.occupancy.size} cells feasible")
        if args.out:
            write_grid(g, Path(args.out) / f"class{c}")
    if args.out:
        atomic_write_text(Path(args.out) / "report.json", json.dumps(report, indent=1) + "\n")
    return EXIT_OK


def cmd_certify(args) -> int:
    t0 = time.monotonic()
    w = load_scene(args.scene)
    threads = args.threads or default_threads()

    def progress(i, j, dt):
        if args.verbose:
            print(f"pair {i}-{j}: " + ("ok" if dt is not None else "failed") +
                  (f" ({dt:.1f} s)" if dt is not None else ""), file=sys.stderr)

    try:
        cert = compute_certificate(w, args.seed, budget=args.budget, pair_time_cap=args.time_cap,
                                   progress=progress, workers=threads)
    except CertificateError as exc:
        if exc.kind == "SPANNING_FAILED" and exc.detail is not None:
            fails = exc.detail.meta.get("failures", {})
            print(f"SPANNING_FAILED: {exc}; pair failures {fails}", file=sys.stderr)
            return EXIT_BUDGET if "BUDGET_EXHAUSTED" in fails.values() else EXIT_INFEASIBLE
        raise
    save_certificate(cert, args.out, _metadata(args, t0))
    print(f"certificate: {len(cert.nodes)} nodes, {len(cert.entries)} entries, spanning; "
          f"unreachable classes {cert.unreachable}")
    return EXIT_OK


def cmd_solve(args) -> int:
    t0 = time.monotonic()
    w = load_scene(args.scene)
    start, goal = parse_coord(args.start), parse_coord(args.goal)
    cert = load_certificate(args.cert)
    if cert.fingerprint != w.fingerprint:
        raise CertificateError("FINGERPRINT_MISMATCH", "certificate was computed for a different scene")
    grids = placement_grids(w)
    problems = verify_certificate(w, cert, grids)
    if problems:
        raise InputError("certificate failed replay: " + "; ".join(problems[:5]))
    try:
        T_s, T_g = placement_to_transform(w, start), placement_to_transform(w, goal)
    except (PlacementError, IndexError) as exc:
        raise InputError(str(exc)) from None
    traj = solve_query(w, cert, T_s, T_g, grids=grids, budget=args.budget, seed=args.seed)
    rep = validate_trajectory(w, traj, bool(w.params.get("cc_equilibrium", True)))
    if not rep.ok:
        print("solution failed replay: " + "; ".join(rep.errors[:5]), file=sys.stderr)
        return EXIT_INFEASIBLE
    save_trajectory(traj, args.out, w.fingerprint, _metadata(args, t0))
    s = summary(traj, w.weights)
    print(f"solution: {s['transfer_segments']} transfer(s), {s['typeb_segments']} TypeB, "
          f"{s['regrasps']} regrasp(s), {s['samples']} samples")
    return EXIT_OK


def cmd_export(args) -> int:
    traj, d = load_trajectory(args.traj)
    if args.format == "csv":
        _out(export_csv(traj), args.out)
    elif args.format == "summary":
        s = summary(traj)
        s["fingerprint"] = d.get("fingerprint", "")
        _out(json.dumps(s, indent=1) + "\n", args.out)
    else:
        raise InputError(f"unknown export format {args.format!r}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="bimanip", description="Bimanual regrasp planning with certificates.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    a = sub.add_parser("analyze", help="placement connectivity report")
    a.add_argument("scene")
    a.add_argument("--class", dest="class_id", type=int)
    a.add_argument("--resolution", help="'dx,dtheta_deg', for example 0.02,5")
    a.add_argument("--out", help="directory for the report and grid dumps")
    a.set_defaults(func=cmd_analyze)

    c = sub.add_parser("certify", help="compute a certificate")
    c.add_argument("scene")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--budget", type=int, help="closed-chain iterations per query")
    c.add_argument("--time-cap", type=float, help="seconds per class pair")
    c.add_argument("--threads", type=int)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_certify)

    s = sub.add_parser("solve", help="solve a query with a certificate")
    s.add_argument("scene")
    s.add_argument("cert")
    s.add_argument("--start", required=True, help="'class,x,y,theta' (theta in radians)")
    s.add_argument("--goal", required=True, help="'class,x,y,theta' (theta in radians)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--budget", type=int, help="grasp trials per in-placement leg")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_solve)

    e = sub.add_parser("export", help="flat dump of a trajectory file")
    e.add_argument("traj")
    e.add_argument("--format", default="summary")
    e.add_argument("--out")
    e.set_defaults(func=cmd_export)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except CertificateError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_INPUT if exc.kind == "FINGERPRINT_MISMATCH" else EXIT_INFEASIBLE
    except PlacementError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (SceneError, FileFormatError, InputError, ValueError, KeyError, OSError) as exc:
        # malformed numbers and JSON surface as ValueError
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT

if __name__ == "__main__":
    sys.exit(main())
