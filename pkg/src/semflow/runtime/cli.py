"""``semflow`` command line: run, tune, scale, mesh-info."""

from __future__ import annotations

import argparse
import sys

import numpy as np

from .. import variants
from ..comm import spawn
from ..mesh import read_container
from .autotune import autotune, representative_inputs
from .cases import (EXIT_CONFIG, EXIT_OK, SETUPS, _root_cause, classify, run_case, scaling_study)
from .config import ConfigError, parse_config
from .timers import TimerTree


def _load(path):
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except (OSError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    return parse_config(text)


def _force(items):
    out = {}
    for item in items or ():
        op, sep, idx = item.partition("=")
        if not sep:
            raise ConfigError(f"--force-variant expects op=id, got {item!r}")
        try:
            out[op.strip()] = int(idx)
        except ValueError:
            raise ConfigError(f"--force-variant: variant id must be an integer, got {idx!r}") from None
    return out


def cmd_run(args):
    cfg = _load(args.case)
    return run_case(cfg, args.output, ranks=args.ranks, seed=args.seed, scheduler=args.scheduler,
                    stats_interval=args.stats_interval, force_variants=_force(args.force_variant))


def _tune_program(comm, cfg, seed):
    prob = SETUPS[cfg["PROBLEM"]["type"]](cfg, comm, TimerTree())
    report = autotune(variants.registry, representative_inputs(prob.mesh, seed), comm)
    return report


def cmd_tune(args):
    cfg = _load(args.case)
    P = args.ranks or cfg["COMM"]["ranks"]
    if cfg["PROBLEM"]["type"] == "overset":
        P = sum(s["ranks"] for s in cfg.sessions)
    report = spawn(P, _tune_program, cfg, cfg["COMM"]["seed"], seed=cfg["COMM"]["seed"])[0]
    sys.stdout.write(report.format())
    return EXIT_OK


def cmd_scale(args):
    cfg = _load(args.case)
    try:
        ranks = [int(x) for x in args.ranks_list.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"--ranks-list must be comma-separated integers, got {args.ranks_list!r}") from None
    if not ranks:
        raise ConfigError("--ranks-list is empty")
    scaling_study(cfg, ranks, args.output, sys.stdout)
    return EXIT_OK


def cmd_mesh_info(args):
    try:
        c = read_container(args.file)
    except (OSError, ValueError) as exc:
        print(f"semflow: cannot read mesh: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    pts = np.moveaxis(c.coords, 1, -1).reshape(-1, 3)
    tags = sorted({t for t in c.tags.ravel() if t})
    print(f"container version {c.version}")
    print(f"elements E       {c.E}")
    print(f"order N          {c.N}")
    print(f"gridpoints E*N^3 {c.E * c.N**3}")
    print(f"written by P     {c.P} ranks")
    if c.E:
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        print("bounding box     " + "  ".join(f"[{a:.6g}, {b:.6g}]" for a, b in zip(lo, hi)))
    print(f"boundary tags    {', '.join(tags) if tags else '(none)'}")
    for name, arr in c.fields.items():
        print(f"field {name:<10} {arr.shape[1]} component(s), range [{arr.min():.6g}, {arr.max():.6g}]")
    return EXIT_OK


def build_parser():
    ap = argparse.ArgumentParser(prog="semflow", description="Spectral element heat and flow solver.")
    sub = ap.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a case file")
    r.add_argument("case")
    r.add_argument("--ranks", type=int, default=None)
    r.add_argument("--seed", type=int, default=None)
    r.add_argument("--scheduler", choices=("serial", "concurrent"), default=None)
    r.add_argument("--stats-interval", type=int, default=None, help="steps between statistics blocks")
    r.add_argument("--force-variant", action="append", metavar="OP=ID",
                   help="pin a kernel variant instead of autotuning it (repeatable)")
    r.add_argument("--output", "-o", default="semflow_out")
    r.set_defaults(func=cmd_run)

    t = sub.add_parser("tune", help="autotune kernels for a case and print the report")
    t.add_argument("case")
    t.add_argument("--ranks", type=int, default=None)
    t.set_defaults(func=cmd_tune)

    s = sub.add_parser("scale", help="run a case at several rank counts and fit n0.8")
    s.add_argument("case")
    s.add_argument("--ranks-list", required=True)
    s.add_argument("--output", "-o", default="semflow_scale")
    s.set_defaults(func=cmd_scale)

    m = sub.add_parser("mesh-info", help="summarize a mesh/snapshot container")
    m.add_argument("file")
    m.set_defaults(func=cmd_mesh_info)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - mapped to documented exit codes
        code = classify(exc)
        print(f"semflow: error: {_root_cause(exc)}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
