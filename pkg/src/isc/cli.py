"""Command line entry point: ``isc run | bench | eval | dump-isc | synth``."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace

from .config import load_config
from .descriptor import build_isc, write_pgm
from .errors import IscError
from .evaluation import bench_query, evaluate, load_ground_truth, read_detections, run_sequence
from .ingest import load_cloud


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    res = run_sequence(args.scans, args.gt, cfg, args.out)
    print(json.dumps(res.report.to_dict(), indent=2))
    return 0


def _cmd_bench(args) -> int:
    cfg = load_config(args.config)
    print(json.dumps(bench_query(args.db_size, cfg, args.trials, args.seed), indent=2))
    return 0


def _cmd_eval(args) -> int:
    cfg = load_config(args.config)
    if args.loop_dist is not None:
        cfg = replace(cfg, loop_dist=args.loop_dist)
    report = evaluate(read_detections(args.detections), load_ground_truth(args.gt), cfg)
    print(json.dumps(report.to_dict(), indent=2))
    return 0


def _cmd_dump_isc(args) -> int:
    cfg = load_config(args.config)
    isc = build_isc(load_cloud(args.scan, cfg.ingest), cfg.descriptor)
    write_pgm(isc, args.out)
    return 0


def _cmd_synth(args) -> int:
    from .synth import generate_sequence

    manifest = generate_sequence(
        args.out,
        n_base=args.n_base,
        forward_revisits=args.forward,
        reverse_revisits=args.reverse,
        seed=args.seed,
    )
    print(f"wrote {manifest['n_frames']} frames to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="isc", description="Intensity scan context loop-closure detection")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="replay a scan directory and score detections")
    r.add_argument("--scans", required=True, help="directory of NNNNNN.bin / .txt scans")
    r.add_argument("--gt", required=True, help="KITTI pose file or 'frame x y z' file")
    r.add_argument("--config", help="flat key = value config file")
    r.add_argument("--out", required=True, help="output directory")
    r.set_defaults(func=_cmd_run)

    b = sub.add_parser("bench", help="time retrieval against a synthetic database")
    b.add_argument("--db-size", type=int, default=4000)
    b.add_argument("--trials", type=int, default=200)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--config")
    b.set_defaults(func=_cmd_bench)

    e = sub.add_parser("eval", help="score a detections.jsonl log against ground truth")
    e.add_argument("--detections", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--loop-dist", type=float, default=None, help="true-loop distance in meters")
    e.add_argument("--config")
    e.set_defaults(func=_cmd_eval)

    d = sub.add_parser("dump-isc", help="write one scan's descriptor as a PGM image")
    d.add_argument("--scan", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--config")
    d.set_defaults(func=_cmd_dump_isc)

    s = sub.add_parser("synth", help="generate a synthetic sequence with planted revisits")
    s.add_argument("--out", required=True)
    s.add_argument("--n-base", type=int, default=260)
    s.add_argument("--forward", type=int, default=20)
    s.add_argument("--reverse", type=int, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=_cmd_synth)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (IscError, OSError, ValueError) as exc:
        print(f"isc {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
