"""Command-line interface: grammar statistics, single-image parsing,
sequence tracking and benchmark evaluation."""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import cv2
import numpy as np

from . import __version__
from .bench import (config_hash_of, emit_report, load_sequence, run_ope,
                    run_sre, run_tre, run_vot)
from .engine import (CSV_HEADER, Tracker, TrackerConfig, results_to_csv,
                     track)
from .features import build_pyramid
from .grid_aog import (DECOMPOSITION, build_full_aog, count_configurations,
                       count_parse_trees)
from .model_io import load_model
from .parsing import parse


def _parse_box(text: str):
    vals = [float(v) for v in text.split(",")]
    if len(vals) != 4:
        raise argparse.ArgumentTypeError("expected x,y,w,h")
    return tuple(vals)


def _tracker_config(args) -> TrackerConfig:
    cfg = TrackerConfig()
    if getattr(args, "config", None):
        with open(args.config) as f:
            overrides = json.load(f)
        for k, v in overrides.items():
            if not hasattr(cfg, k):
                raise SystemExit("unknown config key %r" % k)
            setattr(cfg, k, v)
    if getattr(args, "relearn_cap", None) is not None:
        cfg.relearn_cap = args.relearn_cap
    if getattr(args, "grid_side", None) is not None:
        cfg.grid_side = args.grid_side
    if getattr(args, "lsvm_c", None) is not None:
        cfg.lsvm_c = args.lsvm_c
    return cfg


def cmd_count_aog(args):
    aog = build_full_aog((args.grid, args.grid),
                         min_part=(args.min_part, args.min_part))
    stats = {
        "grid": args.grid,
        "or_nodes": sum(1 for n in aog.nodes if n.is_or),
        "and_nodes": sum(1 for n in aog.nodes if n.is_and),
        "decomposition_ands": sum(1 for n in aog.nodes
                                  if n.is_and and n.and_type == DECOMPOSITION),
        "terminals": len(list(aog.terminals())),
        "parse_trees": count_parse_trees(aog),
    }
    if args.configurations:
        stats["configurations"] = count_configurations(aog)
    print(json.dumps(stats, indent=2))
    return 0


def cmd_parse(args):
    model = load_model(args.model)
    image = cv2.imread(args.image, cv2.IMREAD_COLOR)
    if image is None:
        raise SystemExit("cannot read image %r" % args.image)
    gw, gh = model.aog.grid
    u = model.cells_per_unit
    pyramid = build_pyramid(image, model.feature_config,
                            min_cells=(u * gw, u * gh))
    dets, _ = parse(pyramid, model, n_best=args.n_best)
    out = [{"box": [round(v, 2) for v in d.window], "score": d.score}
           for d in dets]
    print(json.dumps(out, indent=2))
    return 0


def _render_frames(seq, results, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    for r in results:
        img = seq.load_frame(r.frame_index)
        if img.ndim == 2:
            img = cv2.cvtColor(img, cv2.COLOR_GRAY2BGR)
        else:
            img = img.copy()
        if r.box is not None:
            x, y, w, h = (int(round(v)) for v in r.box)
            color = (0, 255, 0) if r.valid else (0, 0, 255)
            cv2.rectangle(img, (x, y), (x + w, y + h), color, 2)
        cv2.imwrite(os.path.join(out_dir, "%06d.png" % r.frame_index), img)


def cmd_track(args):
    cfg = _tracker_config(args)
    seq = load_sequence(args.sequence, fmt=args.format)
    init = args.init if args.init else seq.ground_truth[0]
    tracker = Tracker(seq.load_frame(0), init, cfg)
    for i in range(1, len(seq)):
        tracker.step(seq.load_frame(i))
    results = tracker.finish()
    csv = results_to_csv(results)
    if args.out:
        with open(args.out, "w") as f:
            f.write(csv)
    else:
        sys.stdout.write(csv)
    if args.render:
        _render_frames(seq, results, args.render)
    return 0


def cmd_eval(args):
    cfg = _tracker_config(args)

    def tracker_factory(frames, init_box):
        results = track(frames, init_box, cfg)
        return [r.box for r in results]

    seq_dirs = []
    for name in sorted(os.listdir(args.dataset)):
        p = os.path.join(args.dataset, name)
        if os.path.isdir(p):
            if args.sequences and name not in args.sequences:
                continue
            seq_dirs.append(p)
    if not seq_dirs:
        raise SystemExit("no sequences found in %r" % args.dataset)

    runs = []
    wall = {}
    vot_rows = []
    for p in seq_dirs:
        seq = load_sequence(p, fmt=args.format)
        t0 = time.time()
        if args.protocol == "ope":
            runs.append(run_ope(seq, tracker_factory))
        elif args.protocol == "tre":
            runs.append(run_tre(seq, tracker_factory))
        elif args.protocol == "sre":
            runs.append(run_sre(seq, tracker_factory))
        else:
            acc, rob = run_vot(seq, tracker_factory)
            vot_rows.append((seq.name, acc, rob))
        wall[seq.name] = round(time.time() - t0, 3)

    os.makedirs(args.out, exist_ok=True)
    if args.protocol == "vot":
        path = os.path.join(args.out, "vot.csv")
        with open(path, "w") as f:
            f.write("sequence,accuracy,robustness\n")
            for name, acc, rob in vot_rows:
                f.write("%s,%.6f,%d\n" % (name, acc, rob))
        print(path)
    else:
        files = emit_report(runs, args.out, wall_times=wall,
                            config_hash=config_hash_of(cfg),
                            engine_version=__version__)
        for f in files:
            print(f)
    return 0


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="parttrack",
                                 description="part-grammar object tracker")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("count-aog", help="grammar structure statistics")
    p.add_argument("--grid", type=int, default=3)
    p.add_argument("--min-part", type=int, default=1)
    p.add_argument("--configurations", action="store_true",
                   help="also count distinct part configurations")
    p.set_defaults(func=cmd_count_aog)

    p = sub.add_parser("parse", help="detect with a saved model in an image")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--n-best", type=int, default=10)
    p.set_defaults(func=cmd_parse)

    p = sub.add_parser("track", help="track through a sequence directory")
    p.add_argument("--sequence", required=True)
    p.add_argument("--init", type=_parse_box, default=None,
                   help="x,y,w,h first-frame box (default: annotation)")
    p.add_argument("--format", choices=("tb", "vot"), default="tb")
    p.add_argument("--config", help="JSON file overriding tracker settings")
    p.add_argument("--out", help="CSV output path (default stdout)")
    p.add_argument("--render", help="directory for annotated frames")
    p.add_argument("--relearn-cap", type=int, default=None)
    p.add_argument("--grid-side", type=int, default=None)
    p.add_argument("--lsvm-c", type=float, default=None)
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("eval", help="run an evaluation protocol")
    p.add_argument("--protocol", choices=("ope", "sre", "tre", "vot"),
                   required=True)
    p.add_argument("--dataset", required=True,
                   help="directory of sequence directories")
    p.add_argument("--sequences", nargs="*", default=None)
    p.add_argument("--format", choices=("tb", "vot"), default="tb")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON file overriding tracker settings")
    p.add_argument("--threads", type=int, default=1,
                   help="reserved; evaluation currently runs sequentially")
    p.add_argument("--relearn-cap", type=int, default=None)
    p.add_argument("--grid-side", type=int, default=None)
    p.add_argument("--lsvm-c", type=float, default=None)
    p.set_defaults(func=cmd_eval)

    args = ap.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
