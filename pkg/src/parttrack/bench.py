"""Benchmark harness: sequence loading (tb / vot annotation formats),
evaluation protocols (OPE, TRE, SRE, VOT-style reinitialization), success
and precision curves, and CSV/plot/manifest report emission.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import time
from dataclasses import dataclass, field

import cv2
import numpy as np

from .parsing import iou

IMAGE_EXTENSIONS = (".jpg", ".jpeg", ".png", ".bmp")

SUCCESS_THRESHOLDS = np.arange(0.0, 1.0 + 1e-9, 0.05)
PRECISION_THRESHOLDS = np.arange(0.0, 50.0 + 1e-9, 1.0)
PRECISION_HEADLINE_PX = 20.0

SRE_SCALES = (0.8, 0.9, 1.1, 1.2)
SRE_SHIFTS = ((-1, -1), (0, -1), (1, -1), (-1, 0),
              (1, 0), (-1, 1), (0, 1), (1, 1))   # 8 compass directions
TRE_STARTS = 20
VOT_BURN_IN = 5


# ---------------------------------------------------------------------------
# Sequences

@dataclass
class Sequence:
    name: str
    frames: list                    # file paths or in-memory arrays
    ground_truth: list              # per-frame (x, y, w, h) or None
    attributes: set = field(default_factory=set)

    def __post_init__(self):
        if len(self.frames) < 2:
            raise ValueError("sequence needs at least 2 frames")
        if len(self.frames) != len(self.ground_truth):
            raise ValueError("%d frames but %d annotations"
                             % (len(self.frames), len(self.ground_truth)))
        if self.ground_truth[0] is None:
            raise ValueError("first-frame ground truth required")

    def load_frame(self, i: int) -> np.ndarray:
        f = self.frames[i]
        if isinstance(f, np.ndarray):
            return f
        img = cv2.imread(f, cv2.IMREAD_COLOR)
        if img is None:
            raise IOError("cannot read frame %r" % f)
        return img

    def __len__(self):
        return len(self.frames)


def _parse_tb_line(line: str):
    parts = line.replace("\t", ",").replace(" ", ",").split(",")
    vals = [float(p) for p in parts if p]
    if len(vals) != 4:
        raise ValueError("expected x,y,w,h, got %r" % line)
    x, y, w, h = vals
    return (x - 1.0, y - 1.0, w, h)      # 1-based origin -> 0-based


def _parse_vot_line(line: str):
    parts = line.replace("\t", ",").replace(" ", ",").split(",")
    vals = [float(p) for p in parts if p]
    if len(vals) == 4:
        x, y, w, h = vals
        return (x, y, w, h)
    if len(vals) != 8:
        raise ValueError("expected 8-number polygon, got %r" % line)
    xs, ys = vals[0::2], vals[1::2]
    return (min(xs), min(ys), max(xs) - min(xs), max(ys) - min(ys))


def load_sequence(path: str, fmt: str = "tb") -> Sequence:
    """Load a sequence directory: numbered image frames plus a
    groundtruth annotation file (`groundtruth_rect.txt` or
    `groundtruth.txt`)."""
    img_dir = path
    for sub in ("img", "imgs", "color"):
        if os.path.isdir(os.path.join(path, sub)):
            img_dir = os.path.join(path, sub)
            break
    frames = sorted(os.path.join(img_dir, f) for f in os.listdir(img_dir)
                    if f.lower().endswith(IMAGE_EXTENSIONS))
    ann = None
    for name in ("groundtruth_rect.txt", "groundtruth.txt"):
        p = os.path.join(path, name)
        if os.path.isfile(p):
            ann = p
            break
    if ann is None:
        raise FileNotFoundError("no annotation file in %r" % path)
    parse = _parse_tb_line if fmt == "tb" else _parse_vot_line
    boxes = []
    with open(ann) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            try:
                boxes.append(parse(line))
            except ValueError:
                boxes.append(None)     # absent annotation (e.g. NaN rows)
    if len(boxes) != len(frames):
        raise ValueError("annotation/frame count mismatch: %d boxes, %d frames"
                         % (len(boxes), len(frames)))
    attrs = set()
    attr_file = os.path.join(path, "attrs.txt")
    if os.path.isfile(attr_file):
        attrs = {a.strip() for a in open(attr_file).read().split() if a.strip()}
    return Sequence(name=os.path.basename(os.path.normpath(path)),
                    frames=frames, ground_truth=boxes, attributes=attrs)


# ---------------------------------------------------------------------------
# Protocol runs

@dataclass
class Variant:
    name: str
    start_frame: int
    init_box: tuple
    boxes: list          # predicted box or None, frames start_frame..end


@dataclass
class EvalRun:
    protocol: str
    sequence: Sequence
    variants: list[Variant]

    def frame_pairs(self):
        """All (ground-truth box, predicted box) pairs with ground truth."""
        out = []
        for v in self.variants:
            for i, pred in enumerate(v.boxes):
                gt = self.sequence.ground_truth[v.start_frame + i]
                if gt is not None:
                    out.append((gt, pred))
        return out


def _track_from(seq: Sequence, tracker_factory, start: int, init_box):
    frames = (seq.load_frame(i) for i in range(start, len(seq)))
    return tracker_factory(frames, init_box)


def run_ope(seq: Sequence, tracker_factory) -> EvalRun:
    boxes = _track_from(seq, tracker_factory, 0, seq.ground_truth[0])
    v = Variant(name="ope", start_frame=0, init_box=seq.ground_truth[0],
                boxes=boxes)
    return EvalRun(protocol="OPE", sequence=seq, variants=[v])


def tre_start_frames(n_frames: int, n_starts: int = TRE_STARTS):
    """Evenly spaced start frames including frame 0; a start needs at
    least 2 frames left to track."""
    last = n_frames - 2
    starts = sorted({int(round(last * k / (n_starts - 1)))
                     for k in range(n_starts)})
    return starts


def run_tre(seq: Sequence, tracker_factory, n_starts: int = TRE_STARTS,
            warn=print) -> EvalRun:
    variants = []
    for s in tre_start_frames(len(seq), n_starts):
        init = seq.ground_truth[s]
        if init is None:
            warn("tre: no ground truth at start frame %d, skipping" % s)
            continue
        boxes = _track_from(seq, tracker_factory, s, init)
        variants.append(Variant(name="tre_%03d" % s, start_frame=s,
                                init_box=init, boxes=boxes))
    return EvalRun(protocol="TRE", sequence=seq, variants=variants)


def sre_init_boxes(box):
    """12 perturbed first-frame boxes: 8 compass shifts by 10% of the box
    size and 4 center-preserving scalings."""
    x, y, w, h = box
    out = []
    for sx, sy in SRE_SHIFTS:
        out.append(("shift_%+d%+d" % (sx, sy),
                    (x + 0.1 * w * sx, y + 0.1 * h * sy, w, h)))
    cx, cy = x + w / 2.0, y + h / 2.0
    for s in SRE_SCALES:
        out.append(("scale_%.1f" % s,
                    (cx - w * s / 2.0, cy - h * s / 2.0, w * s, h * s)))
    return out


def run_sre(seq: Sequence, tracker_factory) -> EvalRun:
    variants = []
    for name, init in sre_init_boxes(seq.ground_truth[0]):
        boxes = _track_from(seq, tracker_factory, 0, init)
        variants.append(Variant(name="sre_" + name, start_frame=0,
                                init_box=init, boxes=boxes))
    return EvalRun(protocol="SRE", sequence=seq, variants=variants)


def run_vot(seq: Sequence, tracker_factory, burn_in: int = VOT_BURN_IN):
    """Reinitializing protocol: restart from ground truth when the overlap
    drops to zero, skipping `burn_in` frames after each failure.

    Returns (accuracy, robustness) = (mean IoU over evaluated frames,
    failure count).
    """
    n = len(seq)
    overlaps = []
    failures = 0
    start = 0
    while start < n - 1:
        init = seq.ground_truth[start]
        if init is None:
            start += 1
            continue
        boxes = _track_from(seq, tracker_factory, start, init)
        failed_at = None
        for i, pred in enumerate(boxes):
            t = start + i
            gt = seq.ground_truth[t]
            if gt is None:
                continue
            ov = iou(pred, gt) if pred is not None else 0.0
            if i > 0 and ov == 0.0:
                failed_at = t
                break
            if i > 0:           # init frame itself is not evaluated
                overlaps.append(ov)
        if failed_at is None:
            break
        failures += 1
        start = failed_at + burn_in + 1
    accuracy = float(np.mean(overlaps)) if overlaps else 0.0
    return accuracy, failures


# ---------------------------------------------------------------------------
# Metric curves

def success_curve(run: EvalRun):
    """(thresholds, success rates, AUC); invalid predictions count IoU 0."""
    pairs = run.frame_pairs()
    ious = np.array([iou(p, g) if p is not None else 0.0 for g, p in pairs]
                    or [0.0])
    rates = np.array([(ious >= t).mean() for t in SUCCESS_THRESHOLDS])
    return SUCCESS_THRESHOLDS.copy(), rates, float(rates.mean())


def _center_dist(a, b) -> float:
    ax, ay = a[0] + a[2] / 2.0, a[1] + a[3] / 2.0
    bx, by = b[0] + b[2] / 2.0, b[1] + b[3] / 2.0
    return math.hypot(ax - bx, ay - by)


def precision_curve(run: EvalRun):
    """(pixel thresholds, precision rates, precision at 20 px); invalid
    predictions count as infinitely distant."""
    pairs = run.frame_pairs()
    dists = np.array([_center_dist(p, g) if p is not None else np.inf
                      for g, p in pairs] or [np.inf])
    rates = np.array([(dists <= t).mean() for t in PRECISION_THRESHOLDS])
    at20 = float((dists <= PRECISION_HEADLINE_PX).mean())
    return PRECISION_THRESHOLDS.copy(), rates, at20


# ---------------------------------------------------------------------------
# Report emission

def _fmt(x: float) -> str:
    return "%.6f" % x


def run_csv(run: EvalRun) -> str:
    st, sr, auc = success_curve(run)
    pt, pr, p20 = precision_curve(run)
    lines = ["metric,threshold,value"]
    for t, r in zip(st, sr):
        lines.append("success,%s,%s" % (_fmt(t), _fmt(r)))
    for t, r in zip(pt, pr):
        lines.append("precision,%s,%s" % (_fmt(t), _fmt(r)))
    lines.append("auc,,%s" % _fmt(auc))
    lines.append("precision_at_20,,%s" % _fmt(p20))
    return "\n".join(lines) + "\n"


def _plot_run(run: EvalRun, path: str):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    plt.rcParams["svg.hashsalt"] = "parttrack"
    st, sr, auc = success_curve(run)
    pt, pr, p20 = precision_curve(run)
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 4))
    ax1.plot(st, sr)
    ax1.set_xlabel("overlap threshold")
    ax1.set_ylabel("success rate")
    ax1.set_title("%s %s success (AUC %.3f)"
                  % (run.sequence.name, run.protocol, auc))
    ax1.set_ylim(0, 1.05)
    ax2.plot(pt, pr)
    ax2.set_xlabel("center error threshold (px)")
    ax2.set_ylabel("precision")
    ax2.set_title("precision (@20px %.3f)" % p20)
    ax2.set_ylim(0, 1.05)
    fig.tight_layout()
    fig.savefig(path, metadata={"Date": None})
    plt.close(fig)


def emit_report(runs: list[EvalRun], out_dir: str,
                wall_times: dict | None = None,
                config_hash: str = "", engine_version: str = "") -> list[str]:
    """Write per-run CSVs and plots, an aggregate CSV (per sequence and per
    attribute) and a JSON manifest.  Returns the written file paths.
    CSV content is deterministic for identical inputs."""
    os.makedirs(out_dir, exist_ok=True)
    written = []
    summary = []
    for run in runs:
        base = "%s_%s" % (run.sequence.name, run.protocol.lower())
        csv_path = os.path.join(out_dir, base + ".csv")
        with open(csv_path, "w") as f:
            f.write(run_csv(run))
        written.append(csv_path)
        plot_path = os.path.join(out_dir, base + ".svg")
        _plot_run(run, plot_path)
        written.append(plot_path)
        _, _, auc = success_curve(run)
        _, _, p20 = precision_curve(run)
        summary.append({"sequence": run.sequence.name,
                        "protocol": run.protocol,
                        "n_variants": len(run.variants),
                        "auc": auc, "precision_at_20": p20,
                        "attributes": sorted(run.sequence.attributes)})

    agg_lines = ["group,protocol,n_runs,mean_auc,mean_precision_at_20"]
    groups: dict = {}
    for s in summary:
        groups.setdefault(("sequence:" + s["sequence"], s["protocol"]), []).append(s)
        for a in s["attributes"]:
            groups.setdefault(("attribute:" + a, s["protocol"]), []).append(s)
    for (g, proto) in sorted(groups):
        rows = groups[(g, proto)]
        agg_lines.append("%s,%s,%d,%s,%s" % (
            g, proto, len(rows),
            _fmt(float(np.mean([r["auc"] for r in rows]))),
            _fmt(float(np.mean([r["precision_at_20"] for r in rows])))))
    agg_path = os.path.join(out_dir, "aggregate.csv")
    with open(agg_path, "w") as f:
        f.write("\n".join(agg_lines) + "\n")
    written.append(agg_path)

    manifest = {
        "engine_version": engine_version,
        "config_hash": config_hash,
        "runs": summary,
        "wall_times_s": wall_times or {},
    }
    man_path = os.path.join(out_dir, "manifest.json")
    with open(man_path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    written.append(man_path)
    return written


def config_hash_of(obj) -> str:
    return hashlib.sha256(repr(obj).encode()).hexdigest()[:16]
