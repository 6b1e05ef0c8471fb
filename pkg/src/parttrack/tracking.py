"""Frame-to-frame tracking machinery: ROI search, median-flow motion
gating, temporal Viterbi decoding over N-best candidates, trackability
statistics and critical-moment detection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import cv2
import numpy as np

from .grid_aog import DEFORMATION, TERMINATION, ParseTree
from .parsing import Detection, Model, ScoreMaps, iou

INF = float("inf")


# ---------------------------------------------------------------------------
# ROI search

def compute_roi(prev_box, frame_size, s_roi: float = 3.0):
    """Square of side s_roi * max(w, h) centered on prev_box, clipped."""
    x, y, w, h = prev_box
    W, H = frame_size
    side = s_roi * max(w, h)
    cx, cy = x + w / 2.0, y + h / 2.0
    x0 = max(0.0, cx - side / 2.0)
    y0 = max(0.0, cy - side / 2.0)
    x1 = min(float(W), cx + side / 2.0)
    y1 = min(float(H), cy + side / 2.0)
    return (x0, y0, x1 - x0, y1 - y0)


# ---------------------------------------------------------------------------
# Median-flow motion prediction

@dataclass
class FlowPrediction:
    box: tuple[float, float, float, float] | None    # None on failure

    @property
    def failed(self):
        return self.box is None


_LK_PARAMS = dict(winSize=(11, 11), maxLevel=3,
                  criteria=(cv2.TERM_CRITERIA_EPS | cv2.TERM_CRITERIA_COUNT, 20, 0.03))


def median_flow_predict(prev_frame, cur_frame, box, grid: int = 10,
                        min_survivors: float = 0.5) -> FlowPrediction:
    """Forward-backward pyramidal Lucas-Kanade over a uniform point grid.

    Points with above-median forward-backward error are discarded; the
    predicted box translates by the median displacement and rescales by the
    median of pairwise distance ratios.  Fails when fewer than half the
    points survive.
    """
    prev = prev_frame if prev_frame.ndim == 2 else cv2.cvtColor(prev_frame, cv2.COLOR_BGR2GRAY)
    cur = cur_frame if cur_frame.ndim == 2 else cv2.cvtColor(cur_frame, cv2.COLOR_BGR2GRAY)
    if prev.shape != cur.shape:
        raise ValueError("frame size mismatch")
    x, y, w, h = box
    xs = x + (np.arange(grid) + 0.5) * w / grid
    ys = y + (np.arange(grid) + 0.5) * h / grid
    p0 = np.stack(np.meshgrid(xs, ys), axis=-1).reshape(-1, 1, 2).astype(np.float32)

    p1, st1, _ = cv2.calcOpticalFlowPyrLK(prev, cur, p0, None, **_LK_PARAMS)
    if p1 is None:
        return FlowPrediction(box=None)
    p0r, st2, _ = cv2.calcOpticalFlowPyrLK(cur, prev, p1, None, **_LK_PARAMS)
    if p0r is None:
        return FlowPrediction(box=None)
    ok = (st1.ravel() == 1) & (st2.ravel() == 1)
    if not ok.any():
        return FlowPrediction(box=None)
    fb = np.linalg.norm((p0 - p0r).reshape(-1, 2), axis=1)
    med_fb = np.median(fb[ok])
    keep = ok & (fb <= med_fb)
    if keep.sum() < min_survivors * len(p0):
        return FlowPrediction(box=None)

    a = p0.reshape(-1, 2)[keep]
    b = p1.reshape(-1, 2)[keep]
    d = b - a
    dx = float(np.median(d[:, 0]))
    dy = float(np.median(d[:, 1]))

    scale = 1.0
    if len(a) >= 2:
        ratios = []
        for i in range(len(a)):
            for j in range(i + 1, len(a)):
                da = np.linalg.norm(a[i] - a[j])
                db = np.linalg.norm(b[i] - b[j])
                if da > 1e-6:
                    ratios.append(db / da)
        if ratios:
            scale = float(np.median(ratios))

    cx, cy = x + w / 2.0 + dx, y + h / 2.0 + dy
    nw, nh = w * scale, h * scale
    return FlowPrediction(box=(cx - nw / 2.0, cy - nh / 2.0, nw, nh))


def motion_cost(candidate_box, prediction: FlowPrediction,
                tau_motion: float = 0.3) -> float:
    """Thresholded motion model: 0 when accepted, +inf otherwise.

    A failed prediction disables the gate so re-detection stays possible.
    """
    if prediction.failed:
        return 0.0
    return 0.0 if iou(candidate_box, prediction.box) >= tau_motion else INF


# ---------------------------------------------------------------------------
# Temporal DP (Viterbi decoding over the candidate table)

def temporal_dp(scores: list[list[float]], pair_cost):
    """Minimum-energy candidate selection over a sliding window.

    `scores[i]` lists candidate data scores for frame i (empty for invalid
    frames, which are bridged: the transition applies between nearest
    valid neighbors).  `pair_cost(i_prev, i_cur, a, b)` is the transition
    cost between candidate a of the previous valid frame i_prev and
    candidate b of frame i_cur.

    Returns (choice per frame with None for invalid frames, total energy,
    degraded flag).  When every path has infinite energy the per-frame
    argmax is returned with the flag set.
    """
    valid = [i for i, s in enumerate(scores) if s]
    choices: list[int | None] = [None] * len(scores)
    if not valid:
        return choices, 0.0, False

    energy = {}
    back = {}
    first = valid[0]
    energy[first] = [-s for s in scores[first]]
    for prev, cur in zip(valid, valid[1:]):
        e_prev = energy[prev]
        e_cur = []
        b_cur = []
        for j, s in enumerate(scores[cur]):
            best, arg = INF, 0
            for a, ea in enumerate(e_prev):
                c = ea + pair_cost(prev, cur, a, j)
                if c < best:
                    best, arg = c, a
            e_cur.append(best - s)
            b_cur.append(arg)
        energy[cur] = e_cur
        back[cur] = b_cur

    last = valid[-1]
    total = min(energy[last])
    if math.isinf(total):
        # no finite path: fall back to gate-free per-frame argmax
        for i in valid:
            choices[i] = int(np.argmax(scores[i]))
        return choices, total, True

    j = int(np.argmin(energy[last]))
    for i in reversed(valid):
        choices[i] = j
        if i != valid[0]:
            j = back[i][j]
    return choices, total, False


# ---------------------------------------------------------------------------
# Trackability

def node_positions(model: Model, tree: ParseTree) -> dict[int, tuple[int, int]]:
    """Position of every parse-tree node in its own score map."""
    aog = model.aog
    rho = model.rho
    u = model.cells_per_unit
    root_children = set(aog.root_child_ands())
    out: dict[int, tuple[int, int]] = {}
    obj = tree.object_placement
    queue = [(aog.root, obj.x, obj.y)]
    while queue:
        nid, px, py = queue.pop(0)
        n = aog.node(nid)
        out[nid] = (px, py)
        if n.is_or:
            queue.append((tree.choices[nid], px, py))
        elif n.is_and:
            if n.and_type == TERMINATION:
                out[n.children[0]] = (px, py)
            elif n.and_type == DEFORMATION:
                # terminal sits at its deformed placement
                for p in tree.placements:
                    if p.node_id == n.children[0]:
                        out[p.node_id] = (p.x, p.y)
                        break
            else:
                scale = rho if nid in root_children else 1
                for c in n.children:
                    ch = aog.node(c)
                    queue.append((c, scale * px + rho * u * (ch.region.x - n.region.x),
                                  scale * py + rho * u * (ch.region.y - n.region.y)))
    return out


def trackability(model: Model, tree: ParseTree, smaps: ScoreMaps) -> dict[int, float]:
    """Per-node placement score minus the mean of that node's score map.

    The root entry (key = root Or id) is the whole-object trackability.
    """
    positions = node_positions(model, tree)
    out = {}
    for nid, (px, py) in positions.items():
        m = smaps.maps.get(nid)
        if m is None or not (0 <= py < m.shape[0] and 0 <= px < m.shape[1]):
            continue
        finite = m[np.isfinite(m)]
        mu = float(finite.mean()) if finite.size else 0.0
        out[nid] = float(m[py, px]) - mu
    return out


# ---------------------------------------------------------------------------
# Running statistics and critical-moment flags

@dataclass
class RunningStats:
    count: int = 0
    mean: float = 0.0
    m2: float = 0.0

    def update(self, value: float):
        self.count += 1
        delta = value - self.mean
        self.mean += delta / self.count
        self.m2 += delta * (value - self.mean)

    @property
    def std(self) -> float:
        if self.count < 2:
            return 0.0
        return math.sqrt(self.m2 / (self.count - 1))


@dataclass
class TrackerFlags:
    frames_intrackable: int = 0
    new_valid_samples: int = 0

    def reset(self):
        self.frames_intrackable = 0
        self.new_valid_samples = 0


def update_stats_and_flags(stats: RunningStats, flags: TrackerFlags,
                           root_trackability: float | None, frame_valid: bool,
                           n_intrackable: int = 5, n_new_sample: int = 10) -> bool:
    """Update the trackability Gaussian and the critical-moment counters.

    A frame is intrackable when its trackability falls below
    mean - 3 * std (only once two samples exist).  Intrackable samples are
    excluded from the Gaussian so outliers cannot inflate its variance and
    mask a sustained drop.  Returns whether a critical moment is active
    after the update.
    """
    if frame_valid and root_trackability is not None:
        if stats.count >= 2 and root_trackability < stats.mean - 3.0 * stats.std:
            flags.frames_intrackable += 1
        else:
            stats.update(root_trackability)
        flags.new_valid_samples += 1
    return (flags.frames_intrackable > n_intrackable
            and flags.new_valid_samples > n_new_sample)
