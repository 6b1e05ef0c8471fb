"""Online tracking engine: per-frame ROI parsing with whole-frame
fallback, median-flow motion gating, sliding-window temporal decoding,
dataset maintenance and structure re-learning at critical moments.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .features import FeatureConfig, build_pyramid
from .geometry import (DEFAULT_HEADROOM, DEFAULT_UNIT, CanonicalGeometry,
                       canonical_geometry)
from .learning import (Example, MiningPool, TrainingDataset, box_inside,
                       init_dataset, learn_object_aog, select_relearn_frames,
                       shifted_boxes, update_dataset)
from .parsing import Model, iou, parse
from .tracking import (FlowPrediction, RunningStats, TrackerFlags,
                       compute_roi, median_flow_predict, motion_cost,
                       temporal_dp, trackability, update_stats_and_flags)

INF = float("inf")

DEFAULT_ENGINE_C = 10.0


@dataclass
class TrackerConfig:
    cell_size: int = 4
    interval: int = 6
    use_color: bool = True
    unit: int = DEFAULT_UNIT
    headroom: float = DEFAULT_HEADROOM
    grid_side: int | None = None        # None: picked from the initial box size
    s_roi: float = 3.0
    n_best: int = 10
    tau_nms: float = 0.7
    tau_motion: float = 0.3
    window: int = 5                     # temporal decoding span (frames)
    n_intrackable: int = 5
    n_new_sample: int = 10
    lsvm_c: float = DEFAULT_ENGINE_C
    relearn_cap: int = 100
    allow_relearn: bool = True

    def feature_config(self) -> FeatureConfig:
        return FeatureConfig(cell_size=self.cell_size, interval=self.interval,
                             color=self.use_color)


@dataclass
class FrameResult:
    frame_index: int
    box: tuple[float, float, float, float] | None   # None for invalid frames
    score: float
    valid: bool
    searched_whole_frame: bool
    trackability: float                 # nan when unavailable

    def csv_row(self) -> str:
        x, y, w, h = self.box if self.box is not None else (math.nan,) * 4
        return "%d,%.3f,%.3f,%.3f,%.3f,%.6f,%d,%d,%.6f" % (
            self.frame_index, x, y, w, h, self.score,
            int(self.valid), int(self.searched_whole_frame), self.trackability)


CSV_HEADER = "frame_index,x,y,w,h,score,valid,searched_whole_frame,trackability"


def results_to_csv(results: list[FrameResult]) -> str:
    return "\n".join([CSV_HEADER] + [r.csv_row() for r in results]) + "\n"


@dataclass
class _WindowFrame:
    index: int
    boxes: list            # candidate boxes, original coordinates
    scores: list[float]
    flow: FlowPrediction   # prediction from the previous frame


class _FrameStore:
    """Bounded store of (index, image, box, valid): the first `head` valid
    frames are kept forever, later ones in a ring of size `ring`."""

    def __init__(self, head: int = 10, ring: int = 90):
        self.head_cap = head
        self.head: list = []
        self.ring: deque = deque(maxlen=ring)

    def add(self, index, image, box, valid):
        entry = (index, image, box, valid)
        if valid and len(self.head) < self.head_cap:
            self.head.append(entry)
        else:
            self.ring.append(entry)

    def entries(self):
        return self.head + list(self.ring)


class Tracker:
    """Single-object tracker; construct with the first frame and its box,
    then call step() per frame and finish() once at the end."""

    def __init__(self, frame: np.ndarray, box, config: TrackerConfig | None = None):
        self.config = config or TrackerConfig()
        cfg = self.config
        box = tuple(float(v) for v in box)
        self.geom = canonical_geometry(box, cell_size=cfg.cell_size,
                                       unit=cfg.unit, headroom=cfg.headroom,
                                       grid_side=cfg.grid_side)
        self.fcfg = cfg.feature_config()
        self.ds = init_dataset(frame, box, cell_size=cfg.cell_size)
        self.model = learn_object_aog(self.ds, self.geom, self.fcfg, C=cfg.lsvm_c)

        self.stats = RunningStats()
        self.flags = TrackerFlags()
        self.store = _FrameStore(ring=max(10, cfg.relearn_cap - 10))
        self.window: deque[_WindowFrame] = deque()
        self.results: dict[int, FrameResult] = {}
        self.n_relearns = 0
        self.relearn_frames: list[int] = []
        self.frame_index = 0
        self.finished = False

        self.prev_frame = frame
        self.prev_box = box             # most recent provisional box
        self.prev_valid = True
        self.anchor_box = box           # last committed (window-exit) box

        score, tr = self._first_frame_score(frame, box)
        update_stats_and_flags(self.stats, self.flags, tr, True,
                               cfg.n_intrackable, cfg.n_new_sample)
        self.results[0] = FrameResult(0, box, score, True, False,
                                      tr if tr is not None else math.nan)
        self.store.add(0, frame, box, True)

    # -- parsing helpers ----------------------------------------------------

    def _first_frame_score(self, frame, box):
        """Score and trackability of the annotated box on the first frame."""
        dets, smaps, _ = self._search(frame, box, whole=False)
        best = None
        for d, obox in dets:
            if iou(obox, box) >= 0.5 and (best is None or d.score > best[0].score):
                best = (d, obox)
        if best is None:
            return self.model.tau, None
        d, _ = best
        tr = trackability(self.model, d.tree, smaps[d.tree.object_placement.level])
        return d.score, tr.get(self.model.aog.root)

    def _search(self, frame, center_box, whole: bool):
        """Parse a ROI (or the whole frame) in canonical coordinates.

        Returns ([(Detection, original-space box)], score maps per level,
        searched_whole_frame).
        """
        cfg = self.config
        geom = self.geom
        wimg = geom.warp_image(frame)
        H, W = wimg.shape[:2]
        S = geom.object_cells
        ox = oy = 0
        crop = wimg
        if not whole:
            rx, ry, rw, rh = compute_roi(geom.to_warped(center_box), (W, H),
                                         cfg.s_roi)
            x0, y0 = int(rx), int(ry)
            x1, y1 = min(W, int(math.ceil(rx + rw))), min(H, int(math.ceil(ry + rh)))
            if (x1 - x0) >= S * cfg.cell_size and (y1 - y0) >= S * cfg.cell_size:
                crop = wimg[y0:y1, x0:x1]
                ox, oy = x0, y0
            else:
                whole = True
        pyramid = build_pyramid(crop, self.fcfg, min_cells=(S, S))
        dets, smaps = parse(pyramid, self.model, tau_nms=cfg.tau_nms,
                            n_best=cfg.n_best, keep_maps=True)
        out = []
        for d in dets:
            x, y, w, h = d.window
            out.append((d, geom.to_original((x + ox, y + oy, w, h))))
        return out, smaps, whole

    # -- temporal decoding --------------------------------------------------

    def _pair_cost(self, frames: list[_WindowFrame]):
        tau_m = self.config.tau_motion

        def cost(ip, ic, a, b):
            box_b = frames[ic].boxes[b]
            if ic == ip + 1:
                return motion_cost(box_b, frames[ic].flow, tau_m)
            # invalid frames in between: identity-bridged gate
            return 0.0 if iou(frames[ip].boxes[a], box_b) >= tau_m else INF

        return cost

    def _decode(self):
        """Viterbi over the committed anchor plus the current window."""
        frames = [_WindowFrame(index=-1, boxes=[self.anchor_box], scores=[0.0],
                               flow=FlowPrediction(box=None))]
        frames += list(self.window)
        choices, _, _ = temporal_dp([f.scores for f in frames],
                                    self._pair_cost(frames))
        return choices[1:], frames[1:]

    def _apply_choices(self, choices, frames):
        for c, f in zip(choices, frames):
            r = self.results[f.index]
            if c is None:
                continue
            new_box = f.boxes[c]
            if r.box is None or new_box != r.box:
                self.results[f.index] = FrameResult(
                    f.index, new_box, f.scores[c], r.valid,
                    r.searched_whole_frame, r.trackability)

    # -- per-frame step -----------------------------------------------------

    def step(self, frame: np.ndarray) -> FrameResult:
        if self.finished:
            raise RuntimeError("tracker already finished")
        cfg = self.config
        self.frame_index += 1
        t = self.frame_index

        whole = not self.prev_valid
        dets, smaps, whole = self._search(frame, self.prev_box, whole)
        flow = (median_flow_predict(self.prev_frame, frame, self.prev_box)
                if self.prev_valid else FlowPrediction(box=None))

        boxes = [obox for _, obox in dets]
        scores = [d.score for d, _ in dets]
        self.window.append(_WindowFrame(index=t, boxes=boxes, scores=scores,
                                        flow=flow))
        self.results[t] = FrameResult(t, None, -INF, bool(dets), whole, math.nan)

        choices, frames = self._decode()
        self._apply_choices(choices, frames)

        valid = bool(dets)
        result = self.results[t]
        tr = None
        if valid:
            j = choices[-1]
            det = dets[j][0]
            level = det.tree.object_placement.level
            tr_all = trackability(self.model, det.tree, smaps[level])
            tr = tr_all.get(self.model.aog.root)
            result = FrameResult(t, boxes[j], scores[j], True, whole,
                                 tr if tr is not None else math.nan)
            self.results[t] = result

        critical = update_stats_and_flags(self.stats, self.flags, tr, valid,
                                          cfg.n_intrackable, cfg.n_new_sample)
        if valid:
            update_dataset(self.ds, t, frame, result.box, True, boxes,
                           tau_nms=cfg.tau_nms)
        self.store.add(t, frame, result.box, valid)

        if critical and cfg.allow_relearn:
            self._relearn()

        # slide the window: the exiting frame's choice is committed
        if len(self.window) > cfg.window:
            exiting = self.window.popleft()
            r = self.results[exiting.index]
            if r.box is not None:
                self.anchor_box = r.box

        self.prev_frame = frame
        self.prev_valid = valid
        if valid:
            self.prev_box = result.box
        return result

    # -- re-learning --------------------------------------------------------

    def _relearn(self):
        cfg = self.config
        entries = self.store.entries()
        by_index = {e[0]: e for e in entries}
        history = [(e[0], e[2], e[3]) for e in sorted(entries)]
        selected = select_relearn_frames(history, cap=cfg.relearn_cap)
        if not selected:
            return

        first = self.ds.positives[0]
        ds = TrainingDataset()
        for b in shifted_boxes(first.box, float(cfg.cell_size)):
            if box_inside(b, first.image.shape):
                ds.add_positive(Example(frame_id=first.frame_id,
                                        image=first.image, box=b, protected=True))
        ds.pools.append(MiningPool(frame_id=first.frame_id, image=first.image,
                                   exclude_box=first.box))
        latest = None
        for idx, box, _ in selected:
            if idx == first.frame_id:
                continue
            image = by_index[idx][1]
            ds.add_positive(Example(frame_id=idx, image=image, box=box))
            if latest is None or idx > latest[0]:
                latest = (idx, image, box)
        if latest is not None:
            ds.pools.append(MiningPool(frame_id=latest[0], image=latest[1],
                                       exclude_box=latest[2]))

        self.model = learn_object_aog(ds, self.geom, self.fcfg, C=cfg.lsvm_c)
        self.ds = ds
        self.flags.reset()
        self.stats = RunningStats()
        self.n_relearns += 1
        self.relearn_frames.append(self.frame_index)

    # -- finalization -------------------------------------------------------

    def finish(self) -> list[FrameResult]:
        """Final backward pass over the frames still inside the window."""
        if not self.finished:
            if self.window:
                choices, frames = self._decode()
                self._apply_choices(choices, frames)
            self.finished = True
        return [self.results[i] for i in sorted(self.results)]


def track(frames, init_box, config: TrackerConfig | None = None,
          tracker_out: list | None = None) -> list[FrameResult]:
    """Track an object through an iterable of frames; the first frame is
    annotated with `init_box`.  `tracker_out`, when given, receives the
    Tracker instance (for inspection of re-learn counters etc.)."""
    it = iter(frames)
    first = next(it)
    tracker = Tracker(first, init_box, config)
    if tracker_out is not None:
        tracker_out.append(tracker)
    for frame in it:
        tracker.step(frame)
    return tracker.finish()
