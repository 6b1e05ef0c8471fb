"""Online learning: dataset maintenance, root-template SVM with hard
negative mining, grammar structure selection by per-node error rates,
latent-SVM parameter estimation, majority-vote refinement and model
verification.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import zoom
from scipy.optimize import minimize

from .features import FeatureConfig, FeatureMap, build_pyramid, compute_feature_map, \
    crop_window, deformation_feature
from .geometry import CanonicalGeometry, crop_and_resize
from .grid_aog import DEFORMATION, TERMINATION, Aog, build_full_aog, extract_subgraph
from .parsing import DEFORM_QUAD_FLOOR, Model, ModelParams, _anchor_positions, \
    compute_score_maps, iou, parse, retrieve_parse_tree, score_terminal

MARGIN_CELLS = 4             # context cells around an example window
MINING_MARGIN = -1.0         # negatives scoring above this are hard
MINING_ROUNDS = 5
MINE_PER_POOL = 20
NEG_WORKING_CAP = 400
DEFAULT_DEFORM = np.array([0.1, 0.0, 0.1, 0.0])
MERIT_EPS = 0.05
RELABEL_IOU = 0.7
NEGATIVE_IOU = 0.5           # overlap with the object above this excludes a window
DEFAULT_C = 0.001
RELEARN_CAP = 100


class VerificationFailure(Exception):
    """Raised when no positive admits a sufficiently overlapping placement."""


# ---------------------------------------------------------------------------
# Dataset

@dataclass
class Example:
    frame_id: int
    image: np.ndarray
    box: tuple[float, float, float, float]
    protected: bool = False
    maps: "ExampleMaps | None" = None     # featurization cache


@dataclass
class MiningPool:
    frame_id: int
    image: np.ndarray
    exclude_box: tuple[float, float, float, float]
    pyramid_cache: object = None       # (key, FeaturePyramid)


def _pool_pyramid(pool: MiningPool, geom: "CanonicalGeometry",
                  config: FeatureConfig):
    key = (geom, config)
    if pool.pyramid_cache is None or pool.pyramid_cache[0] != key:
        wimg = geom.warp_image(pool.image)
        S = geom.object_cells
        pool.pyramid_cache = (key, build_pyramid(wimg, config, min_cells=(S, S)))
    return pool.pyramid_cache[1]


@dataclass
class TrainingDataset:
    positives: list[Example] = field(default_factory=list)
    negatives: list[Example] = field(default_factory=list)
    pools: list[MiningPool] = field(default_factory=list)
    max_positives: int = 60
    max_negatives: int = 600

    def add_positive(self, ex: Example):
        self.positives.append(ex)
        self._evict(self.positives, self.max_positives)

    def add_negative(self, ex: Example):
        self.negatives.append(ex)
        self._evict(self.negatives, self.max_negatives)

    @staticmethod
    def _evict(items: list[Example], cap: int):
        # oldest unprotected example goes first; protected ones never leave
        while len(items) > cap:
            for i, ex in enumerate(items):
                if not ex.protected:
                    del items[i]
                    break
            else:
                return


def shifted_boxes(box, d: float):
    """The box plus its eight d-pixel compass shifts."""
    x, y, w, h = box
    out = [box]
    for dy in (-d, 0.0, d):
        for dx in (-d, 0.0, d):
            if dx or dy:
                out.append((x + dx, y + dy, w, h))
    return out


def box_inside(box, frame_shape) -> bool:
    x, y, w, h = box
    H, W = frame_shape[:2]
    return x >= 0 and y >= 0 and x + w <= W and y + h <= H


def init_dataset(frame: np.ndarray, box, cell_size: int = 4) -> TrainingDataset:
    """First-frame dataset: the annotation, its eight local shifts (shifts
    leaving the frame are dropped), and the frame as a mining pool."""
    if not box_inside(box, frame.shape):
        raise ValueError("box outside frame")
    ds = TrainingDataset()
    for b in shifted_boxes(box, float(cell_size)):
        if box_inside(b, frame.shape):
            ds.add_positive(Example(frame_id=0, image=frame, box=b, protected=True))
    ds.pools.append(MiningPool(frame_id=0, image=frame, exclude_box=box))
    return ds


def update_dataset(ds: TrainingDataset, frame_id: int, frame: np.ndarray,
                   result_box, valid: bool, candidate_boxes,
                   tau_nms: float = 0.7) -> TrainingDataset:
    """Append the tracked box as a positive and non-suppressed candidates
    as hard negatives; an invalid frame leaves the dataset unchanged."""
    if not valid:
        return ds
    ds.add_positive(Example(frame_id=frame_id, image=frame, box=result_box))
    for cand in candidate_boxes:
        if iou(cand, result_box) < tau_nms:
            ds.add_negative(Example(frame_id=frame_id, image=frame, box=cand))
    return ds


# ---------------------------------------------------------------------------
# Example featurization (canonical window plus context margin)

@dataclass
class ExampleMaps:
    coarse: FeatureMap
    fine: FeatureMap | None
    margin: int                 # the window sits at (margin, margin) cells


def example_maps(image: np.ndarray, box, geom: CanonicalGeometry,
                 config: FeatureConfig, need_fine: bool,
                 margin: int = MARGIN_CELLS) -> ExampleMaps:
    S = geom.object_cells
    cell = geom.cell_size
    x, y, w, h = box
    mx, my = margin * w / S, margin * h / S
    expanded = (x - mx, y - my, w + 2 * mx, h + 2 * my)
    side = (S + 2 * margin) * cell
    patch = crop_and_resize(image, expanded, (side, side))
    coarse = compute_feature_map(patch, config, 1.0)
    fine = None
    if need_fine:
        patch2 = crop_and_resize(image, expanded, (2 * side, 2 * side))
        fine = compute_feature_map(patch2, config, 0.5)
    return ExampleMaps(coarse=coarse, fine=fine, margin=margin)


def cached_maps(ex: Example, geom, config, need_fine) -> ExampleMaps:
    if ex.maps is None or (need_fine and ex.maps.fine is None):
        ex.maps = example_maps(ex.image, ex.box, geom, config, need_fine)
    return ex.maps


# ---------------------------------------------------------------------------
# Linear SVM core (shared by the root stage and the LSVM stage)

def svm_objective(theta: np.ndarray, X: np.ndarray, y: np.ndarray, C: float):
    """l2-regularized mean hinge loss and its (sub)gradient."""
    scores = X @ theta
    margins = 1.0 - y * scores
    viol = margins > 0
    f = 0.5 * float(theta @ theta) + C / len(y) * float(margins[viol].sum())
    g = theta - C / len(y) * (X[viol].T @ y[viol])
    return f, g


def train_linear_svm(X: np.ndarray, y: np.ndarray, C: float,
                     theta0: np.ndarray | None = None, bounds=None,
                     gtol: float = 1e-4, maxiter: int = 1000) -> np.ndarray:
    if theta0 is None:
        theta0 = np.zeros(X.shape[1])
    res = minimize(svm_objective, theta0, args=(X, y, C), jac=True,
                   method="L-BFGS-B", bounds=bounds,
                   options={"maxiter": maxiter, "gtol": gtol, "ftol": 1e-9})
    return res.x


# ---------------------------------------------------------------------------
# Root template stage

@dataclass
class RootSvm:
    template: np.ndarray        # (S, S, C)
    bias: float
    objective_trace: list[tuple[float, float]]


def _root_feature(ex: Example, geom, config) -> np.ndarray:
    em = cached_maps(ex, geom, config, need_fine=False)
    m = em.margin
    S = geom.object_cells
    return crop_window(em.coarse, m, m, S, S)


def mine_root_negatives(template: np.ndarray, bias: float, pool: MiningPool,
                        geom: CanonicalGeometry, config: FeatureConfig,
                        k: int = MINE_PER_POOL, margin: float = MINING_MARGIN):
    """Top-scoring canonical-size windows under the root template that do
    not overlap the pool's object box."""
    S = geom.object_cells
    cell = geom.cell_size
    pyr = _pool_pyramid(pool, geom, config)
    found = []
    for lvl in pyr.levels:
        score_map = score_terminal(template, lvl) + bias
        s = lvl.scale * cell
        ys, xs = np.nonzero(score_map > margin)
        for yy, xx in zip(ys.tolist(), xs.tolist()):
            wb = (xx * s, yy * s, S * s, S * s)
            ob = geom.to_original(wb)
            if iou(ob, pool.exclude_box) < NEGATIVE_IOU:
                found.append((float(score_map[yy, xx]), ob))
    found.sort(key=lambda t: (-t[0], t[1]))
    # light NMS so the k hard negatives are spatially diverse
    out = []
    for _, b in found[:50 * k]:
        if all(iou(b, o) < NEGATIVE_IOU for o in out):
            out.append(b)
            if len(out) >= k:
                break
    return out


def _box_key(frame_id, box, q: float = 4.0):
    # quantized so near-duplicate windows mined in later rounds collapse
    return (frame_id,) + tuple(int(round(v / q)) for v in box)


def train_root_svm(ds: TrainingDataset, geom: CanonicalGeometry,
                   config: FeatureConfig, C: float = DEFAULT_C) -> RootSvm:
    """Linear SVM over the canonical object window, alternating with hard
    negative mining from the whole-frame pools."""
    if not ds.positives:
        raise ValueError("no positives")
    S = geom.object_cells
    pos = [np.append(_root_feature(p, geom, config), 1.0) for p in ds.positives]
    channels = (pos[0].size - 1) // (S * S)
    neg_keys = set()
    neg = []
    for n in ds.negatives:
        neg.append(np.append(_root_feature(n, geom, config), 1.0))
        neg_keys.add(_box_key(n.frame_id, n.box))

    d = pos[0].size
    theta = np.zeros(d)
    trace = []
    for rnd in range(MINING_ROUNDS):
        template = theta[:-1].reshape(S, S, channels)
        new = 0
        for pool in ds.pools:
            for box in mine_root_negatives(template, float(theta[-1]), pool,
                                           geom, config):
                key = _box_key(pool.frame_id, box)
                if key not in neg_keys:
                    neg_keys.add(key)
                    ex = Example(frame_id=pool.frame_id, image=pool.image, box=box)
                    neg.append(np.append(_root_feature(ex, geom, config), 1.0))
                    new += 1
        if rnd > 0 and new == 0:
            break
        if not neg:
            break
        X = np.vstack(pos + neg)
        if float(np.ptp(X[:, :-1], axis=0).max()) < 1e-12:
            raise ValueError("degenerate training features: all windows identical")
        y = np.concatenate([np.ones(len(pos)), -np.ones(len(neg))])
        before = svm_objective(theta, X, y, C)[0]
        theta = train_linear_svm(X, y, C, theta0=theta)
        after = svm_objective(theta, X, y, C)[0]
        trace.append((before, after))
    return RootSvm(template=theta[:-1].reshape(S, S, channels).copy(),
                   bias=float(theta[-1]), objective_trace=trace)


# ---------------------------------------------------------------------------
# Parameter initialization from the root template

def init_terminal_params(template: np.ndarray, aog: Aog, unit: int,
                         rho: int) -> dict[int, np.ndarray]:
    """Terminal appearance templates cropped from the root template; part
    templates are bilinearly upsampled when parts live one octave down."""
    gw, gh = aog.grid
    if template.shape[:2] != (gh * unit, gw * unit):
        raise ValueError("template does not cover the grid")
    app = {}
    for t in aog.terminals():
        r = t.region
        sub = template[unit * r.y:unit * (r.y + r.h),
                       unit * r.x:unit * (r.x + r.w), :]
        if r.as_tuple() == (0, 0, gw, gh):
            app[t.id] = sub.copy()
        elif rho == 2:
            app[t.id] = zoom(sub, (2, 2, 1), order=1)
        else:
            app[t.id] = sub.copy()
    return app


def default_model_params(aog: Aog, template: np.ndarray, unit: int,
                         rho: int, bias: float = 0.0) -> ModelParams:
    app = init_terminal_params(template, aog, unit, rho)
    gw, gh = aog.grid
    dfm = {n.id: DEFAULT_DEFORM.copy() for n in aog.nodes
           if n.is_and and n.and_type == DEFORMATION
           and n.region.as_tuple() != (0, 0, gw, gh)}
    biases = {a: bias for a in aog.root_child_ands()}
    return ModelParams(appearance=app, deformation=dfm, bias=biases)


# ---------------------------------------------------------------------------
# Node merits and initial structure selection

def _node_position(model: Model, nid: int, margin: int):
    """Canonical position of a node's map entry when the object sits at
    (margin, margin) on the coarse map."""
    aog = model.aog
    n = aog.node(nid)
    rho, u = model.rho, model.cells_per_unit
    gw, gh = aog.grid
    root_level = nid == aog.root or nid in aog.root_child_ands() \
        or (n.is_terminal and n.region.as_tuple() == (0, 0, gw, gh)) \
        or (n.is_and and n.and_type == TERMINATION
            and n.region.as_tuple() == (0, 0, gw, gh))
    if root_level:
        return margin, margin
    return (rho * margin + rho * u * n.region.x,
            rho * margin + rho * u * n.region.y)


def _class_error_rate(pos_scores, neg_scores) -> float:
    if not pos_scores or not neg_scores:
        return 0.5
    thr = (float(np.mean(pos_scores)) + float(np.mean(neg_scores))) / 2.0
    total = len(pos_scores) + len(neg_scores)
    err_gt = (sum(1 for s in pos_scores if not s > thr)
              + sum(1 for s in neg_scores if s > thr)) / total
    err_ge = (sum(1 for s in pos_scores if not s >= thr)
              + sum(1 for s in neg_scores if s >= thr)) / total
    return min(err_gt, err_ge)


def evaluate_node_merits(model: Model, ds: TrainingDataset,
                         geom: CanonicalGeometry,
                         config: FeatureConfig) -> dict[int, float]:
    """Training error rate of every grammar node at the balanced-midpoint
    threshold, scoring each example at its canonical placement."""
    need_fine = model.part_level_offset > 0
    per_node: dict[int, tuple[list, list]] = {n.id: ([], []) for n in model.aog.nodes}
    for label, examples in ((0, ds.positives), (1, ds.negatives)):
        for ex in examples:
            em = cached_maps(ex, geom, config, need_fine)
            smaps = compute_score_maps(model, em.coarse, em.fine or em.coarse)
            for nid, m in smaps.maps.items():
                px, py = _node_position(model, nid, em.margin)
                if 0 <= py < m.shape[0] and 0 <= px < m.shape[1]:
                    v = float(m[py, px])
                    if math.isfinite(v):
                        per_node[nid][label].append(v)
    return {nid: _class_error_rate(p, n) for nid, (p, n) in per_node.items()}


def retrieve_initial_object_aog(full: Aog, merits: dict[int, float],
                                eps: float = MERIT_EPS):
    """Per Or-node keep the lowest-error child plus children within eps of
    it; returns the extracted subgraph and the old-to-new id mapping."""
    kept: dict[int, list[int]] = {}
    seen = set()
    queue = [full.root]
    while queue:
        nid = queue.pop(0)
        if nid in seen:
            continue
        seen.add(nid)
        n = full.node(nid)
        if n.is_or:
            best = min(merits[c] for c in n.children)
            keep = [c for c in n.children if merits[c] <= best + eps]
            if nid == full.root:
                # the whole-object template branch always stays available
                keep += [c for c in n.children
                         if full.node(c).and_type == TERMINATION and c not in keep]
            kept[nid] = keep
            queue.extend(keep)
        elif n.is_and:
            queue.extend(n.children)
    return extract_subgraph(full, kept, with_mapping=True)


def remap_params(params: ModelParams, remap: dict[int, int]) -> ModelParams:
    return ModelParams(
        appearance={remap[k]: v.copy() for k, v in params.appearance.items()
                    if k in remap},
        deformation={remap[k]: v.copy() for k, v in params.deformation.items()
                     if k in remap},
        bias={remap[k]: v for k, v in params.bias.items() if k in remap})


# ---------------------------------------------------------------------------
# Latent SVM

class ThetaLayout:
    """Flat parameter vector layout: terminal templates, deformation
    coefficient blocks, then root-child biases."""

    def __init__(self, model: Model):
        aog = model.aog
        self.app_slices: dict[int, slice] = {}
        self.def_slices: dict[int, slice] = {}
        self.bias_index: dict[int, int] = {}
        self.shapes: dict[int, tuple] = {}
        off = 0
        for t in aog.terminals():
            shape = model.params.appearance[t.id].shape
            size = int(np.prod(shape))
            self.app_slices[t.id] = slice(off, off + size)
            self.shapes[t.id] = shape
            off += size
        for nid in sorted(model.params.deformation):
            self.def_slices[nid] = slice(off, off + 4)
            off += 4
        for a in aog.root_child_ands():
            self.bias_index[a] = off
            off += 1
        self.dim = off

    def pack(self, params: ModelParams) -> np.ndarray:
        v = np.zeros(self.dim)
        for tid, sl in self.app_slices.items():
            v[sl] = params.appearance[tid].ravel()
        for nid, sl in self.def_slices.items():
            v[sl] = params.deformation[nid]
        for a, i in self.bias_index.items():
            v[i] = params.bias[a]
        return v

    def unpack(self, v: np.ndarray) -> ModelParams:
        return ModelParams(
            appearance={tid: v[sl].reshape(self.shapes[tid]).copy()
                        for tid, sl in self.app_slices.items()},
            deformation={nid: v[sl].copy() for nid, sl in self.def_slices.items()},
            bias={a: float(v[i]) for a, i in self.bias_index.items()})

    def bounds(self, floor: float = DEFORM_QUAD_FLOOR):
        out = [(None, None)] * self.dim
        for sl in self.def_slices.values():
            out[sl.start] = (floor, None)       # dx^2 coefficient
            out[sl.start + 2] = (floor, None)   # dy^2 coefficient
        return out


def phi(model: Model, layout: ThetaLayout, em: ExampleMaps, tree) -> np.ndarray:
    """Feature vector with score(tree) = theta . phi."""
    v = np.zeros(layout.dim)
    v[layout.bias_index[tree.choices[model.aog.root]]] = 1.0
    if tree.uses_object_template:
        p = tree.object_placement
        v[layout.app_slices[p.node_id]] = crop_window(em.coarse, p.x, p.y, p.w, p.h)
    fine = em.fine or em.coarse
    anchors = _anchor_positions(model, tree)
    for p in tree.placements:
        v[layout.app_slices[p.node_id]] = crop_window(fine, p.x, p.y, p.w, p.h)
        a = anchors.get(p.node_id)
        if a is not None:
            and_id, ax, ay = a
            v[layout.def_slices[and_id]] = -deformation_feature(p.x - ax, p.y - ay)
    return v


def relabel_positive(model: Model, em: ExampleMaps,
                     iou_floor: float = RELABEL_IOU):
    """Best parse tree whose object window overlaps the annotation window
    by at least iou_floor; None when no placement qualifies."""
    smaps = compute_score_maps(model, em.coarse, em.fine or em.coarse)
    root_map = smaps.maps[model.aog.root]
    S = model.aog.grid[0] * model.cells_per_unit
    m = em.margin
    ann = (m, m, S, S)
    best, pos = -np.inf, None
    for yy in range(root_map.shape[0]):
        for xx in range(root_map.shape[1]):
            v = root_map[yy, xx]
            if math.isfinite(v) and v > best \
                    and iou((xx, yy, S, S), ann) >= iou_floor:
                best, pos = float(v), (xx, yy)
    if pos is None:
        return None
    return retrieve_parse_tree(model, smaps, pos[0], pos[1])


def negative_tree(model: Model, em: ExampleMaps):
    """Arg-max parse tree of a negative at its own window."""
    smaps = compute_score_maps(model, em.coarse, em.fine or em.coarse)
    return retrieve_parse_tree(model, smaps, em.margin, em.margin)


def mine_model_negatives(model: Model, pool: MiningPool, geom: CanonicalGeometry,
                         config: FeatureConfig, k: int = MINE_PER_POOL,
                         margin: float = MINING_MARGIN):
    """High-scoring detections away from the object box, for use as hard
    negatives."""
    pyr = _pool_pyramid(pool, geom, config)
    dets, _ = parse(pyr, model, tau=margin, tau_nms=NEGATIVE_IOU, n_best=4 * k)
    out = []
    for d in dets:
        ob = geom.to_original(d.window)
        if iou(ob, pool.exclude_box) < NEGATIVE_IOU:
            out.append(ob)
        if len(out) >= k:
            break
    return out


@dataclass
class LsvmResult:
    params: ModelParams
    tau_g: float
    positive_trees: list
    objective_trace: list[tuple[float, float]]


def lsvm_train(model: Model, ds: TrainingDataset, geom: CanonicalGeometry,
               config: FeatureConfig, C: float = DEFAULT_C, rounds: int = 2,
               mine: bool = True, iou_floor: float = RELABEL_IOU) -> LsvmResult:
    """Alternating latent relabeling, hard negative mining and convex
    parameter optimization.  tau_G is the minimum relabeled-positive score
    under the final parameters."""
    need_fine = model.part_level_offset > 0
    layout = ThetaLayout(model)
    theta = layout.pack(model.params)
    bounds = layout.bounds()
    trace = []

    neg_phis: list[np.ndarray] = []
    neg_keys = set()

    def add_negative(frame_id, image, box):
        key = _box_key(frame_id, box)
        if key in neg_keys:
            return 0
        neg_keys.add(key)
        em = example_maps(image, box, geom, config, need_fine)
        neg_phis.append(phi(model, layout, em, negative_tree(model, em)))
        return 1

    pos_phis: list[np.ndarray] = []
    pos_trees: list = []
    for rnd in range(rounds):
        model.params = layout.unpack(theta)
        # (a) latent positive relabeling
        pos_phis, pos_trees = [], []
        for p in ds.positives:
            em = cached_maps(p, geom, config, need_fine)
            tree = relabel_positive(model, em, iou_floor)
            if tree is not None:
                pos_phis.append(phi(model, layout, em, tree))
                pos_trees.append(tree)
        if not pos_phis:
            raise VerificationFailure("no positive admits an overlapping placement")
        # (b) hard negative mining alternated with (c) convex optimization
        for n in ds.negatives:
            em = cached_maps(n, geom, config, need_fine)
            add_negative(n.frame_id, n.image, n.box)
        for it in range(MINING_ROUNDS):
            X = np.vstack(pos_phis + neg_phis) if neg_phis else np.vstack(pos_phis)
            y = np.concatenate([np.ones(len(pos_phis)), -np.ones(len(neg_phis))])
            before = svm_objective(theta, X, y, C)[0]
            theta = train_linear_svm(X, y, C, theta0=theta, bounds=bounds)
            trace.append((before, svm_objective(theta, X, y, C)[0]))
            model.params = layout.unpack(theta)
            if len(neg_phis) > NEG_WORKING_CAP:
                # shrink the working set to the hardest negatives
                scores = [float(np.dot(theta, f)) for f in neg_phis]
                order = np.argsort(scores)[::-1][:NEG_WORKING_CAP]
                keep = sorted(order.tolist())
                neg_phis[:] = [neg_phis[i] for i in keep]
            if not mine:
                break
            new = 0
            for pool in ds.pools:
                for box in mine_model_negatives(model, pool, geom, config):
                    new += add_negative(pool.frame_id, pool.image, box)
            if new == 0:
                break

    tau_g = min(float(np.dot(theta, f)) for f in pos_phis)
    return LsvmResult(params=layout.unpack(theta), tau_g=tau_g,
                      positive_trees=pos_trees, objective_trace=trace)


# ---------------------------------------------------------------------------
# Majority-vote refinement and verification

def config_key(tree) -> tuple:
    return tuple(sorted(tree.choices.items()))


def prune_majority_vote(model: Model, result: LsvmResult, ds: TrainingDataset,
                        geom: CanonicalGeometry, config: FeatureConfig,
                        threshold: float = 0.10, C: float = DEFAULT_C):
    """Drop part configurations chosen by fewer than `threshold` of the
    relabeled positives (keeping at least the majority one), then one more
    round of relabeling, mining and retraining."""
    counts: dict[tuple, int] = {}
    by_key: dict[tuple, object] = {}
    for tree in result.positive_trees:
        k = config_key(tree)
        counts[k] = counts.get(k, 0) + 1
        by_key[k] = tree
    total = sum(counts.values())
    survivors = [k for k, c in counts.items() if c >= threshold * total]
    if not survivors:
        survivors = [max(counts, key=lambda k: (counts[k], k))]

    kept: dict[int, set] = {}
    for k in survivors:
        for oid, cid in by_key[k].choices.items():
            kept.setdefault(oid, set()).add(cid)
    aog = model.aog
    for c in aog.node(aog.root).children:
        # the whole-object template branch always stays available
        if aog.node(c).and_type == TERMINATION:
            kept.setdefault(aog.root, set()).add(c)
    sub, remap = extract_subgraph(model.aog, {o: sorted(c) for o, c in kept.items()},
                                  with_mapping=True)
    pruned = Model(aog=sub, params=remap_params(result.params, remap),
                   tau=model.tau, feature_config=model.feature_config,
                   channels=model.channels,
                   part_level_offset=model.part_level_offset,
                   deform_radius=model.deform_radius,
                   cells_per_unit=model.cells_per_unit)
    pruned.validate()
    final = lsvm_train(pruned, ds, geom, config, C=C, rounds=1)
    pruned.params = final.params
    pruned.tau = final.tau_g
    return pruned, final


def calibrate_tau(model: Model, ds: TrainingDataset, geom: CanonicalGeometry,
                  config: FeatureConfig, iou_floor: float = RELABEL_IOU,
                  max_frames: int = 4, slack: float = 1e-3) -> float:
    """Detection threshold from live parse scores of the positive frames.

    Window-crop training scores run systematically higher than pyramid
    detection scores (crops are perfectly cell-aligned and exactly scaled),
    so the threshold is taken from detections of the training frames
    instead: the midpoint between the lowest overlapping-detection score
    and the strongest detection that misses the annotation (IoU < 0.5).
    The margin absorbs the sub-cell alignment jitter of unseen frames.
    Falls back to the crop-based model.tau when no training frame yields
    an overlapping detection.
    """
    S = geom.object_cells
    frames = []
    seen = set()
    for p in ds.positives:
        if p.frame_id not in seen:
            seen.add(p.frame_id)
            frames.append(p)
    frames = frames[:1] + frames[1:][-(max_frames - 1):] if frames else []
    pos_scores = []
    neg_scores = []
    for p in frames:
        wimg = geom.warp_image(p.image)
        try:
            pyr = build_pyramid(wimg, config, min_cells=(S, S))
        except ValueError:
            continue
        dets, _ = parse(pyr, model, tau=float("-inf"), n_best=10, tau_nms=0.5)
        best = None
        for d in dets:
            ov = iou(geom.to_original(d.window), p.box)
            if ov >= iou_floor:
                best = d.score if best is None else max(best, d.score)
            elif ov < 0.5:
                neg_scores.append(d.score)
        if best is not None:
            pos_scores.append(best)
    if not pos_scores:
        return model.tau
    lo = min(pos_scores)
    if neg_scores and max(neg_scores) < lo:
        return 0.5 * (lo + max(neg_scores))
    return lo - slack


def verify_model(model: Model, geom: CanonicalGeometry, config: FeatureConfig,
                 frame: np.ndarray, box, tau_nms: float = 0.7) -> bool:
    """Accept iff the top whole-frame detection scores above tau_G and
    overlaps the annotation by at least the NMS threshold."""
    S = geom.object_cells
    wimg = geom.warp_image(frame)
    try:
        pyr = build_pyramid(wimg, config, min_cells=(S, S))
    except ValueError:
        return False
    dets, _ = parse(pyr, model, tau=float("-inf"), n_best=1)
    if not dets:
        return False
    top = dets[0]
    return top.score > model.tau and iou(geom.to_original(top.window), box) >= tau_nms


# ---------------------------------------------------------------------------
# Full pipeline

def object_template_only_model(full: Aog, root: RootSvm, ds, geom, config,
                               channels: int) -> Model:
    """Degenerate fallback grammar: root Or with just the whole-object
    terminal under its termination wrapper."""
    rn = full.node(full.root)
    wrapper = [c for c in rn.children if full.node(c).and_type == TERMINATION]
    sub = extract_subgraph(full, {full.root: wrapper})
    obj_term = sub.node(sub.root_child_ands()[0]).children[0]
    params = ModelParams(appearance={obj_term: root.template.copy()},
                         deformation={},
                         bias={sub.root_child_ands()[0]: root.bias})
    model = Model(aog=sub, params=params, tau=float("-inf"),
                  feature_config=config, channels=channels,
                  cells_per_unit=geom.unit)
    model.validate()
    # threshold from the fixed-position positive scores
    scores = []
    for p in ds.positives:
        em = cached_maps(p, geom, config, need_fine=False)
        smaps = compute_score_maps(model, em.coarse, em.coarse)
        scores.append(float(smaps.maps[sub.root][em.margin, em.margin]))
    model.tau = min(scores) if scores else float("-inf")
    return model


def learn_object_aog(ds: TrainingDataset, geom: CanonicalGeometry,
                     config: FeatureConfig, C: float = DEFAULT_C,
                     eps: float = MERIT_EPS, deform_radius: int = 3) -> Model:
    """Root SVM, terminal init, merit-based structure selection, LSVM,
    majority-vote pruning and verification; falls back to parts at twice
    the resolution, then to the object template alone (never fails)."""
    if not ds.positives:
        raise ValueError("empty dataset")
    frame1 = ds.positives[0]
    channels = config.channels(frame1.image.ndim == 3)
    g = geom.grid_side
    full = build_full_aog((g, g))

    root = train_root_svm(ds, geom, config, C=C)

    for offset in (0, config.interval):
        rho = 2 if offset else 1
        params0 = default_model_params(full, root.template, geom.unit, rho,
                                       bias=root.bias)
        full_model = Model(aog=full, params=params0, tau=float("-inf"),
                           feature_config=config, channels=channels,
                           part_level_offset=offset, deform_radius=deform_radius,
                           cells_per_unit=geom.unit)
        full_model.validate()
        merits = evaluate_node_merits(full_model, ds, geom, config)
        sub, remap = retrieve_initial_object_aog(full, merits, eps)
        model = Model(aog=sub, params=remap_params(params0, remap),
                      tau=float("-inf"), feature_config=config,
                      channels=channels, part_level_offset=offset,
                      deform_radius=deform_radius, cells_per_unit=geom.unit)
        model.validate()
        try:
            result = lsvm_train(model, ds, geom, config, C=C, rounds=2)
            model.params = result.params
            model.tau = result.tau_g
            pruned, _ = prune_majority_vote(model, result, ds, geom, config, C=C)
        except VerificationFailure:
            continue
        pruned.tau = calibrate_tau(pruned, ds, geom, config)
        if verify_model(pruned, geom, config, frame1.image, frame1.box):
            return pruned
    fallback = object_template_only_model(full, root, ds, geom, config, channels)
    fallback.tau = calibrate_tau(fallback, ds, geom, config)
    return fallback


def select_relearn_frames(history, cap: int = RELEARN_CAP):
    """Frames used for structure re-learning: the first ten valid results
    in order, then the remaining valid ones newest-first, at most `cap`."""
    valid = [h for h in history if h[2]]
    head = valid[:10]
    tail = list(reversed(valid[10:]))
    return (head + tail)[:cap]
