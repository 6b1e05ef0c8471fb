"""Spatial parsing: bottom-up score maps over a feature pyramid and
top-down retrieval of the best parse trees.

All maps for one object placement level are registered to the object
window origin.  Part nodes may live one octave below the object (twice
the spatial resolution); the resolution change happens where a root child
And-node composes its part Or-children.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .features import FeatureConfig, FeatureMap, FeaturePyramid, deformation_feature
from .grid_aog import (
    AND, DECOMPOSITION, DEFORMATION, OR, TERMINATION,
    Aog, ParseTree, Placement,
)

NEG_INF = float("-inf")

DEFAULT_DEFORM_RADIUS = 3
DEFORM_QUAD_FLOOR = 0.01


@dataclass
class ModelParams:
    appearance: dict[int, np.ndarray]    # terminal id -> (h, w, channels)
    deformation: dict[int, np.ndarray]   # deformation And id -> [dx2, dx, dy2, dy]
    bias: dict[int, float]               # root-child And id -> bias

    def validate(self, aog: Aog, channels: int, rho: int, unit: int = 1):
        gw, gh = aog.grid
        for t in aog.terminals():
            app = self.appearance[t.id]
            if t.region.as_tuple() == (0, 0, gw, gh):
                want = (t.region.h * unit, t.region.w * unit, channels)
            else:
                want = (t.region.h * rho * unit, t.region.w * rho * unit, channels)
            if app.shape != want:
                raise ValueError("terminal %d template %r != %r" % (t.id, app.shape, want))
        for n in aog.nodes:
            if n.is_and and n.and_type == DEFORMATION and n.region.as_tuple() != (0, 0, gw, gh):
                d = self.deformation[n.id]
                if d.shape != (4,):
                    raise ValueError("bad deformation vector at %d" % n.id)
                if d[0] < DEFORM_QUAD_FLOOR - 1e-12 or d[2] < DEFORM_QUAD_FLOOR - 1e-12:
                    raise ValueError("quadratic deformation coefficient below floor at %d" % n.id)
        for a in aog.root_child_ands():
            if a not in self.bias:
                raise ValueError("missing bias for root child %d" % a)


@dataclass
class Model:
    """Object grammar plus parameters, threshold and feature configuration."""

    aog: Aog
    params: ModelParams
    tau: float
    feature_config: FeatureConfig
    channels: int
    part_level_offset: int = 0          # 0 or feature_config.interval
    deform_radius: int = DEFAULT_DEFORM_RADIUS
    cells_per_unit: int = 1             # feature cells per grid unit

    @property
    def rho(self) -> int:
        return 2 if self.part_level_offset else 1

    def validate(self):
        self.params.validate(self.aog, self.channels, self.rho, self.cells_per_unit)

    @property
    def object_terminal(self) -> int:
        gw, gh = self.aog.grid
        for t in self.aog.terminals():
            if t.region.as_tuple() == (0, 0, gw, gh):
                return t.id
        raise ValueError("no object terminal")


@dataclass
class Detection:
    window: tuple[float, float, float, float]    # image-space x, y, w, h
    score: float
    tree: ParseTree


@dataclass
class ScoreMaps:
    """Per-node score maps for one (coarse level, fine level) pair."""

    maps: dict[int, np.ndarray]
    def_dx: dict[int, np.ndarray]
    def_dy: dict[int, np.ndarray]
    coarse_level: int
    fine_level: int


def score_terminal(template: np.ndarray, level: FeatureMap) -> np.ndarray:
    """Valid cross-correlation of a (h, w, C) template with a level."""
    th, tw, tc = template.shape
    H, W, C = level.data.shape
    if tc != C:
        raise ValueError("channel mismatch")
    oh, ow = H - th + 1, W - tw + 1
    if oh < 1 or ow < 1:
        raise ValueError("level smaller than template")
    out = np.zeros((oh, ow))
    for i in range(th):
        for j in range(tw):
            out += level.data[i:i + oh, j:j + ow, :] @ template[i, j, :]
    return out


def score_or(children: list[np.ndarray]) -> np.ndarray:
    """Pointwise max of co-registered child maps (first map wins ties)."""
    out = children[0].copy()
    for m in children[1:]:
        np.maximum(out, m, out=out)
    return out


def local_max(child: np.ndarray, theta_def: np.ndarray, radius: int):
    """Bounded deformation max: per position, the best displaced child score
    minus the quadratic penalty.  Returns (map, argmax dx, argmax dy)."""
    H, W = child.shape
    best = np.full((H, W), NEG_INF)
    bdx = np.zeros((H, W), dtype=np.int64)
    bdy = np.zeros((H, W), dtype=np.int64)
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            pen = float(np.dot(theta_def, deformation_feature(dx, dy)))
            ys0, ys1 = max(0, -dy), min(H, H - dy)
            xs0, xs1 = max(0, -dx), min(W, W - dx)
            if ys0 >= ys1 or xs0 >= xs1:
                continue
            val = child[ys0 + dy:ys1 + dy, xs0 + dx:xs1 + dx] - pen
            region = best[ys0:ys1, xs0:xs1]
            upd = val > region
            region[upd] = val[upd]
            bdx[ys0:ys1, xs0:xs1][upd] = dx
            bdy[ys0:ys1, xs0:xs1][upd] = dy
    return best, bdx, bdy


def _compose(parent_shape, child_map, off_y, off_x):
    """Read child_map at parent positions shifted by a fixed offset,
    -inf where the shifted position falls outside the child map."""
    ph, pw = parent_shape
    ch, cw = child_map.shape
    out = np.full((ph, pw), NEG_INF)
    h = min(ph, ch - off_y)
    w = min(pw, cw - off_x)
    if h > 0 and w > 0:
        out[:h, :w] = child_map[off_y:off_y + h, off_x:off_x + w]
    return out


def _gather_scaled(parent_shape, child_map, rho, off_y, off_x):
    """Like _compose but parent coordinates are scaled by rho into the child
    map (resolution change at root composition)."""
    if rho == 1:
        return _compose(parent_shape, child_map, off_y, off_x)
    ph, pw = parent_shape
    ch, cw = child_map.shape
    ys = rho * np.arange(ph) + off_y
    xs = rho * np.arange(pw) + off_x
    out = np.full((ph, pw), NEG_INF)
    yv = ys < ch
    xv = xs < cw
    out[np.ix_(yv, xv)] = child_map[np.ix_(ys[yv], xs[xv])]
    return out


def compute_score_maps(model: Model, coarse: FeatureMap, fine: FeatureMap,
                       coarse_level: int = 0, fine_level: int = 0) -> ScoreMaps:
    """Bottom-up pass over the grammar for one object placement level.

    `coarse` hosts the object template; `fine` hosts all part templates
    (the same map when part_level_offset is 0).
    """
    aog = model.aog
    rho = model.rho
    u = model.cells_per_unit
    gw, gh = aog.grid
    root = aog.node(aog.root)
    obj_term = model.object_terminal
    root_children = set(aog.root_child_ands())

    coarse_shape = (coarse.cells_h - u * gh + 1, coarse.cells_w - u * gw + 1)
    if coarse_shape[0] < 1 or coarse_shape[1] < 1:
        raise ValueError("coarse level smaller than the object template")

    maps: dict[int, np.ndarray] = {}
    def_dx: dict[int, np.ndarray] = {}
    def_dy: dict[int, np.ndarray] = {}

    for nid in aog.topo_bottom_up():
        n = aog.node(nid)
        if n.is_terminal:
            if nid == obj_term:
                maps[nid] = score_terminal(model.params.appearance[nid], coarse)
            else:
                maps[nid] = score_terminal(model.params.appearance[nid], fine)
        elif n.is_and:
            if n.and_type == TERMINATION:
                maps[nid] = maps[n.children[0]].copy()
            elif n.and_type == DEFORMATION:
                m, dx, dy = local_max(maps[n.children[0]],
                                      model.params.deformation[nid],
                                      model.deform_radius)
                maps[nid], def_dx[nid], def_dy[nid] = m, dx, dy
            else:  # decomposition
                c1, c2 = (aog.node(c) for c in n.children)
                if nid in root_children:
                    shape = coarse_shape
                    parts = [
                        _gather_scaled(shape, maps[c.id], rho,
                                       rho * u * (c.region.y - n.region.y),
                                       rho * u * (c.region.x - n.region.x))
                        for c in (c1, c2)]
                else:
                    shape = maps_shape_for(n, fine, rho, u)
                    parts = [
                        _compose(shape, maps[c.id],
                                 rho * u * (c.region.y - n.region.y),
                                 rho * u * (c.region.x - n.region.x))
                        for c in (c1, c2)]
                maps[nid] = parts[0] + parts[1]
            if nid in root_children:
                maps[nid] = maps[nid] + model.params.bias[nid]
        else:  # Or
            maps[nid] = score_or([maps[c] for c in n.children])

    return ScoreMaps(maps=maps, def_dx=def_dx, def_dy=def_dy,
                     coarse_level=coarse_level, fine_level=fine_level)


def maps_shape_for(node, fine: FeatureMap, rho: int, unit: int = 1):
    return (fine.cells_h - rho * unit * node.region.h + 1,
            fine.cells_w - rho * unit * node.region.w + 1)


def retrieve_parse_tree(model: Model, smaps: ScoreMaps, x: int, y: int) -> ParseTree:
    """Top-down BFS: select arg-max Or branches and part placements for the
    object anchored at coarse position (x, y)."""
    aog = model.aog
    rho = model.rho
    u = model.cells_per_unit
    obj_term = model.object_terminal
    root_children = set(aog.root_child_ands())
    gw, gh = aog.grid

    choices: dict[int, int] = {}
    placements: list[Placement] = []
    uses_object_template = False
    score = float(smaps.maps[aog.root][y, x])

    # queue entries: (node id, x, y) in the node's own map coordinates
    queue = [(aog.root, x, y)]
    while queue:
        nid, px, py = queue.pop(0)
        n = aog.node(nid)
        if n.is_or:
            best, bid = NEG_INF, None
            for c in sorted(n.children):
                v = smaps.maps[c][py, px]
                if v > best:
                    best, bid = v, c
            choices[nid] = bid
            queue.append((bid, px, py))
        elif n.is_and:
            if n.and_type == TERMINATION:
                queue.append((n.children[0], px, py))
            elif n.and_type == DEFORMATION:
                dx = int(smaps.def_dx[nid][py, px])
                dy = int(smaps.def_dy[nid][py, px])
                queue.append((n.children[0], px + dx, py + dy))
            else:
                scale = rho if nid in root_children else 1
                for c in n.children:
                    ch = aog.node(c)
                    cx = scale * px + rho * u * (ch.region.x - n.region.x)
                    cy = scale * py + rho * u * (ch.region.y - n.region.y)
                    queue.append((c, cx, cy))
        else:
            if nid == obj_term:
                uses_object_template = True
            else:
                placements.append(Placement(nid, smaps.fine_level, px, py,
                                            rho * u * n.region.w, rho * u * n.region.h))
    obj = Placement(obj_term, smaps.coarse_level, x, y, u * gw, u * gh)
    return ParseTree(choices=choices, object_placement=obj, placements=placements,
                     uses_object_template=uses_object_template, score=score)


def iou(a, b) -> float:
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    ix = max(0.0, min(ax + aw, bx + bw) - max(ax, bx))
    iy = max(0.0, min(ay + ah, by + bh) - max(ay, by))
    inter = ix * iy
    union = aw * ah + bw * bh - inter
    return inter / union if union > 0 else 0.0


def nms(detections: list[Detection], tau_nms: float = 0.7) -> list[Detection]:
    """Greedy score-descending suppression at IoU >= tau_nms."""
    order = sorted(detections, key=lambda d: (-d.score, d.window))
    kept: list[Detection] = []
    for d in order:
        if all(iou(d.window, k.window) < tau_nms for k in kept):
            kept.append(d)
    return kept


def parse(pyramid: FeaturePyramid, model: Model, tau: float | None = None,
          tau_nms: float = 0.7, n_best: int = 10,
          keep_maps: bool = False):
    """Detect the object at every pyramid level: threshold root candidates,
    retrieve their parse trees, NMS in image space, keep the n_best.

    Returns (detections, score_maps_per_level); the second element is None
    unless keep_maps is set.
    """
    if tau is None:
        tau = model.tau
    gw, gh = model.aog.grid
    u = model.cells_per_unit
    cell = pyramid.cell_size
    offset = model.part_level_offset
    cand = []            # (score, window, level, x, y)
    smaps_at = {}
    all_maps = {} if keep_maps else None

    for l in range(offset, len(pyramid.levels)):
        coarse = pyramid.levels[l]
        fine = pyramid.levels[l - offset]
        if coarse.cells_h < u * gh or coarse.cells_w < u * gw:
            continue
        smaps = compute_score_maps(model, coarse, fine,
                                   coarse_level=l, fine_level=l - offset)
        smaps_at[l] = smaps
        if keep_maps:
            all_maps[l] = smaps
        root_map = smaps.maps[model.aog.root]
        ys, xs = np.nonzero(root_map >= tau)
        s = coarse.scale * cell
        for y, x in zip(ys.tolist(), xs.tolist()):
            window = (x * s, y * s, u * gw * s, u * gh * s)
            cand.append((float(root_map[y, x]), window, l, x, y))

    # greedy NMS in descending score order; stopping at n_best kept windows
    # is exact, so parse trees are retrieved for the survivors only
    cand.sort(key=lambda c: (-c[0], c[1]))
    kept: list[Detection] = []
    for score, window, l, x, y in cand:
        if all(iou(window, k.window) < tau_nms for k in kept):
            tree = retrieve_parse_tree(model, smaps_at[l], x, y)
            kept.append(Detection(window=window, score=score, tree=tree))
            if len(kept) >= n_best:
                break
    return kept, all_maps


def detection_boxes(det: Detection, pyramid: FeaturePyramid):
    """Image-space boxes for every placement in a detection, object first."""
    cell = pyramid.cell_size
    out = []
    for p in [det.tree.object_placement] + det.tree.placements:
        s = pyramid.scale(p.level) * cell
        out.append((p.x * s, p.y * s, p.w * s, p.h * s))
    return out


def reconstruct_score(model: Model, tree: ParseTree,
                      feature_at) -> float:
    """Recompute bias + sum(appearance - deformation penalty) from a tree.

    `feature_at(placement)` must return the feature crop under a placement.
    Used by tests and the trackability code to cross-check DP scores.
    """
    aog = model.aog
    total = float(model.params.bias[tree.choices[aog.root]])
    # anchor positions implied by the tree for deformation penalties
    anchors = _anchor_positions(model, tree)
    terms = [tree.object_placement] if tree.uses_object_template else []
    for p in terms + tree.placements:
        total += float(np.dot(model.params.appearance[p.node_id].ravel(),
                              feature_at(p).ravel()))
        a = anchors.get(p.node_id)
        if a is not None:
            and_id, ax, ay = a
            dx, dy = p.x - ax, p.y - ay
            total -= float(np.dot(model.params.deformation[and_id],
                                  deformation_feature(dx, dy)))
    return total


def _anchor_positions(model: Model, tree: ParseTree):
    """Map part-terminal id -> (deformation And id, anchor x, anchor y)."""
    aog = model.aog
    rho = model.rho
    u = model.cells_per_unit
    root_children = set(aog.root_child_ands())
    obj = tree.object_placement
    anchors = {}
    queue = [(tree.choices[aog.root], obj.x, obj.y)]
    while queue:
        nid, px, py = queue.pop(0)
        n = aog.node(nid)
        if n.is_or:
            queue.append((tree.choices[nid], px, py))
        elif n.is_and:
            if n.and_type == TERMINATION:
                pass
            elif n.and_type == DEFORMATION:
                anchors[n.children[0]] = (nid, px, py)
            else:
                scale = rho if nid in root_children else 1
                for c in n.children:
                    ch = aog.node(c)
                    queue.append((c,
                                  scale * px + rho * u * (ch.region.x - n.region.x),
                                  scale * py + rho * u * (ch.region.y - n.region.y)))
    return anchors
