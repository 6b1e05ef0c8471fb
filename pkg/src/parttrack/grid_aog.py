"""And-Or graph over a cell grid quantizing the space of part configurations.

The graph has three node kinds:

* Or-nodes, one per distinct sub-grid region, offering a choice between
  terminating the region as a single part or splitting it;
* And-nodes, either binary decompositions (one per valid horizontal or
  vertical cut) or single-child wrappers around a terminal;
* Terminal-nodes, one per region, grounding the region to image features.

Every Or-node carries exactly one wrapper And-node over its terminal
(TERMINATION for the whole-grid object terminal, DEFORMATION for part
terminals) plus zero or more decomposition And-nodes.  Node ids are dense
integers assigned in BFS discovery order, so two builds with the same
arguments produce identical tables.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, replace
from typing import Iterable

OR = "Or"
AND = "And"
TERMINAL = "T"

# And-node subtypes (the out-edge type in the grammar)
DECOMPOSITION = "dec"
DEFORMATION = "def"
TERMINATION = "term"


@dataclass(frozen=True, order=True)
class Region:
    """Sub-grid rectangle in cell units: left-top (x, y), size (w, h)."""

    x: int
    y: int
    w: int
    h: int

    def as_tuple(self):
        return (self.x, self.y, self.w, self.h)


@dataclass
class Node:
    id: int
    kind: str
    region: Region
    children: tuple[int, ...] = ()
    # Decomposition metadata: axis 'v' (vertical cut, splits width) or
    # 'h' (horizontal cut, splits height), cut position, overlap in cells.
    and_type: str | None = None
    cut_axis: str | None = None
    cut_pos: int | None = None
    overlap: int = 0

    @property
    def is_or(self):
        return self.kind == OR

    @property
    def is_and(self):
        return self.kind == AND

    @property
    def is_terminal(self):
        return self.kind == TERMINAL


class Aog:
    """Immutable And-Or graph. Build with :func:`build_full_aog`."""

    def __init__(self, grid, min_part, overlap_ratio, nodes, root):
        self.grid = tuple(grid)
        self.min_part = tuple(min_part)
        self.overlap_ratio = overlap_ratio
        self.nodes: list[Node] = nodes
        self.root: int = root
        self._validate()

    def _validate(self):
        seen = set()
        for i, n in enumerate(self.nodes):
            if n.id != i:
                raise ValueError("node ids must be dense and in table order")
            seen.add(n.id)
        root = self.nodes[self.root]
        if not root.is_or or root.region != Region(0, 0, *self.grid):
            raise ValueError("root must be the whole-grid Or-node")
        if self.reachable() != seen:
            raise ValueError("unreachable nodes present")
        self._topo = self._postorder()  # raises on cycles

    def node(self, nid: int) -> Node:
        return self.nodes[nid]

    def reachable(self) -> set[int]:
        out = set()
        stack = [self.root]
        while stack:
            nid = stack.pop()
            if nid in out:
                continue
            out.add(nid)
            stack.extend(self.nodes[nid].children)
        return out

    def terminals(self) -> list[Node]:
        return [n for n in self.nodes if n.is_terminal]

    def part_terminals(self) -> list[Node]:
        whole = Region(0, 0, *self.grid)
        return [n for n in self.terminals() if n.region != whole]

    def decomposition_ands(self) -> list[Node]:
        return [n for n in self.nodes if n.is_and and n.and_type == DECOMPOSITION]

    def _postorder(self) -> list[int]:
        """Children-before-parents order (iterative DFS with cycle check)."""
        out: list[int] = []
        state: dict[int, int] = {}  # 0 = on stack, 1 = done
        stack: list[tuple[int, bool]] = [(self.root, False)]
        while stack:
            nid, expanded = stack.pop()
            if expanded:
                state[nid] = 1
                out.append(nid)
                continue
            if state.get(nid) == 1:
                continue
            if state.get(nid) == 0:
                raise ValueError("cycle detected at node %d" % nid)
            state[nid] = 0
            stack.append((nid, True))
            for c in self.nodes[nid].children:
                if state.get(c) != 1:
                    stack.append((c, False))
        return out

    def topo_top_down(self) -> list[int]:
        """Parents-before-children order."""
        return list(reversed(self._topo))

    def topo_bottom_up(self) -> list[int]:
        return list(self._topo)

    def root_child_ands(self) -> list[int]:
        return list(self.nodes[self.root].children)


def _valid_cuts(region: Region, min_part, overlap_ratio):
    """Yield (axis, cut_pos, overlap, child_a, child_b) for all valid cuts."""
    w0, h0 = min_part
    x, y, w, h = region.as_tuple()
    # vertical cuts split the width at sx in [w0, w - w0]
    for sx in range(w0, w - w0 + 1):
        max_ov = int(overlap_ratio * w)
        for ov in range(0, max_ov + 1):
            if sx + ov >= w:  # child must be strictly smaller than parent
                break
            a = Region(x, y, sx + ov, h)
            b = Region(x + sx, y, w - sx, h)
            yield ("v", sx, ov, a, b)
    # horizontal cuts split the height at sy in [h0, h - h0]
    for sy in range(h0, h - h0 + 1):
        max_ov = int(overlap_ratio * h)
        for ov in range(0, max_ov + 1):
            if sy + ov >= h:
                break
            a = Region(x, y, w, sy + ov)
            b = Region(x, y + sy, w, h - sy)
            yield ("h", sy, ov, a, b)


def build_full_aog(grid, min_part=(1, 1), overlap_ratio=0.0) -> Aog:
    """Enumerate all guillotine part configurations of a W x H cell grid.

    BFS from the whole-grid Or-node.  Each popped Or-node receives a
    wrapper And-node over its terminal plus one decomposition And-node per
    valid cut; each popped And-node receives its two child Or-nodes,
    deduplicated by region.
    """
    W, H = grid
    w0, h0 = min_part
    if W < 1 or H < 1:
        raise ValueError("grid must be at least 1x1")
    if not (1 <= w0 <= W and 1 <= h0 <= H):
        raise ValueError("min part %r does not fit grid %r" % (min_part, grid))
    if not (0.0 <= overlap_ratio < 1.0):
        raise ValueError("overlap ratio must be in [0, 1)")

    nodes: list[Node] = []
    or_by_region: dict[Region, int] = {}
    and_by_key: dict[tuple, int] = {}

    def new_node(**kw) -> Node:
        n = Node(id=len(nodes), **kw)
        nodes.append(n)
        return n

    whole = Region(0, 0, W, H)
    root = new_node(kind=OR, region=whole)
    or_by_region[whole] = root.id
    queue = deque([root.id])

    while queue:
        nid = queue.popleft()
        v = nodes[nid]
        if v.is_or:
            children = []
            # terminal wrapped in an And-node so scoring has no special cases
            wrap_type = TERMINATION if v.region == whole else DEFORMATION
            wrap = new_node(kind=AND, region=v.region, and_type=wrap_type)
            term = new_node(kind=TERMINAL, region=v.region)
            wrap.children = (term.id,)
            children.append(wrap.id)
            for axis, pos, ov, _a, _b in _valid_cuts(v.region, min_part, overlap_ratio):
                key = (v.region, axis, pos, ov)
                if key not in and_by_key:
                    a = new_node(kind=AND, region=v.region, and_type=DECOMPOSITION,
                                 cut_axis=axis, cut_pos=pos, overlap=ov)
                    and_by_key[key] = a.id
                    queue.append(a.id)
                children.append(and_by_key[key])
            v.children = tuple(children)
        elif v.is_and and v.and_type == DECOMPOSITION:
            subs = []
            for _axis, _pos, _ov, a, b in _valid_cuts(v.region, min_part, overlap_ratio):
                if (_axis, _pos, _ov) == (v.cut_axis, v.cut_pos, v.overlap):
                    subs = [a, b]
                    break
            child_ids = []
            for r in subs:
                if r not in or_by_region:
                    o = new_node(kind=OR, region=r)
                    or_by_region[r] = o.id
                    queue.append(o.id)
                child_ids.append(or_by_region[r])
            v.children = tuple(child_ids)

    return Aog(grid, min_part, overlap_ratio, nodes, root.id)


def count_parse_trees(aog: Aog) -> int:
    """Exact number of parse trees, by DP over the DAG (arbitrary precision)."""
    count: dict[int, int] = {}
    for nid in aog.topo_bottom_up():
        n = aog.node(nid)
        if n.is_terminal:
            count[nid] = 1
        elif n.is_and:
            c = 1
            for ch in n.children:
                c *= count[ch]
            count[nid] = c
        else:
            count[nid] = sum(count[ch] for ch in n.children)
    return count[aog.root]


class BudgetExceeded(Exception):
    """Raised when an enumeration would visit more parse trees than allowed."""


def count_configurations(aog: Aog, budget: int = 10_000_000) -> int:
    """Number of distinct part configurations (terminal-region sets).

    Enumerates all parse trees per Or-region bottom-up, collapsing each to
    its frozenset of terminal regions and deduplicating.  Only meaningful
    for graphs built with overlap_ratio = 0.

    When the grid admits at least one cut, the trivial whole-box
    configuration is not counted as a part configuration (the same
    convention that counts 35 part terminals rather than 36 on a 3x3
    grid); a cut-free 1x1 grid still reports its single configuration.
    """
    if count_parse_trees(aog) > budget:
        raise BudgetExceeded("parse tree count exceeds budget %d" % budget)

    configs: dict[int, frozenset] = {}

    def or_configs(nid: int) -> set[frozenset]:
        n = aog.node(nid)
        out: set[frozenset] = set()
        for ch in n.children:
            a = aog.node(ch)
            if a.and_type in (TERMINATION, DEFORMATION):
                out.add(frozenset([a.region]))
            else:
                left, right = a.children
                for ca in memo[left]:
                    for cb in memo[right]:
                        out.add(ca | cb)
        return out

    memo: dict[int, set[frozenset]] = {}
    for nid in aog.topo_bottom_up():
        n = aog.node(nid)
        if n.is_or:
            memo[nid] = or_configs(nid)
    out = set(memo[aog.root])
    whole_only = frozenset([aog.node(aog.root).region])
    if len(out) > 1:
        out.discard(whole_only)
    return len(out)


def extract_subgraph(aog: Aog, kept: dict[int, Iterable[int]],
                     with_mapping: bool = False):
    """Restrict each Or-node to a kept subset of its child And-nodes.

    `kept` maps Or-node id -> iterable of retained child ids; Or-nodes not
    present keep all children.  Nodes unreachable through kept choices are
    dropped and ids are renumbered densely in BFS order.  With
    `with_mapping` the old-id -> new-id dict is returned alongside.
    """
    kept_sets = {}
    for oid, ids in kept.items():
        s = set(ids)
        n = aog.node(oid)
        if not n.is_or:
            raise ValueError("node %d is not an Or-node" % oid)
        if not s or not s.issubset(set(n.children)):
            raise ValueError("kept set for Or %d is empty or not a subset" % oid)
        kept_sets[oid] = s

    # reachability under kept choices; renumber in the same order the
    # builder assigns ids (wrapper And + terminal at Or pop, then cut Ands;
    # child Ors at And pop) so a keep-everything extraction is the identity
    def kept_children(n: Node) -> list[int]:
        if n.is_or and n.id in kept_sets:
            return [c for c in n.children if c in kept_sets[n.id]]
        return list(n.children)

    order: list[int] = []
    seen: set[int] = set()

    def assign(nid: int):
        if nid not in seen:
            seen.add(nid)
            order.append(nid)

    assign(aog.root)
    queue = deque([aog.root])
    while queue:
        nid = queue.popleft()
        n = aog.node(nid)
        if n.is_or:
            for c in kept_children(n):
                ch = aog.node(c)
                new = c not in seen
                assign(c)
                if ch.and_type in (TERMINATION, DEFORMATION):
                    assign(ch.children[0])
                elif new:
                    queue.append(c)
        elif n.is_and:
            for c in n.children:
                new = c not in seen
                assign(c)
                if new:
                    queue.append(c)

    remap = {old: new for new, old in enumerate(order)}
    new_nodes = []
    for old in order:
        n = aog.node(old)
        if n.is_or and old in kept_sets:
            children = tuple(remap[c] for c in n.children if c in kept_sets[old])
        else:
            children = tuple(remap[c] for c in n.children)
        new_nodes.append(replace(n, id=remap[old], children=children))
    sub = Aog(aog.grid, aog.min_part, aog.overlap_ratio, new_nodes, remap[aog.root])
    return (sub, remap) if with_mapping else sub


# ---------------------------------------------------------------------------
# Parse trees and configurations

@dataclass
class Placement:
    """A terminal's position in a score/feature pyramid.

    (x, y) are feature-cell coordinates at pyramid level `level`; (w, h)
    the terminal extent in feature cells at that level.
    """

    node_id: int
    level: int
    x: int
    y: int
    w: int
    h: int


@dataclass
class ParseTree:
    choices: dict[int, int]            # Or-node id -> chosen child And id
    object_placement: Placement        # root window position (coarse level)
    placements: list[Placement]        # part terminals only
    uses_object_template: bool = False  # root chose the whole-object terminal
    score: float = 0.0


@dataclass
class Configuration:
    boxes: list[tuple[float, float, float, float]]   # (x, y, w, h); object box first


def collapse(tree: ParseTree, cell_size: int, scales: dict[int, float]) -> Configuration:
    """Convert a parse tree's placements to image-space rectangles.

    `scales` maps pyramid level -> the level's scale factor relative to the
    original image.  The object box comes first, then one box per part.
    """
    boxes = []
    for p in [tree.object_placement] + tree.placements:
        s = scales[p.level] * cell_size
        boxes.append((p.x * s, p.y * s, p.w * s, p.h * s))
    return Configuration(boxes=boxes)


# ---------------------------------------------------------------------------
# Serialization (structure only; parameters are stored alongside by the model
# container, see parttrack.parsing)

FORMAT_HEADER = "parttrack-aog 1"


def aog_to_text(aog: Aog) -> str:
    lines = [FORMAT_HEADER,
             "grid %d %d" % aog.grid,
             "min_part %d %d" % aog.min_part,
             "overlap %r" % aog.overlap_ratio,
             "root %d" % aog.root]
    for n in aog.nodes:
        parts = [str(n.id), n.kind, "%d %d %d %d" % n.region.as_tuple()]
        parts.append(n.and_type or "-")
        parts.append("%s %s %d" % (n.cut_axis or "-", n.cut_pos if n.cut_pos is not None else "-", n.overlap))
        parts.append(",".join(str(c) for c in n.children) or "-")
        lines.append("|".join(parts))
    return "\n".join(lines) + "\n"


def aog_from_text(text: str) -> Aog:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if lines[0] != FORMAT_HEADER:
        raise ValueError("unrecognized AOG format header: %r" % lines[0])
    grid = tuple(int(v) for v in lines[1].split()[1:])
    min_part = tuple(int(v) for v in lines[2].split()[1:])
    overlap = float(lines[3].split()[1])
    root = int(lines[4].split()[1])
    nodes = []
    for ln in lines[5:]:
        nid, kind, region, and_type, cut, children = ln.split("|")
        rx, ry, rw, rh = (int(v) for v in region.split())
        axis, pos, ov = cut.split()
        nodes.append(Node(
            id=int(nid), kind=kind, region=Region(rx, ry, rw, rh),
            children=tuple(int(c) for c in children.split(",")) if children != "-" else (),
            and_type=None if and_type == "-" else and_type,
            cut_axis=None if axis == "-" else axis,
            cut_pos=None if pos == "-" else int(pos),
            overlap=int(ov)))
    return Aog(grid, min_part, overlap, nodes, root)
