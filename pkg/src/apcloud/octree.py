"""Linear quadtree/octree over particles and the selection of computational nodes.

Cells are addressed by ``(level, i0, i1[, i2])`` tuples of integer cell
indices. The particle tree itself is linear: particles are sorted by their
Morton key at ``max_level`` and the particle range of any cell is found by
binary search on the sorted keys, so no per-cell storage is needed for
levels that are never visited.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from apcloud._csv import write_csv
from apcloud.geometry import MAX_DEPTH, Domain, interleave, morton_encode

log = logging.getLogger(__name__)

EB, MB, BD = 0, 1, 2
CLASS_NAMES = ("EB", "MB", "BD")
MAX_RING = 5


class EmptyTreeError(ValueError):
    pass


class DepthExhaustedError(RuntimeError):
    pass


class StencilStarvationError(RuntimeError):
    def __init__(self, message, node=None):
        super().__init__(message)
        self.node = node


# ---------------------------------------------------------------------------
# cell arithmetic
# ---------------------------------------------------------------------------


def parent(cell):
    return (cell[0] - 1,) + tuple(i >> 1 for i in cell[1:])


def children(cell):
    level, idx = cell[0], cell[1:]
    dim = len(idx)
    return [
        (level + 1,) + tuple(2 * idx[d] + ((b >> d) & 1) for d in range(dim))
        for b in range(1 << dim)
    ]


def ancestor(cell, level):
    shift = cell[0] - level
    return (level,) + tuple(i >> shift for i in cell[1:])


def is_descendant(cell, anc):
    return cell[0] > anc[0] and ancestor(cell, anc[0]) == anc


def shifted(cell, d, s):
    """Same-level cell across the face in dimension ``d``, side ``s`` (0 low, 1 high)."""
    idx = list(cell[1:])
    idx[d] += 1 if s else -1
    if idx[d] < 0 or idx[d] >= (1 << cell[0]):
        return None
    return (cell[0],) + tuple(idx)


def cell_box(cell, domain):
    level, idx = cell[0], np.asarray(cell[1:], dtype=float)
    edge = domain.extent / 2.0**level
    lo = domain.lo_array + idx * edge
    return lo, lo + edge


def cell_center(cell, domain):
    lo, hi = cell_box(cell, domain)
    return 0.5 * (lo + hi)


def cell_edge(level, domain):
    """Cell size used by the refinement criteria (largest edge of a level-``level`` cell)."""
    return float(np.max(domain.extent)) / 2.0**level


# ---------------------------------------------------------------------------
# particle tree
# ---------------------------------------------------------------------------


@dataclass
class OctreeCell:
    level: int
    index: tuple
    key: int
    first_particle: int
    particle_count: int
    center: np.ndarray
    edge: float
    children: list


class Octree:
    """Particles sorted by Morton key, with per-level cell tables built on demand.

    ``order[i]`` is the original index of the ``i``-th particle in Morton order.
    """

    def __init__(self, domain, positions, charges, max_level):
        self.domain = domain
        self.dim = domain.dim
        self.max_level = max_level
        keys = morton_encode(positions, domain, max_level)
        self.order = np.argsort(keys, kind="stable")
        self.keys = keys[self.order]
        self.positions = positions[self.order]
        self.charges = charges[self.order]
        self._tables = {}

    def __len__(self):
        return len(self.keys)

    def _key_range(self, level, idx):
        idx = np.atleast_2d(np.asarray(idx, dtype=np.int64))
        shift = np.uint64(self.dim * (self.max_level - level))
        lo = interleave(idx) << shift
        hi = lo | ((np.uint64(1) << shift) - np.uint64(1))
        return lo, hi

    def particle_range(self, level, idx):
        """(first, count) arrays for the cells ``idx`` (n, dim) at ``level``."""
        lo, hi = self._key_range(level, idx)
        first = np.searchsorted(self.keys, lo, side="left")
        last = np.searchsorted(self.keys, hi, side="right")
        return first, last - first

    def count(self, level, idx):
        return self.particle_range(level, idx)[1]

    def level_table(self, level):
        """Non-empty cells of one level as ``(keys, first, count)`` arrays in Morton order."""
        if level not in self._tables:
            if level == self.max_level:
                k = self.keys
                if len(k):
                    starts = np.flatnonzero(np.r_[True, k[1:] != k[:-1]])
                else:
                    starts = np.zeros(0, dtype=np.int64)
                counts = np.diff(np.r_[starts, len(k)])
                self._tables[level] = (k[starts], starts, counts)
            else:
                # interior cells come from the next deeper level, bottom-up
                ck, cfirst, ccount = self.level_table(level + 1)
                pk = ck >> np.uint64(self.dim)
                starts = np.flatnonzero(np.r_[True, pk[1:] != pk[:-1]]) if len(pk) else np.zeros(0, np.int64)
                counts = np.add.reduceat(ccount, starts) if len(pk) else np.zeros(0, np.int64)
                self._tables[level] = (pk[starts], cfirst[starts], counts)
        return self._tables[level]

    def cell(self, level, idx):
        idx = tuple(int(i) for i in idx)
        first, count = self.particle_range(level, [idx])
        kids = []
        if level < self.max_level:
            for ch in children((level,) + idx):
                f, c = self.particle_range(level + 1, [ch[1:]])
                if c[0] > 0:
                    kids.append(ch)
        edge = cell_edge(level, self.domain)
        return OctreeCell(
            level, idx, int(interleave([idx])[0]), int(first[0]), int(count[0]),
            cell_center((level,) + idx, self.domain), edge, kids,
        )


def build_octree(particles, domain, max_level=None):
    """Sort particles by Morton key; cell ranges follow by binary search."""
    if len(particles) == 0:
        raise EmptyTreeError("cannot build a tree over zero particles")
    max_level = MAX_DEPTH[domain.dim] if max_level is None else max_level
    return Octree(domain, particles.positions, particles.charges, max_level)


class ExpectedCounts:
    """Noise-free stand-in for particle counts: ``n_total`` times the exact cell charge."""

    def __init__(self, params, domain, n_total, max_level=None):
        self.params = params
        self.domain = domain
        self.dim = domain.dim
        self.n_total = n_total
        self.max_level = MAX_DEPTH[domain.dim] if max_level is None else max_level

    def count(self, level, idx):
        idx = np.atleast_2d(np.asarray(idx, dtype=float))
        edge = self.domain.extent / 2.0**level
        lo = self.domain.lo_array + idx * edge
        avg = self.params.box_average(lo, lo + edge)
        return self.n_total * avg * np.prod(edge)


# ---------------------------------------------------------------------------
# refinement predicates
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RefinementConfig:
    """Error-balance criterion: keep a cell once ``h < c * N'^(-1/(2k-2))``."""

    c: float
    k: int = 2

    def __post_init__(self):
        if not self.c > 0:
            raise ValueError("tuning parameter c must be positive")
        if self.k < 2:
            raise ValueError("GFD order k must be at least 2")

    def should_open(self, counts, h):
        counts = np.asarray(counts, dtype=float)
        with np.errstate(divide="ignore"):
            limit = np.where(counts > 0, self.c * counts ** (-1.0 / (2 * self.k - 2)), np.inf)
        return ~(h < limit)


@dataclass(frozen=True)
class DistanceRefinement:
    """Refine toward a point: open cells larger than ``ratio`` times their distance to it."""

    center: tuple
    finest_level: int
    ratio: float = 0.5

    def should_open_cells(self, level, idx, domain):
        edge = domain.extent / 2.0**level
        lo = domain.lo_array + np.atleast_2d(idx) * edge
        c = np.asarray(self.center)
        gap = np.maximum(0.0, np.maximum(lo - c, c - (lo + edge)))
        dist = np.linalg.norm(gap, axis=1)
        if level >= self.finest_level:
            return np.zeros(len(lo), dtype=bool)
        return cell_edge(level, domain) > self.ratio * dist


class NestedRefinement:
    """Refine every cell of an existing node cloud by ``shift`` levels.

    A cell at level ``L >= shift`` opens exactly when its ancestor at level
    ``L - shift`` was opened for the base cloud, so each base cell is split
    into ``2^(dim*shift)`` cells and level differences (hence 2:1 balance) are
    preserved.
    """

    def __init__(self, base, shift):
        if shift < 0:
            raise ValueError("shift must be non-negative")
        self.shift = shift
        self.opened = {}
        for i in np.flatnonzero(base.interior):
            cell = base.cells[i]
            for lev in range(cell[0]):
                anc = ancestor(cell, lev)
                self.opened.setdefault(lev, set()).add(tuple(anc[1:]))

    def should_open_cells(self, level, idx, domain):
        idx = np.atleast_2d(idx)
        if level < self.shift:
            return np.ones(len(idx), dtype=bool)
        base = self.opened.get(level - self.shift, set())
        anc = idx >> self.shift
        return np.array([tuple(int(v) for v in a) in base for a in anc], dtype=bool)


# ---------------------------------------------------------------------------
# neighbour definition
# ---------------------------------------------------------------------------


def face_neighbors(cell, cells, domain=None):
    """Face neighbours of ``cell`` within the cell set ``cells``.

    For each face, the neighbour is the deepest cell of the set whose level
    does not exceed ``cell``'s and whose box meets ``cell``'s box in a
    (dim-1)-dimensional face. At most ``2*dim`` cells are returned.
    """
    if cell not in cells:
        raise KeyError(f"{cell} is not in the cell set")
    out = []
    dim = len(cell) - 1
    for d in range(dim):
        for s in (0, 1):
            a = shifted(cell, d, s)
            while a is not None and a not in cells:
                a = parent(a) if a[0] > 0 else None
            if a is not None and not (a[0] <= cell[0] and ancestor(cell, a[0]) == a):
                out.append(a)
    return out


def _int_box(cell, depth):
    scale = 1 << (depth - cell[0])
    lo = np.asarray(cell[1:]) * scale
    return lo, lo + scale


def _meets_in_face(a, b):
    depth = max(a[0], b[0])
    alo, ahi = _int_box(a, depth)
    blo, bhi = _int_box(b, depth)
    touching = 0
    for d in range(len(alo)):
        overlap = min(ahi[d], bhi[d]) - max(alo[d], blo[d])
        if overlap < 0:
            return False
        if overlap == 0:
            touching += 1
    return touching == 1


def face_neighbors_bruteforce(cell, cells):
    """Exhaustive version of :func:`face_neighbors` used to check it."""
    cand = [z for z in cells if z != cell and z[0] <= cell[0] and _meets_in_face(cell, z)]
    return [z for z in cand if not any(is_descendant(w, z) for w in cand)]


# ---------------------------------------------------------------------------
# node selection
# ---------------------------------------------------------------------------


@dataclass
class NodeSet:
    """Computational nodes: candidate-cell centres followed by boundary-face nodes."""

    domain: Domain
    positions: np.ndarray
    h: np.ndarray
    kind: np.ndarray
    level: np.ndarray
    cells: list
    owner: np.ndarray
    adjacency: list
    queue_size: int
    boundary_face: list = field(default_factory=list)

    def __len__(self):
        return len(self.positions)

    @property
    def dim(self):
        return self.domain.dim

    @property
    def interior(self):
        return self.kind != BD

    @property
    def n_interior(self):
        return int(np.count_nonzero(self.interior))

    def counts_by_class(self):
        return {name: int(np.count_nonzero(self.kind == i)) for i, name in enumerate(CLASS_NAMES)}

    def dump_csv(self, path):
        header = list("xyz"[: self.dim]) + ["h", "class"]
        rows = (
            list(p) + [hh, CLASS_NAMES[k]] for p, hh, k in zip(self.positions, self.h, self.kind)
        )
        write_csv(path, header, rows)

    # particle location -------------------------------------------------

    def _cell_starts(self, depth):
        interior = np.flatnonzero(self.interior)
        cells = [self.cells[i] for i in interior]
        levels = np.array([c[0] for c in cells])
        idx = np.array([c[1:] for c in cells], dtype=np.int64)
        shifts = (self.dim * (depth - levels)).astype(np.uint64)
        starts = interleave(idx) << shifts
        order = np.argsort(starts, kind="stable")
        return starts[order], interior[order]

    def locate(self, positions):
        """Index of the node whose cell contains each position."""
        depth = int(self.level[self.interior].max())
        starts, nodes = self._cell_starts(depth)
        keys = morton_encode(np.atleast_2d(positions), self.domain, depth)
        slot = np.searchsorted(starts, keys, side="right") - 1
        return nodes[slot]


class _Selector:
    def __init__(self, counter, domain, max_level, validate=False):
        self.counter = counter
        self.domain = domain
        self.dim = domain.dim
        self.max_level = max_level
        self.validate = validate
        root = (0,) + (0,) * self.dim
        self.queue = {root: None}  # cell -> node class (None once opened)
        self.order = [root]
        self.nbr = {root: [None] * (2 * self.dim)}
        self.by_level = {0: [root]}
        self.opens = 0

    def open(self, y, cls):
        if y[0] >= self.max_level:
            raise DepthExhaustedError(
                f"cell at level {y[0]} must be opened but the tree depth is {self.max_level}"
            )
        dim = self.dim
        self.queue[y] = None
        ly = self.nbr.pop(y)
        kids = children(y)
        for c in kids:
            self.queue[c] = cls
            self.order.append(c)
            self.by_level.setdefault(c[0], []).append(c)
        for c in kids:
            lst = [None] * (2 * dim)
            for d in range(dim):
                for s in (0, 1):
                    a = shifted(c, d, s)
                    if a is None:
                        continue
                    if parent(a) == y:
                        lst[2 * d + s] = a
                        continue
                    z = ly[2 * d + s]
                    if z is None:
                        continue
                    lst[2 * d + s] = a if self.queue[z] is None else z
            self.nbr[c] = lst
        # cells across y's faces that pointed at y now see y's children
        for d in range(dim):
            for s in (0, 1):
                z = ly[2 * d + s]
                if z is None or z[0] != y[0] or self.queue[z] is not None:
                    continue
                self._retarget(z, d, 1 - s, y)
        self.opens += 1
        if self.validate:
            self.check_lists()

    def _retarget(self, z, d, side, y):
        """Update descendants of ``z`` touching its ``side`` face in dimension ``d``."""
        stack = [
            c for c in children(z) if ((c[1 + d] & 1) == side) and c in self.queue
        ]
        while stack:
            w = stack.pop()
            if self.queue[w] is None:
                stack.extend(
                    c for c in children(w) if ((c[1 + d] & 1) == side) and c in self.queue
                )
                continue
            a = shifted(w, d, side)
            self.nbr[w][2 * d + side] = ancestor(a, y[0] + 1)

    def check_lists(self):
        cells = set(self.queue)
        for y, lst in self.nbr.items():
            expect = set(face_neighbors_bruteforce(y, cells))
            got = {z for z in lst if z is not None}
            if expect != got:
                raise AssertionError(f"neighbour list of {y}: {got} != {expect}")

    def candidates(self):
        return [c for c in self.order if self.queue[c] is not None]


def select_nodes(tree, config, domain=None, refine=None, validate=False):
    """Choose computational nodes by error balance and 2:1 mesh balance.

    ``tree`` supplies ``count(level, idx)`` and ``max_level`` (an
    :class:`Octree` or :class:`ExpectedCounts`). ``refine`` replaces the
    error-balance criterion with a geometric predicate
    (e.g. :class:`DistanceRefinement`).
    """
    domain = tree.domain if domain is None else domain
    sel = _Selector(tree, domain, tree.max_level, validate=validate)

    # phase 1: error balance, breadth first
    frontier = list(sel.order)
    while frontier:
        level = frontier[0][0]
        idx = np.array([c[1:] for c in frontier], dtype=np.int64)
        if refine is not None:
            opening = refine.should_open_cells(level, idx, domain)
        else:
            opening = config.should_open(tree.count(level, idx), cell_edge(level, domain))
        nxt = []
        for cell, flag in zip(frontier, opening):
            if flag:
                sel.open(cell, EB)
                nxt.extend(children(cell))
        frontier = nxt

    # phase 2: 2:1 balance, deepest level first
    for level in range(max(sel.by_level), 0, -1):
        for y in list(sel.by_level.get(level, [])):
            if sel.queue[y] is None:
                continue
            for slot in range(2 * sel.dim):
                while True:
                    z = sel.nbr[y][slot]
                    if z is None or z[0] >= level - 1:
                        break
                    sel.open(z, MB)

    cands = sel.candidates()
    n = len(cands)
    qsize = len(sel.queue)
    bound = (2**sel.dim / (2**sel.dim - 1)) * n
    if not qsize < bound:
        raise AssertionError(f"queue size {qsize} violates the complete-tree bound {bound:.1f}")

    # phase 3/4: nodes, then boundary nodes at the faces of boundary cells
    node_of = {c: i for i, c in enumerate(cands)}
    positions = [cell_center(c, domain) for c in cands]
    h = [cell_edge(c[0], domain) for c in cands]
    kind = [sel.queue[c] for c in cands]
    levels = [c[0] for c in cands]
    cells = list(cands)
    owner = list(range(n))
    faces = [None] * n
    adjacency = [set() for _ in range(n)]
    dim = sel.dim
    for i, y in enumerate(cands):
        lst = sel.nbr[y]
        lo, hi = cell_box(y, domain)
        for d in range(dim):
            for s in (0, 1):
                z = lst[2 * d + s]
                if z is None:
                    p = 0.5 * (lo + hi)
                    p[d] = hi[d] if s else lo[d]
                    j = len(positions)
                    positions.append(p)
                    h.append(cell_edge(y[0], domain))
                    kind.append(BD)
                    levels.append(y[0])
                    cells.append(y)
                    owner.append(i)
                    faces.append((d, s))
                    adjacency.append({i})
                    adjacency[i].add(j)
                elif sel.queue[z] is not None:
                    adjacency[i].add(node_of[z])
                else:
                    for c in children(z):
                        if (c[1 + d] & 1) == (1 - s):
                            if c not in node_of:
                                raise AssertionError(f"2:1 balance violated next to {y}")
                            adjacency[i].add(node_of[c])
    for i, adj in enumerate(list(adjacency)):
        for j in adj:
            adjacency[j].add(i)
    return NodeSet(
        domain=domain,
        positions=np.array(positions),
        h=np.array(h),
        kind=np.array(kind, dtype=np.int8),
        level=np.array(levels),
        cells=cells,
        owner=np.array(owner),
        adjacency=[np.array(sorted(a), dtype=np.int64) for a in adjacency],
        queue_size=qsize,
        boundary_face=faces,
    )


def check_balance(nodeset):
    """Largest level difference over all face-adjacent pairs of node cells."""
    interior = np.flatnonzero(nodeset.interior)
    cells = {nodeset.cells[i] for i in interior}
    worst = 0
    for i in interior:
        for z in face_neighbors_leafset(nodeset.cells[i], cells):
            worst = max(worst, abs(z[0] - nodeset.cells[i][0]))
    return worst


def face_neighbors_leafset(cell, leaves):
    """All leaves sharing a face with ``cell`` (any level), for balance checks."""
    out = []
    dim = len(cell) - 1
    for d in range(dim):
        for s in (0, 1):
            a = shifted(cell, d, s)
            if a is None:
                continue
            probe = a
            while probe is not None and probe not in leaves:
                probe = parent(probe) if probe[0] > 0 else None
            if probe is not None:
                out.append(probe)
                continue
            # finer leaves on the far side
            stack = [a]
            while stack:
                w = stack.pop()
                for c in children(w):
                    if (c[1 + d] & 1) == (1 - s):
                        if c in leaves:
                            out.append(c)
                        else:
                            stack.append(c)
    return out


# ---------------------------------------------------------------------------
# GFD neighbour search
# ---------------------------------------------------------------------------


def default_required(dim, k=2):
    """Stencil sizes used for second-order GFD: 8 in 2D, 17 in 3D."""
    if k == 2:
        return {2: 8, 3: 17}[dim]
    from math import comb

    return 2 * (comb(dim + k, k) - 1)


def orthant(offsets):
    """Half-open quadrant (2D) or octant (3D) label of each offset."""
    offsets = np.atleast_2d(offsets)
    x, y = offsets[:, 0], offsets[:, 1]
    q = np.select(
        [(x > 0) & (y >= 0), (x <= 0) & (y > 0), (x < 0) & (y <= 0)], [0, 1, 2], default=3
    )
    if offsets.shape[1] == 3:
        q = q + 4 * (offsets[:, 2] < 0)
    return q


def ring(nodeset, node, depth):
    seen = {node}
    front = [node]
    for _ in range(depth):
        nxt = []
        for i in front:
            for j in nodeset.adjacency[i]:
                if j not in seen:
                    seen.add(j)
                    nxt.append(j)
        front = nxt
    seen.discard(node)
    return np.array(sorted(seen), dtype=np.int64)


def gfd_neighbor_select(node, nodeset, required, min_ring=2, max_ring=MAX_RING, per_orthant=2):
    """Stencil neighbours of ``node``: two nearest per quadrant/octant from the
    smallest ring holding ``required`` candidates, topped up by nearest distance."""
    depth = min_ring
    cand = ring(nodeset, node, depth)
    while len(cand) < required and depth < max_ring:
        depth += 1
        cand = ring(nodeset, node, depth)
    if len(cand) < required:
        raise StencilStarvationError(
            f"node {node}: only {len(cand)} candidates within the {max_ring}-ring", node=node
        )
    off = nodeset.positions[cand] - nodeset.positions[node]
    dist = np.linalg.norm(off, axis=1)
    order = np.argsort(dist, kind="stable")
    q = orthant(off)
    taken = np.zeros(len(cand), dtype=bool)
    per = np.zeros(2**nodeset.dim, dtype=int)
    for i in order:
        if per[q[i]] < per_orthant:
            per[q[i]] += 1
            taken[i] = True
    for i in order:
        if taken.sum() >= required:
            break
        taken[i] = True
    chosen = order[taken[order]]
    return cand[chosen]


def adjacency_matrix(nodeset):
    """Sparse 1-ring adjacency with self loops."""
    n = len(nodeset)
    sizes = np.array([len(a) for a in nodeset.adjacency])
    rows = np.repeat(np.arange(n), sizes)
    cols = np.concatenate(nodeset.adjacency) if n else np.zeros(0, dtype=np.int64)
    A = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    return (A + sp.identity(n, format="csr")).tocsr()


def gfd_neighbor_select_all(nodeset, required, centers=None, min_ring=2,
                            max_ring=MAX_RING, per_orthant=2):
    """:func:`gfd_neighbor_select` for many nodes at once (same choice, same order)."""
    centers = np.flatnonzero(nodeset.interior) if centers is None else np.asarray(centers)
    A = adjacency_matrix(nodeset)
    R = A[centers]
    for _ in range(min_ring - 1):
        R = R @ A
    R = R.tocoo()
    row, col = R.row.astype(np.int64), R.col.astype(np.int64)
    keep = col != centers[row]
    row, col = row[keep], col[keep]
    counts = np.bincount(row, minlength=len(centers))
    short = counts < required

    pos = nodeset.positions
    off = pos[col] - pos[centers[row]]
    dist = np.linalg.norm(off, axis=1)
    q = orthant(off)

    # up to per_orthant nearest in each orthant
    order = np.lexsort((col, dist, q, row))
    grp = row[order] * (2**nodeset.dim) + q[order]
    first = np.r_[0, np.flatnonzero(np.diff(grp)) + 1]
    rank = np.arange(len(order)) - np.repeat(first, np.diff(np.r_[first, len(order)]))
    taken = np.zeros(len(row), dtype=bool)
    taken[order[rank < per_orthant]] = True

    # top up with the nearest remaining candidates
    need = required - np.bincount(row[taken], minlength=len(centers))
    order = np.lexsort((col, dist, row))
    rest = order[~taken[order]]
    r_rest = row[rest]
    first = np.searchsorted(r_rest, np.arange(len(centers)))
    rank = np.arange(len(rest)) - first[r_rest]
    taken[rest[rank < need[r_rest]]] = True

    sel = order[taken[order]]
    split = np.searchsorted(row[sel], np.arange(1, len(centers)))
    lists = np.split(col[sel], split)
    for i in np.flatnonzero(short):
        lists[i] = gfd_neighbor_select(int(centers[i]), nodeset, required, min_ring,
                                       max_ring, per_orthant)
    return lists
