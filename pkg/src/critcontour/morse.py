"""Morse-Smale complexes of scalar fields on pixel grids.

Construction runs discrete Morse theory on the cubical complex of the
(padded) pixel grid: vertices, edges, and squares in doubled
coordinates, with a gradient vector field built independently inside
each vertex's lower star.  Critical vertices are minima, critical edges
saddles, critical squares maxima; 1-cells are the gradient paths from
saddles to extrema.

Quantized images violate the distinct-critical-values requirement, so
all comparisons use a total order on vertices: (value, y, x)
lexicographically -- a simulation-of-simplicity tie-break that makes
every construction deterministic.

The mask boundary is handled with a one-pixel collar ordered below
every real vertex, so the silhouette behaves like a sublevel boundary:
gradient flow drains outward, and critical cells on the collar are
tagged as boundary (and "virtual" when the collar vertex itself is the
carrier).  The alternating-sum relation #min - #saddle + #max equals
the Euler characteristic of the collared domain by construction; for a
disk-like silhouette that is 1.

Simplification cancels persistence pairs by gradient reversal along the
unique connecting path, lowest persistence first, and rebuilds the
complex from the modified gradient, so every structural invariant
survives simplification.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy import ndimage

from .errors import ArgumentError, DomainError
from .field import ScalarField

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda fn: fn


log = logging.getLogger(__name__)

__all__ = [
    "CriticalPoint",
    "OneCell",
    "MSComplex",
    "PersistencePair",
    "compute_ms_complex",
    "persistence_pairs",
    "simplify",
    "monotone_invariance_check",
    "classify_vertices",
    "local_critical_points",
    "enclosing_ring",
    "complex_to_json",
    "smooth_polyline",
]

INF = float("inf")


@dataclass
class CriticalPoint:
    """Critical cell of the complex (0 = minimum, 1 = saddle, 2 = maximum)."""

    id: int
    index: int
    location: tuple[float, float]
    value: float
    persistence: float = INF
    on_boundary: bool = False
    virtual: bool = False
    cell: tuple[int, int] = (0, 0)  # doubled padded coordinates


@dataclass
class OneCell:
    """Gradient path from a saddle to an extremum.

    ``polyline`` is the subpixel-smoothed geometry used for distance
    metrics; ``grid_path`` is the authoritative combinatorial path.
    """

    id: int
    from_saddle: int
    to_extremum: int | None
    polyline: np.ndarray
    grid_path: np.ndarray
    endpoint_indices: tuple[int, int | None]
    on_boundary: bool = False

    def length(self) -> float:
        d = np.diff(self.polyline, axis=0)
        return float(np.hypot(d[:, 0], d[:, 1]).sum())


@dataclass
class PersistencePair:
    birth_point_id: int
    death_point_id: int
    persistence: float


@dataclass
class MSComplex:
    """Critical points, 1-cells, and the 2-cell label map of a field."""

    points: list
    one_cells: list
    two_cell_labels: np.ndarray
    field_ref: dict
    _engine: "object" = dc_field(default=None, repr=False)

    def point(self, pid: int) -> CriticalPoint:
        return self._by_id[pid]

    def __post_init__(self) -> None:
        self._by_id = {p.id: p for p in self.points}

    def counts(self, interior_only: bool = False) -> tuple[int, int, int]:
        """(#min, #saddle, #max); interior excludes boundary-tagged points."""
        out = [0, 0, 0]
        for p in self.points:
            if interior_only and p.on_boundary:
                continue
            out[p.index] += 1
        return tuple(out)

    def euler_counts(self) -> int:
        n_min, n_sad, n_max = self.counts()
        return n_min - n_sad + n_max

    def euler_domain(self) -> int:
        """V - E + F of the collared cubical complex."""
        return self._engine.euler_characteristic()


# ---------------------------------------------------------------------------
# Lower-star gradient construction
# ---------------------------------------------------------------------------

@njit(cache=True)
def _process_lower_stars(rank: np.ndarray, present: np.ndarray):
    """Build the discrete gradient: one pass over every lower star.

    Returns (partner, critical) arrays over the doubled grid.  partner
    pairs a cell with its gradient partner (-1 when unpaired/absent);
    critical flags unpaired cells of the complex.
    """
    h, w = rank.shape
    dw = 2 * w - 1
    dh = 2 * h - 1
    partner = np.full(dh * dw, -1, np.int64)
    critical = np.zeros(dh * dw, np.uint8)

    # local lower-star scratch (at most 4 edges + 4 squares)
    cid = np.empty(8, np.int64)
    k1 = np.empty(8, np.int64)
    k2 = np.empty(8, np.int64)
    k3 = np.empty(8, np.int64)
    is_sq = np.empty(8, np.uint8)
    fa = np.empty(8, np.int64)
    fb = np.empty(8, np.int64)
    status = np.empty(8, np.int64)  # 0 avail, 1 pqone, 2 paired, 3 critical, 4 pqzero
    edge_local = np.empty(4, np.int64)

    edge_dx = (1, -1, 0, 0)
    edge_dy = (0, 0, 1, -1)
    quad_sx = (1, 1, -1, -1)
    quad_sy = (1, -1, 1, -1)

    for y in range(h):
        for x in range(w):
            if not present[y, x]:
                continue
            r0 = rank[y, x]
            vcell = (2 * y) * dw + (2 * x)
            n = 0
            for d in range(4):
                edge_local[d] = -1
            # edges of the lower star
            for d in range(4):
                nx = x + edge_dx[d]
                ny = y + edge_dy[d]
                if 0 <= nx < w and 0 <= ny < h and present[ny, nx]:
                    rn = rank[ny, nx]
                    if rn < r0:
                        cid[n] = (2 * y + edge_dy[d]) * dw + (2 * x + edge_dx[d])
                        k1[n] = rn
                        k2[n] = -1
                        k3[n] = -1
                        is_sq[n] = 0
                        fa[n] = -1
                        fb[n] = -1
                        status[n] = 0
                        edge_local[d] = n
                        n += 1
            n_edges = n
            # squares of the lower star (both their v-edges are lower too)
            for q in range(4):
                sx = quad_sx[q]
                sy = quad_sy[q]
                x1 = x + sx
                y1 = y + sy
                if not (0 <= x1 < w and 0 <= y1 < h):
                    continue
                if not (present[y, x1] and present[y1, x] and present[y1, x1]):
                    continue
                ra = rank[y, x1]
                rb = rank[y1, x]
                rc = rank[y1, x1]
                if ra < r0 and rb < r0 and rc < r0:
                    # sort the three ranks descending
                    hi = max(ra, max(rb, rc))
                    lo = min(ra, min(rb, rc))
                    mid = ra + rb + rc - hi - lo
                    cid[n] = (2 * y + sy) * dw + (2 * x + sx)
                    k1[n] = hi
                    k2[n] = mid
                    k3[n] = lo
                    is_sq[n] = 1
                    # faces: the two v-incident edges of this quadrant
                    ea = 0 if sx == 1 else 1
                    eb = 2 if sy == 1 else 3
                    fa[n] = edge_local[ea]
                    fb[n] = edge_local[eb]
                    status[n] = 0
                    n += 1

            if n == 0:
                critical[vcell] = 1
                continue

            # delta: minimal edge by key
            delta = -1
            for i in range(n_edges):
                if delta == -1 or k1[i] < k1[delta]:
                    delta = i
            partner[vcell] = cid[delta]
            partner[cid[delta]] = vcell
            status[delta] = 2
            for i in range(n_edges):
                if i != delta:
                    status[i] = 4  # pqzero
            for i in range(n_edges, n):
                # squares with delta as a face and exactly one unpaired face
                if fa[i] == delta or fb[i] == delta:
                    unp = 0
                    if status[fa[i]] != 2 and status[fa[i]] != 3:
                        unp += 1
                    if status[fb[i]] != 2 and status[fb[i]] != 3:
                        unp += 1
                    if unp == 1:
                        status[i] = 1

            while True:
                # drain PQone
                while True:
                    a = -1
                    for i in range(n):
                        if status[i] == 1:
                            if a == -1:
                                a = i
                            elif (k1[i] < k1[a]
                                  or (k1[i] == k1[a] and k2[i] < k2[a])
                                  or (k1[i] == k1[a] and k2[i] == k2[a]
                                      and k3[i] < k3[a])):
                                a = i
                    if a == -1:
                        break
                    unp = 0
                    upface = -1
                    if status[fa[a]] != 2 and status[fa[a]] != 3:
                        unp += 1
                        upface = fa[a]
                    if status[fb[a]] != 2 and status[fb[a]] != 3:
                        unp += 1
                        upface = fb[a]
                    if unp == 0:
                        status[a] = 4
                    else:
                        partner[cid[upface]] = cid[a]
                        partner[cid[a]] = cid[upface]
                        status[upface] = 2
                        status[a] = 2
                        for j in range(n_edges, n):
                            if status[j] == 0 and (fa[j] == upface or fb[j] == upface):
                                u2 = 0
                                if status[fa[j]] != 2 and status[fa[j]] != 3:
                                    u2 += 1
                                if status[fb[j]] != 2 and status[fb[j]] != 3:
                                    u2 += 1
                                if u2 == 1:
                                    status[j] = 1
                # pop PQzero
                g = -1
                for i in range(n):
                    if status[i] == 4:
                        if g == -1:
                            g = i
                        elif (k1[i] < k1[g]
                              or (k1[i] == k1[g] and k2[i] < k2[g])
                              or (k1[i] == k1[g] and k2[i] == k2[g]
                                  and k3[i] < k3[g])):
                            g = i
                if g == -1:
                    break
                critical[cid[g]] = 1
                status[g] = 3
                if is_sq[g] == 0:
                    for j in range(n_edges, n):
                        if status[j] == 0 and (fa[j] == g or fb[j] == g):
                            u2 = 0
                            if status[fa[j]] != 2 and status[fa[j]] != 3:
                                u2 += 1
                            if status[fb[j]] != 2 and status[fb[j]] != 3:
                                u2 += 1
                            if u2 == 1:
                                status[j] = 1
    return partner, critical


class _GradientEngine:
    """Discrete gradient of a collared field plus path machinery.

    All cell bookkeeping uses doubled coordinates on the padded grid:
    vertex (x, y) -> (2x, 2y); cells are flattened row-major.  The
    original pixel (x, y) is padded pixel (x+1, y+1).
    """

    def __init__(self, f: ScalarField):
        values = np.pad(f.values, 1, constant_values=0.0)
        mask = np.pad(f.mask, 1, constant_values=False)
        collar = ndimage.binary_dilation(mask, structure=np.ones((3, 3), bool)) & ~mask
        domain = mask | collar

        comp, n_comp = ndimage.label(f.mask, structure=np.array(
            [[0, 1, 0], [1, 1, 1], [0, 1, 0]]))
        if n_comp == 0:
            raise DomainError("mask is empty")
        if n_comp > 1:
            raise DomainError(f"mask splits into {n_comp} 4-connected components")

        self.spacing = f.spacing
        self.shape = f.values.shape
        self.padded_shape = values.shape
        self.domain = domain
        self.is_mask = mask
        h, w = values.shape
        self.dw = 2 * w - 1
        self.dh = 2 * h - 1

        # Total vertex order: collar first (below everything), then by
        # (value, y, x).  Within the collar, vertices are ordered by the
        # angle around the mask centroid so the virtual boundary ring
        # carries a single minimum and saddle instead of one per raster
        # stair-step.  Ranks are dense over domain vertices.
        vy, vx = np.nonzero(domain)
        vvals = np.where(mask, values, -np.inf)[vy, vx]
        my, mx = np.nonzero(mask)
        cy, cx = my.mean(), mx.mean()
        angle = np.arctan2(vy - cy, vx - cx)
        angle = np.where(mask[vy, vx], 0.0, angle)
        order = np.lexsort((vx, vy, angle, vvals))
        rank = np.full(values.shape, np.iinfo(np.int64).max, dtype=np.int64)
        rank[vy[order], vx[order]] = np.arange(order.size)
        self.rank = rank
        self.values = values
        self.collar = collar

        self.partner, crit = _process_lower_stars(rank, domain)
        self.critical = crit.astype(bool)

    # -- cell helpers ---------------------------------------------------

    def cell_dim(self, cell: int) -> int:
        a = cell % self.dw
        b = cell // self.dw
        return (a & 1) + (b & 1)

    def cell_coords(self, cell: int) -> tuple[int, int]:
        return cell % self.dw, cell // self.dw

    def cell_location(self, cell: int) -> tuple[float, float]:
        """Cell center in original (unpadded) pixel coordinates."""
        a, b = self.cell_coords(cell)
        return a / 2.0 - 1.0, b / 2.0 - 1.0

    def cell_vertices(self, cell: int) -> list:
        a, b = self.cell_coords(cell)
        xs = (a // 2, a // 2 + 1) if a & 1 else (a // 2,)
        ys = (b // 2, b // 2 + 1) if b & 1 else (b // 2,)
        return [(x, y) for y in ys for x in xs]

    def cell_value(self, cell: int) -> float:
        """Field value at the cell's highest vertex (-inf on the collar)."""
        best = -np.inf
        best_rank = -1
        for x, y in self.cell_vertices(cell):
            if self.rank[y, x] > best_rank:
                best_rank = self.rank[y, x]
                v = -np.inf if self.collar[y, x] else self.values[y, x]
                best = v
        return best

    def cell_rank_key(self, cell: int) -> tuple:
        ranks = sorted((int(self.rank[y, x]) for x, y in self.cell_vertices(cell)),
                       reverse=True)
        return tuple(ranks)

    def cell_on_collar(self, cell: int) -> bool:
        return any(self.collar[y, x] for x, y in self.cell_vertices(cell))

    def cell_is_virtual(self, cell: int) -> bool:
        """Highest vertex sits on the collar (a purely artificial cell)."""
        vs = self.cell_vertices(cell)
        top = max(vs, key=lambda p: self.rank[p[1], p[0]])
        return bool(self.collar[top[1], top[0]])

    def copy(self) -> "_GradientEngine":
        clone = object.__new__(_GradientEngine)
        clone.__dict__.update(self.__dict__)
        clone.partner = self.partner.copy()
        clone.critical = self.critical.copy()
        return clone

    def euler_characteristic(self) -> int:
        d = self.domain
        v = int(d.sum())
        e = int((d[:, :-1] & d[:, 1:]).sum() + (d[:-1, :] & d[1:, :]).sum())
        f = int((d[:-1, :-1] & d[:-1, 1:] & d[1:, :-1] & d[1:, 1:]).sum())
        return v - e + f

    # -- gradient paths ---------------------------------------------------

    def _edge_endpoints(self, cell: int) -> tuple[int, int]:
        a, b = self.cell_coords(cell)
        if a & 1:
            return b * self.dw + (a - 1), b * self.dw + (a + 1)
        return (b - 1) * self.dw + a, (b + 1) * self.dw + a

    def _edge_cofaces(self, cell: int) -> list:
        a, b = self.cell_coords(cell)
        out = []
        if a & 1:  # horizontal edge: squares above and below
            cand = ((a, b - 1), (a, b + 1))
        else:
            cand = ((a - 1, b), (a + 1, b))
        for ca, cb in cand:
            if 0 <= ca < self.dw and 0 <= cb < self.dh:
                sq = cb * self.dw + ca
                if self._square_present(sq):
                    out.append(sq)
        return out

    def _square_present(self, cell: int) -> bool:
        a, b = self.cell_coords(cell)
        if not (a & 1 and b & 1):
            return False
        x, y = a // 2, b // 2
        d = self.domain
        return bool(d[y, x] and d[y, x + 1] and d[y + 1, x] and d[y + 1, x + 1])

    def trace_descending(self, saddle: int) -> list:
        """Two vertex paths from a critical edge down to critical vertices.

        Each entry is (min_cell, [cells along the path: saddle, v, e, v...]).
        """
        out = []
        for v in self._edge_endpoints(saddle):
            path = [saddle, v]
            while not self.critical[v]:
                e = self.partner[v]
                v2a, v2b = self._edge_endpoints(e)
                v = v2b if v2a == path[-1] else v2a
                path.append(e)
                path.append(v)
            out.append((v, path))
        return out

    def trace_ascending(self, saddle: int) -> list:
        """Gradient paths from a critical edge up to critical squares.

        Entries are (max_cell_or_None, path); None marks a path that
        exits through the complex boundary.
        """
        out = []
        for q in self._edge_cofaces(saddle):
            path = [saddle, q]
            terminal: int | None = None
            while True:
                if self.critical[q]:
                    terminal = q
                    break
                e = self.partner[q]
                cofaces = self._edge_cofaces(e)
                nxt = [c for c in cofaces if c != q]
                path.append(e)
                if not nxt:
                    break
                q = nxt[0]
                path.append(q)
            out.append((terminal, path))
        return out

    # -- cancellation -----------------------------------------------------

    def cancel_to_min(self, saddle: int, target_min: int) -> bool:
        paths = self.trace_descending(saddle)
        hits = [p for m, p in paths if m == target_min]
        others = [m for m, _ in paths if m != target_min]
        if len(hits) != 1 or not others:
            return False
        path = hits[0]
        # path: saddle, v1, e1, v2, ..., m; reverse all pairs
        for i in range(0, len(path) - 1, 2):
            cell_hi = path[i]      # edge
            cell_lo = path[i + 1]  # vertex
            self.partner[cell_lo] = cell_hi
            self.partner[cell_hi] = cell_lo
        self.critical[saddle] = False
        self.critical[target_min] = False
        return True

    def cancel_to_max(self, saddle: int, target_max: int) -> bool:
        paths = self.trace_ascending(saddle)
        hits = [p for m, p in paths if m == target_max]
        others = [m for m, _ in paths if m != target_max]
        if len(hits) != 1 or not others:
            return False
        path = hits[0]
        # path: saddle, q1, e1, q2, ..., M; reverse all pairs
        for i in range(0, len(path) - 1, 2):
            cell_lo = path[i]      # edge
            cell_hi = path[i + 1]  # square
            self.partner[cell_lo] = cell_hi
            self.partner[cell_hi] = cell_lo
        self.critical[saddle] = False
        self.critical[target_max] = False
        return True

    # -- basin labels -------------------------------------------------------

    def vertex_basins(self) -> dict:
        """Map vertex cell -> its descending critical vertex (minimum).

        Memoized path-following: after cancellations the gradient is no
        longer rank-monotone, but it stays acyclic.
        """
        labels: dict[int, int] = {}
        vy, vx = np.nonzero(self.domain)
        for x0, y0 in zip(vx, vy):
            v0 = (2 * int(y0)) * self.dw + (2 * int(x0))
            if v0 in labels:
                continue
            stack = [v0]
            while stack:
                v = stack[-1]
                if v in labels:
                    stack.pop()
                    continue
                if self.critical[v]:
                    labels[v] = v
                    stack.pop()
                    continue
                e = self.partner[v]
                a, b = self._edge_endpoints(e)
                nxt = int(b if a == v else a)
                if nxt in labels:
                    labels[v] = labels[nxt]
                    stack.pop()
                else:
                    stack.append(nxt)
        return labels

    def square_basins(self) -> dict:
        """Map square cell -> its ascending critical square (maximum, or -1)."""
        labels: dict[int, int] = {}
        h, w = self.padded_shape
        for y in range(h - 1):
            for x in range(w - 1):
                q0 = (2 * y + 1) * self.dw + (2 * x + 1)
                if not self._square_present(q0) or q0 in labels:
                    continue
                stack = [q0]
                while stack:
                    q = stack[-1]
                    if q in labels:
                        stack.pop()
                        continue
                    if self.critical[q]:
                        labels[q] = q
                        stack.pop()
                        continue
                    e = self.partner[q]
                    nxt = [c for c in self._edge_cofaces(e) if c != q]
                    if not nxt:
                        labels[q] = -1
                        stack.pop()
                        continue
                    if nxt[0] in labels:
                        labels[q] = labels[nxt[0]]
                        stack.pop()
                    else:
                        stack.append(nxt[0])
        return labels


def _cells_to_polyline(engine: _GradientEngine, path: list) -> np.ndarray:
    return np.array([engine.cell_location(c) for c in path], dtype=np.float64)


def smooth_polyline(points: np.ndarray, iterations: int = 5) -> np.ndarray:
    """Laplacian smoothing with fixed endpoints (subpixel geometry)."""
    pts = np.asarray(points, dtype=np.float64).copy()
    if len(pts) < 3:
        return pts
    for _ in range(iterations):
        pts[1:-1] = 0.5 * pts[1:-1] + 0.25 * (pts[:-2] + pts[2:])
    return pts


def _build_complex(engine: _GradientEngine, field_ref: dict) -> MSComplex:
    crit_cells = np.nonzero(engine.critical)[0]
    points = []
    cell_to_pid = {}
    for pid, cell in enumerate(sorted(int(c) for c in crit_cells)):
        dim = engine.cell_dim(cell)
        points.append(CriticalPoint(
            id=pid,
            index=dim,
            location=engine.cell_location(cell),
            value=engine.cell_value(cell),
            on_boundary=engine.cell_on_collar(cell),
            virtual=engine.cell_is_virtual(cell),
            cell=engine.cell_coords(cell),
        ))
        cell_to_pid[cell] = pid

    one_cells = []
    cid = 0
    for p in points:
        if p.index != 1:
            continue
        saddle_cell = p.cell[1] * engine.dw + p.cell[0]
        for terminal, path in engine.trace_descending(saddle_cell):
            poly = _cells_to_polyline(engine, path)
            one_cells.append(OneCell(
                id=cid, from_saddle=p.id, to_extremum=cell_to_pid[terminal],
                polyline=smooth_polyline(poly), grid_path=poly,
                endpoint_indices=(1, 0),
                on_boundary=p.on_boundary or any(
                    engine.cell_on_collar(c) for c in path),
            ))
            cid += 1
        for terminal, path in engine.trace_ascending(saddle_cell):
            poly = _cells_to_polyline(engine, path)
            one_cells.append(OneCell(
                id=cid, from_saddle=p.id,
                to_extremum=cell_to_pid[terminal] if terminal is not None else None,
                polyline=smooth_polyline(poly), grid_path=poly,
                endpoint_indices=(1, 2 if terminal is not None else None),
                on_boundary=p.on_boundary or terminal is None or any(
                    engine.cell_on_collar(c) for c in path),
            ))
            cid += 1

    # Per-pixel 2-cell labels: pair of (min basin, max basin).
    vlabels = engine.vertex_basins()
    qlabels = engine.square_basins()
    h, w = engine.shape
    labels = np.full((h, w), -1, dtype=np.int64)
    pair_ids: dict[tuple[int, int], int] = {}
    for y in range(h):
        for x in range(w):
            if not engine.is_mask[y + 1, x + 1]:
                continue
            v = (2 * (y + 1)) * engine.dw + (2 * (x + 1))
            qx = min(x + 1, engine.padded_shape[1] - 2)
            qy = min(y + 1, engine.padded_shape[0] - 2)
            q = (2 * qy + 1) * engine.dw + (2 * qx + 1)
            key = (vlabels.get(v, -1), qlabels.get(q, -1))
            if key not in pair_ids:
                pair_ids[key] = len(pair_ids)
            labels[y, x] = pair_ids[key]

    complex_ = MSComplex(points=points, one_cells=one_cells,
                         two_cell_labels=labels, field_ref=field_ref,
                         _engine=engine)
    _fill_persistence(complex_)
    return complex_


def compute_ms_complex(f: ScalarField, name: str = "") -> MSComplex:
    """Morse-Smale complex of a scalar field.

    The masked region must be 4-connected and nonempty.  Values are made
    unique by the lexicographic tie-break; the mask boundary is collared
    (see module docstring).
    """
    engine = _GradientEngine(f)
    field_ref = {
        "source": name,
        "shape": [int(s) for s in f.values.shape],
        "spacing": f.spacing,
        "simplification_threshold": 0.0,
        "tie_break": "lex",
    }
    return _build_complex(engine, field_ref)


# ---------------------------------------------------------------------------
# Persistence pairing and simplification
# ---------------------------------------------------------------------------

class _UnionFind:
    def __init__(self):
        self.parent: dict[int, int] = {}

    def add(self, x: int) -> None:
        self.parent.setdefault(x, x)

    def find(self, x: int) -> int:
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, a: int, b: int) -> None:
        self.parent[self.find(a)] = self.find(b)


def _raw_pairs(engine: _GradientEngine):
    """Saddle pairing on the current gradient: (saddle_cell, partner_cell,
    kind) with kind "min" or "max", plus each pair's persistence."""
    crit = np.nonzero(engine.critical)[0]
    saddles = [int(c) for c in crit if engine.cell_dim(int(c)) == 1]
    minima = [int(c) for c in crit if engine.cell_dim(int(c)) == 0]
    maxima = [int(c) for c in crit if engine.cell_dim(int(c)) == 2]
    saddles.sort(key=engine.cell_rank_key)

    mins_uf = _UnionFind()
    for m in minima:
        mins_uf.add(m)
    # representative = lowest-rank minimum of the component
    rep: dict[int, int] = {m: m for m in minima}

    def mrank(cell: int) -> tuple:
        return engine.cell_rank_key(cell)

    pairs = []
    leftover = []
    for s in saddles:
        ends = [m for m, _ in engine.trace_descending(s)]
        a, b = ends[0], ends[1] if len(ends) > 1 else ends[0]
        ra, rb = mins_uf.find(a), mins_uf.find(b)
        if ra == rb:
            leftover.append(s)
            continue
        ma, mb = rep[ra], rep[rb]
        younger = ma if mrank(ma) > mrank(mb) else mb
        older = mb if younger == ma else ma
        pairs.append((s, younger, "min"))
        mins_uf.union(ra, rb)
        rep[mins_uf.find(ra)] = older

    maxs_uf = _UnionFind()
    VIRTUAL_OUT = -7  # ascending paths that exit the complex boundary
    for m in maxima:
        maxs_uf.add(m)
    maxs_uf.add(VIRTUAL_OUT)
    rep_max: dict[int, int] = {m: m for m in maxima}
    rep_max[VIRTUAL_OUT] = VIRTUAL_OUT

    def xrank(cell: int) -> tuple:
        if cell == VIRTUAL_OUT:
            return (np.iinfo(np.int64).max,)
        return engine.cell_rank_key(cell)

    for s in sorted(leftover, key=engine.cell_rank_key, reverse=True):
        ends = [m if m is not None else VIRTUAL_OUT
                for m, _ in engine.trace_ascending(s)]
        if len(ends) == 1:
            ends = ends + [VIRTUAL_OUT]
        a, b = ends[0], ends[1]
        ra, rb = maxs_uf.find(a), maxs_uf.find(b)
        if ra == rb:
            log.warning("saddle %s pairs with neither side; leaving unpaired", s)
            continue
        ma, mb = rep_max[ra], rep_max[rb]
        younger = ma if xrank(ma) < xrank(mb) else mb
        older = mb if younger == ma else ma
        pairs.append((s, younger if younger != VIRTUAL_OUT else None, "max"))
        maxs_uf.union(ra, rb)
        rep_max[maxs_uf.find(ra)] = older
    return pairs


def _pair_persistence(engine: _GradientEngine, s: int, other: int | None) -> float:
    if other is None:
        return INF
    vs = engine.cell_value(s)
    vo = engine.cell_value(other)
    if not (math.isfinite(vs) and math.isfinite(vo)):
        return INF
    return abs(vs - vo)


def persistence_pairs(c: MSComplex) -> list:
    """Saddle-extremum persistence pairs of the complex.

    Merge saddles pair with minima from below; cycle saddles pair with
    maxima from above.  Pairs that involve the virtual collar (or an
    ascending path leaving the domain) have infinite persistence, as do
    the unpaired points carrying the domain topology.
    """
    engine = c._engine
    cell_to_pid = {p.cell[1] * engine.dw + p.cell[0]: p.id for p in c.points}
    out = []
    for s, other, kind in _raw_pairs(engine):
        if other is None:
            continue
        pers = _pair_persistence(engine, s, other)
        if kind == "min":
            birth, death = cell_to_pid[other], cell_to_pid[s]
        else:
            birth, death = cell_to_pid[s], cell_to_pid[other]
        out.append(PersistencePair(birth, death, pers))
    return out


def _fill_persistence(c: MSComplex) -> None:
    for p in c.points:
        p.persistence = INF
    for pair in persistence_pairs(c):
        if math.isfinite(pair.persistence):
            c.point(pair.birth_point_id).persistence = pair.persistence
            c.point(pair.death_point_id).persistence = pair.persistence


def simplify(c: MSComplex, threshold: float) -> MSComplex:
    """Cancel all pairs with persistence < threshold, lowest first.

    Cancellation reverses the gradient path between the pair, so the
    result is again a valid complex; ``threshold = 0`` returns an
    identical copy.
    """
    if threshold < 0:
        raise ArgumentError("threshold must be >= 0")
    engine = c._engine.copy()
    if threshold > 0:
        while True:
            cand = [(s, other, kind, _pair_persistence(engine, s, other))
                    for s, other, kind in _raw_pairs(engine)]
            cand = [t for t in cand if t[3] < threshold and t[1] is not None]
            if not cand:
                break
            cand.sort(key=lambda t: (t[3], engine.cell_rank_key(t[0])))
            done = False
            for s, other, kind, _ in cand:
                ok = (engine.cancel_to_min(s, other) if kind == "min"
                      else engine.cancel_to_max(s, other))
                if ok:
                    done = True
                    break
            if not done:
                log.warning("no cancellable pair below threshold; stopping")
                break
    field_ref = dict(c.field_ref)
    field_ref["simplification_threshold"] = float(threshold)
    return _build_complex(engine, field_ref)


# ---------------------------------------------------------------------------
# Monotone invariance
# ---------------------------------------------------------------------------

def _canonical(c: MSComplex):
    pts = sorted((p.cell, p.index) for p in c.points)
    cells = sorted(
        (tuple(map(tuple, oc.grid_path)), oc.endpoint_indices) for oc in c.one_cells
    )
    return pts, cells


def monotone_invariance_check(f: ScalarField, g) -> bool:
    """True iff the complex of g(f) equals the complex of f combinatorially.

    ``g`` must be strictly increasing on the value range (checked by
    applying it to every distinct value); identical critical cells,
    index assignments, and 1-cell paths are required.
    """
    lo, hi = f.value_range()
    samples = np.linspace(lo, hi, 4097) if hi > lo else np.array([lo])
    gv = np.asarray(g(samples), dtype=np.float64)
    if not (np.all(np.isfinite(gv)) and np.all(np.diff(gv) > 0)):
        raise ArgumentError("g is not strictly increasing on the value range")
    gf = ScalarField(np.where(f.mask, g(f.values), 0.0), f.spacing, f.mask.copy())
    return _canonical(compute_ms_complex(f)) == _canonical(compute_ms_complex(gf))


# ---------------------------------------------------------------------------
# Independent per-vertex classification (oracle and local search)
# ---------------------------------------------------------------------------

def classify_vertices(f: ScalarField) -> dict:
    """Exhaustive lower-star classification of every (collared) vertex.

    Returns arrays over the padded grid: n_min, n_saddle, n_max per
    vertex -- the number of critical cells each vertex's lower star
    contributes, determined purely by lower-link connectivity.  This is
    the brute-force oracle for the gradient construction.
    """
    engine_vals = np.pad(f.values, 1, constant_values=0.0)
    mask = np.pad(f.mask, 1, constant_values=False)
    collar = ndimage.binary_dilation(mask, structure=np.ones((3, 3), bool)) & ~mask
    domain = mask | collar
    h, w = engine_vals.shape
    vy, vx = np.nonzero(domain)
    vvals = np.where(mask, engine_vals, -np.inf)[vy, vx]
    my, mx = np.nonzero(mask)
    cy, cx = my.mean(), mx.mean()
    angle = np.arctan2(vy - cy, vx - cx)
    angle = np.where(mask[vy, vx], 0.0, angle)
    order = np.lexsort((vx, vy, angle, vvals))
    rank = np.full(engine_vals.shape, np.iinfo(np.int64).max, dtype=np.int64)
    rank[vy[order], vx[order]] = np.arange(order.size)

    big = np.iinfo(np.int64).max
    rk = np.full((h + 2, w + 2), big, dtype=np.int64)
    rk[1:-1, 1:-1] = rank
    dom = np.zeros((h + 2, w + 2), dtype=bool)
    dom[1:-1, 1:-1] = domain

    def shifted(arr, dx, dy):
        return arr[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w]

    # link positions, counterclockwise: E, NE, N, NW, W, SW, S, SE
    dirs = [(1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1)]
    r0 = rk[1 : 1 + h, 1 : 1 + w]
    present = []
    in_lower = []
    for i, (dx, dy) in enumerate(dirs):
        if i % 2 == 0:  # edge node: the 4-neighbor
            p = shifted(dom, dx, dy)
            lower = p & (shifted(rk, dx, dy) < r0)
        else:  # square node: diagonal + its two 4-neighbors
            p = (shifted(dom, dx, dy) & shifted(dom, dx, 0) & shifted(dom, 0, dy))
            lower = p & (shifted(rk, dx, dy) < r0) & (shifted(rk, dx, 0) < r0) \
                & (shifted(rk, 0, dy) < r0)
        present.append(p & domain)
        in_lower.append(lower & domain)

    low = np.stack(in_lower)        # (8, h, w)
    avail = np.stack(present)
    # components of the lower link on the 8-cycle: count starts of runs
    starts = low & ~np.roll(low, 1, axis=0)
    n_comp = starts.sum(axis=0)
    full_cycle = low.all(axis=0)
    empty = ~low.any(axis=0)

    n_min = np.where(domain & empty, 1, 0)
    n_saddle = np.where(domain & ~empty & ~full_cycle, np.maximum(n_comp - 1, 0), 0)
    n_max = np.where(domain & full_cycle, 1, 0)
    # a full cycle has no run start; it is one component, zero saddles
    return {"n_min": n_min, "n_saddle": n_saddle, "n_max": n_max,
            "domain": domain, "collar": collar}


def local_critical_points(f: ScalarField, region: np.ndarray | None = None) -> list:
    """Critical points of ``f`` from local classification (no gradient).

    Returns (x, y, kind) tuples in original pixel coordinates with kind
    in {"min", "saddle", "max"}; collar artifacts are excluded.  When
    ``region`` (bool, original shape) is given, only vertices inside it
    are reported.
    """
    cls = classify_vertices(f)
    out = []
    inner = slice(1, -1)
    not_collar = ~cls["collar"][inner, inner]
    for kind, arr in (("min", cls["n_min"]), ("saddle", cls["n_saddle"]),
                      ("max", cls["n_max"])):
        sel = (arr[inner, inner] > 0) & not_collar
        ys, xs = np.nonzero(sel)
        for x, y in zip(xs, ys):
            if region is not None and not region[y, x]:
                continue
            out.append((float(x), float(y), kind))
    return out


# ---------------------------------------------------------------------------
# Ring extraction
# ---------------------------------------------------------------------------

def _ray_crossings(poly: np.ndarray, center: tuple[float, float]) -> int:
    """Crossings of the horizontal ray from center toward +x."""
    cx, cy = center
    x, y = poly[:, 0], poly[:, 1]
    n = 0
    for i in range(len(poly) - 1):
        y1, y2 = y[i], y[i + 1]
        if (y1 <= cy) == (y2 <= cy):
            continue
        t = (cy - y1) / (y2 - y1)
        xi = x[i] + t * (x[i + 1] - x[i])
        if xi > cx:
            n += 1
    return n


def enclosing_ring(c: MSComplex, center: tuple[float, float],
                   include_boundary: bool = False):
    """Shortest closed cycle of 1-cells that winds around ``center``.

    Returns (one_cell_ids, closed_polyline) or None.  Uses the standard
    double-cover construction: 1-cells crossing a reference ray an odd
    number of times switch layers; an odd-crossing cycle is a loop with
    odd winding about the center.
    """
    import networkx as nx

    g = nx.Graph()
    edges = []
    for oc in c.one_cells:
        if oc.to_extremum is None:
            continue
        if not include_boundary and oc.on_boundary:
            continue
        parity = _ray_crossings(oc.polyline, center) % 2
        edges.append((oc.from_saddle, oc.to_extremum, parity, oc))
    for a, b, parity, oc in edges:
        wgt = oc.length() + 1e-9
        for layer in (0, 1):
            key = ((a, layer), (b, (layer + parity) % 2))
            if g.has_edge(*key) and g.edges[key]["weight"] <= wgt:
                continue  # keep the lighter of parallel 1-cells
            g.add_edge(*key, weight=wgt, cell=oc.id)
    best = None
    nodes = {a for a, _, _, _ in edges} | {b for _, b, _, _ in edges}
    for v in nodes:
        if (v, 0) not in g or (v, 1) not in g:
            continue
        try:
            length, path = nx.single_source_dijkstra(g, (v, 0), (v, 1))
        except Exception:
            continue
        if best is None or length < best[0]:
            best = (length, path)
    if best is None:
        return None
    _, path = best
    cell_ids = []
    for i in range(len(path) - 1):
        cell_ids.append(g.edges[path[i], path[i + 1]]["cell"])
    by_id = {oc.id: oc for oc in c.one_cells}
    pieces = []
    node_seq = [p[0] for p in path]
    for i, cid in enumerate(cell_ids):
        oc = by_id[cid]
        poly = oc.polyline
        if oc.from_saddle != node_seq[i]:
            poly = poly[::-1]
        pieces.append(poly if i == 0 else poly[1:])
    ring = np.vstack(pieces)
    return cell_ids, ring


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------

def complex_to_json(c: MSComplex, two_cells_path: str = "") -> dict:
    """JSON-ready dict: points, one_cells (with polylines), meta."""
    return {
        "points": [
            {
                "id": p.id, "index": p.index,
                "x": p.location[0], "y": p.location[1],
                "value": None if not math.isfinite(p.value) else p.value,
                "persistence": None if not math.isfinite(p.persistence)
                else p.persistence,
                "on_boundary": p.on_boundary, "virtual": p.virtual,
            }
            for p in c.points
        ],
        "one_cells": [
            {
                "id": oc.id, "from": oc.from_saddle, "to": oc.to_extremum,
                "polyline": [[round(float(x), 4), round(float(y), 4)]
                             for x, y in oc.polyline],
                "on_boundary": oc.on_boundary,
            }
            for oc in c.one_cells
        ],
        "two_cells": two_cells_path,
        "meta": {
            "threshold": c.field_ref.get("simplification_threshold", 0.0),
            "tie_break": "lex",
            "source": c.field_ref.get("source", ""),
        },
    }
