"""Lower-star cubical filtrations of image patches and their persistence.

Cells of an ``S x S`` patch live on a ``(2S+1) x (2S+1)`` grid: a cell at
grid position ``(i, j)`` has dimension ``(i % 2) + (j % 2)``, so pixels
(squares) sit at odd/odd positions and vertices at even/even ones.  The cell
index is the row-major position in that grid.

Squares take the pixel value; vertices and edges take the minimum over the
squares they bound.  Cells are ordered by ``(value, dimension, index)`` and
the boundary matrix is reduced over Z/2 with the twist (clearing) optimization:
dimension-2 columns are reduced first and every edge that becomes a pivot is
skipped when the dimension-1 columns are reduced.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, List, Sequence, Tuple

import numpy as np
from numba import njit

from .grid_io import Patch

ESSENTIAL_POLICIES = ("cap_at_max_value", "cap_at_limit", "drop", "keep")


@dataclass(frozen=True)
class CubicalFiltration:
    size: int
    values: np.ndarray    # per cell, flat over the (2S+1)^2 grid
    dims: np.ndarray      # per cell
    order: np.ndarray     # cell indices in filtration order

    @property
    def side(self) -> int:
        return 2 * self.size + 1

    def counts(self) -> Tuple[int, int, int]:
        c = np.bincount(self.dims, minlength=3)
        return int(c[0]), int(c[1]), int(c[2])

    def boundary(self, cell: int) -> List[int]:
        n = self.side
        i, j = divmod(int(cell), n)
        out = []
        if i % 2:
            out += [(i - 1) * n + j, (i + 1) * n + j]
        if j % 2:
            out += [i * n + j - 1, i * n + j + 1]
        return out if self.dims[cell] else []


@dataclass
class PersistenceDiagram:
    """Multiset of ``(birth, death, degree)`` intervals.

    ``death`` is ``inf`` for essential classes only under the ``keep`` policy.
    """

    births: np.ndarray
    deaths: np.ndarray
    degrees: np.ndarray
    limits: Tuple[float, float] = (-5.0, 5.0)
    essential_policy: str = "cap_at_max_value"

    def __post_init__(self):
        self.births = np.asarray(self.births, dtype=np.float64).reshape(-1)
        self.deaths = np.asarray(self.deaths, dtype=np.float64).reshape(-1)
        self.degrees = np.asarray(self.degrees, dtype=np.int64).reshape(-1)
        if not (len(self.births) == len(self.deaths) == len(self.degrees)):
            raise ValueError("births, deaths and degrees must have equal length")
        self.limits = (float(self.limits[0]), float(self.limits[1]))

    @classmethod
    def from_intervals(cls, intervals: Iterable[Sequence[float]], degree: int = 0, **kw) -> "PersistenceDiagram":
        pts = [tuple(p) for p in intervals]
        births = [p[0] for p in pts]
        deaths = [p[1] for p in pts]
        degrees = [int(p[2]) if len(p) > 2 else degree for p in pts]
        return cls(np.array(births, dtype=float), np.array(deaths, dtype=float),
                   np.array(degrees, dtype=np.int64), **kw)

    def __len__(self) -> int:
        return len(self.births)

    @property
    def lengths(self) -> np.ndarray:
        return self.deaths - self.births

    def intervals(self, degree=None) -> List[Tuple[float, float]]:
        keep = np.ones(len(self), bool) if degree is None else self.degrees == degree
        return sorted(zip(self.births[keep].tolist(), self.deaths[keep].tolist()))

    def select_degrees(self, degrees: Iterable[int]) -> "PersistenceDiagram":
        keep = np.isin(self.degrees, list(degrees))
        return self._subset(keep)

    def _subset(self, keep: np.ndarray) -> "PersistenceDiagram":
        return PersistenceDiagram(self.births[keep], self.deaths[keep], self.degrees[keep],
                                  self.limits, self.essential_policy)

    def shifted(self, c: float) -> "PersistenceDiagram":
        return PersistenceDiagram(self.births + c, self.deaths + c, self.degrees,
                                  self.limits, self.essential_policy)

    def __add__(self, other: "PersistenceDiagram") -> "PersistenceDiagram":
        return PersistenceDiagram(np.concatenate([self.births, other.births]),
                                  np.concatenate([self.deaths, other.deaths]),
                                  np.concatenate([self.degrees, other.degrees]),
                                  self.limits, self.essential_policy)

    def dumps(self) -> str:
        """Text form: one ``degree birth death`` line per interval."""
        lines = []
        for b, d, k in sorted(zip(self.births.tolist(), self.deaths.tolist(), self.degrees.tolist()),
                              key=lambda t: (t[2], t[0], t[1])):
            lines.append(f"{k} {b!r} {'inf' if math.isinf(d) else repr(d)}")
        return "\n".join(lines) + ("\n" if lines else "")

    @classmethod
    def loads(cls, text: str, **kw) -> "PersistenceDiagram":
        rows = [ln.split() for ln in text.splitlines() if ln.strip()]
        return cls.from_intervals([(float(b), float(d), int(k)) for k, b, d in rows], **kw)


def build_filtration(p) -> CubicalFiltration:
    """Lower-star filtration of a patch (``Patch`` or 2D array)."""
    values = np.asarray(p.values if isinstance(p, Patch) else p, dtype=np.float64)
    if values.ndim != 2 or values.shape[0] != values.shape[1]:
        raise ValueError(f"expected a square patch, got shape {values.shape}")
    s = values.shape[0]
    if s < 2:
        raise ValueError("patch size must be at least 2")
    n = 2 * s + 1
    padded = np.full((s + 2, s + 2), np.inf)
    padded[1:-1, 1:-1] = values
    grid = np.empty((n, n))
    # vertex (2r, 2c) touches pixels (r-1..r, c-1..c)
    grid[0::2, 0::2] = np.minimum(np.minimum(padded[:-1, :-1], padded[:-1, 1:]),
                                  np.minimum(padded[1:, :-1], padded[1:, 1:]))
    # horizontal edge (2r, 2c+1) touches pixels (r-1, c) and (r, c)
    grid[0::2, 1::2] = np.minimum(padded[:-1, 1:-1], padded[1:, 1:-1])
    # vertical edge (2r+1, 2c) touches pixels (r, c-1) and (r, c)
    grid[1::2, 0::2] = np.minimum(padded[1:-1, :-1], padded[1:-1, 1:])
    grid[1::2, 1::2] = values
    ii, jj = np.indices((n, n))
    dims = ((ii % 2) + (jj % 2)).ravel().astype(np.int64)
    flat = grid.ravel()
    order = np.lexsort((np.arange(n * n), dims, flat))
    return CubicalFiltration(size=s, values=flat, dims=dims, order=order)


def _boundary_in_order(f: CubicalFiltration) -> Tuple[np.ndarray, np.ndarray]:
    """Per filtration position, the filtration positions of its facets (CSR)."""
    n = f.side
    total = n * n
    pos = np.empty(total, dtype=np.int64)
    pos[f.order] = np.arange(total)
    ii, jj = np.divmod(f.order, n)
    dims = f.dims[f.order]
    counts = np.where(dims == 2, 4, np.where(dims == 1, 2, 0))
    ptr = np.zeros(total + 1, dtype=np.int64)
    np.cumsum(counts, out=ptr[1:])
    idx = np.empty(ptr[-1], dtype=np.int64)

    sq = np.flatnonzero(dims == 2)
    ci, cj, base = ii[sq], jj[sq], ptr[sq]
    idx[base + 0] = pos[(ci - 1) * n + cj]
    idx[base + 1] = pos[(ci + 1) * n + cj]
    idx[base + 2] = pos[ci * n + cj - 1]
    idx[base + 3] = pos[ci * n + cj + 1]

    ed = np.flatnonzero(dims == 1)
    ci, cj, base = ii[ed], jj[ed], ptr[ed]
    vert = (ci % 2) == 1
    a = np.where(vert, (ci - 1) * n + cj, ci * n + cj - 1)
    b = np.where(vert, (ci + 1) * n + cj, ci * n + cj + 1)
    idx[base + 0] = pos[a]
    idx[base + 1] = pos[b]
    return ptr, idx


# --- numba kernel ----------------------------------------------------------
# A max-heap with multiplicities represents the working column (PHAT's heap
# column): equal entries cancel in pairs when the pivot is queried.

@njit(cache=True)
def _heap_push(heap, size, x):
    if size == heap.shape[0]:
        grown = np.empty(2 * heap.shape[0], np.int64)
        grown[:size] = heap[:size]
        heap = grown
    i = size
    heap[i] = x
    size += 1
    while i > 0:
        parent = (i - 1) >> 1
        if heap[parent] < heap[i]:
            heap[parent], heap[i] = heap[i], heap[parent]
            i = parent
        else:
            break
    return heap, size


@njit(cache=True)
def _heap_pop(heap, size):
    top = heap[0]
    size -= 1
    heap[0] = heap[size]
    i = 0
    while True:
        left = 2 * i + 1
        if left >= size:
            break
        big = left
        if left + 1 < size and heap[left + 1] > heap[left]:
            big = left + 1
        if heap[big] > heap[i]:
            heap[big], heap[i] = heap[i], heap[big]
            i = big
        else:
            break
    return top, size


@njit(cache=True)
def _heap_pivot(heap, size):
    """Largest entry with odd multiplicity (left on the heap), or -1."""
    while size > 0:
        top, size = _heap_pop(heap, size)
        if size > 0 and heap[0] == top:
            _, size = _heap_pop(heap, size)
            continue
        heap, size = _heap_push(heap, size, top)
        return top, heap, size
    return -1, heap, size


@njit(cache=True)
def _reduce_twist(dims, ptr, idx):
    n = dims.shape[0]
    pivot_col = np.full(n, -1, np.int64)   # row -> column having it as pivot
    cleared = np.zeros(n, np.bool_)
    col_start = np.zeros(n, np.int64)
    col_len = np.zeros(n, np.int64)
    store = np.empty(max(16, idx.shape[0]), np.int64)
    store_size = 0
    heap = np.empty(64, np.int64)
    pairs_b = np.empty(n, np.int64)
    pairs_d = np.empty(n, np.int64)
    npairs = 0
    for d in (2, 1):
        for j in range(n):
            if dims[j] != d or cleared[j]:
                continue
            size = 0
            for k in range(ptr[j], ptr[j + 1]):
                heap, size = _heap_push(heap, size, idx[k])
            low, heap, size = _heap_pivot(heap, size)
            while low != -1 and pivot_col[low] != -1:
                other = pivot_col[low]
                s0 = col_start[other]
                for k in range(s0, s0 + col_len[other]):
                    heap, size = _heap_push(heap, size, store[k])
                low, heap, size = _heap_pivot(heap, size)
            if low == -1:
                continue
            pivot_col[low] = j
            cleared[low] = True
            pairs_b[npairs] = low
            pairs_d[npairs] = j
            npairs += 1
            # move the reduced column into the store
            col_start[j] = store_size
            count = 0
            while True:
                p, heap, size = _heap_pivot(heap, size)
                if p == -1:
                    break
                _, size = _heap_pop(heap, size)
                if store_size == store.shape[0]:
                    grown = np.empty(2 * store.shape[0], np.int64)
                    grown[:store_size] = store[:store_size]
                    store = grown
                store[store_size] = p
                store_size += 1
                count += 1
            col_len[j] = count
    paired = np.zeros(n, np.bool_)
    for k in range(npairs):
        paired[pairs_b[k]] = True
        paired[pairs_d[k]] = True
    essential = np.flatnonzero(~paired)
    return pairs_b[:npairs].copy(), pairs_d[:npairs].copy(), essential


def _reduce_naive(f: CubicalFiltration) -> Tuple[List[int], List[int], List[int]]:
    """Plain left-to-right Z/2 column reduction with Python sets (test oracle)."""
    ptr, idx = _boundary_in_order(f)
    n = len(f.order)
    cols: List[set] = []
    pivot_of = {}
    births, deaths = [], []
    for j in range(n):
        col = set(idx[ptr[j]:ptr[j + 1]].tolist())
        while col:
            low = max(col)
            if low not in pivot_of:
                break
            col ^= cols[pivot_of[low]]
        cols.append(col)
        if col:
            low = max(col)
            pivot_of[low] = j
            births.append(low)
            deaths.append(j)
    paired = set(births) | set(deaths)
    essential = [j for j in range(n) if j not in paired]
    return births, deaths, essential


def _diagram_from_pairs(f, births, deaths, essential, essential_policy, limits) -> PersistenceDiagram:
    if essential_policy not in ESSENTIAL_POLICIES:
        raise ValueError(f"unknown essential policy {essential_policy!r}; expected one of {ESSENTIAL_POLICIES}")
    vals = f.values[f.order]
    dims = f.dims[f.order]
    births = np.asarray(births, dtype=np.int64)
    deaths = np.asarray(deaths, dtype=np.int64)
    essential = np.asarray(essential, dtype=np.int64)
    b = vals[births]
    d = vals[deaths]
    k = dims[births]
    eb = vals[essential]
    ek = dims[essential]
    if essential_policy == "drop":
        ed = np.empty(0)
        eb, ek = eb[:0], ek[:0]
    elif essential_policy == "keep":
        ed = np.full(len(eb), np.inf)
    elif essential_policy == "cap_at_max_value":
        ed = np.full(len(eb), vals.max())
    else:
        ed = np.full(len(eb), float(limits[1]))
    births_all = np.concatenate([b, eb])
    deaths_all = np.concatenate([d, ed])
    degrees_all = np.concatenate([k, ek])
    keep = deaths_all > births_all
    order = np.lexsort((deaths_all[keep], births_all[keep], degrees_all[keep]))
    return PersistenceDiagram(births_all[keep][order], deaths_all[keep][order], degrees_all[keep][order],
                              limits=tuple(limits), essential_policy=essential_policy)


def compute_persistence(f: CubicalFiltration, essential_policy: str = "cap_at_max_value",
                        limits: Tuple[float, float] = (-5.0, 5.0)) -> PersistenceDiagram:
    """Degree-0 and degree-1 persistence of a cubical filtration.

    Zero-length intervals are discarded.  The single essential degree-0 class
    is resolved by ``essential_policy``: ``cap_at_max_value`` (death at the
    patch maximum), ``cap_at_limit`` (death at ``limits[1]``), ``drop``, or
    ``keep`` (death ``inf``).
    """
    ptr, idx = _boundary_in_order(f)
    dims = f.dims[f.order]
    births, deaths, essential = _reduce_twist(dims, ptr, idx)
    return _diagram_from_pairs(f, births, deaths, essential, essential_policy, limits)


def compute_persistence_naive(f: CubicalFiltration, essential_policy: str = "cap_at_max_value",
                              limits: Tuple[float, float] = (-5.0, 5.0)) -> PersistenceDiagram:
    births, deaths, essential = _reduce_naive(f)
    return _diagram_from_pairs(f, births, deaths, essential, essential_policy, limits)


def patch_diagram(values, essential_policy: str = "cap_at_max_value",
                  limits: Tuple[float, float] = (-5.0, 5.0)) -> PersistenceDiagram:
    return compute_persistence(build_filtration(values), essential_policy, limits)


def betti_at(d: PersistenceDiagram, r: float) -> Tuple[int, int]:
    alive = (d.births <= r) & (r < d.deaths)
    return int(np.sum(alive & (d.degrees == 0))), int(np.sum(alive & (d.degrees == 1)))


def oracle_persistence_h0(p) -> List[Tuple[float, float]]:
    """Degree-0 intervals by a union-find sweep over sublevel sets.

    Builds vertex and edge values directly from the pixels (min over incident
    pixels), adds cells level by level and merges components with the elder
    rule.  The surviving component is reported with death ``inf``.  Intended
    for small patches.
    """
    a = np.asarray(p.values if isinstance(p, Patch) else p, dtype=float)
    s = a.shape[0]

    def pix(r, c):
        return a[r, c] if 0 <= r < s and 0 <= c < s else math.inf

    vertices = {}
    for r in range(s + 1):
        for c in range(s + 1):
            vertices[(r, c)] = min(pix(r - 1, c - 1), pix(r - 1, c), pix(r, c - 1), pix(r, c))
    edges = []
    for r in range(s + 1):
        for c in range(s):
            edges.append((min(pix(r - 1, c), pix(r, c)), (r, c), (r, c + 1)))
    for r in range(s):
        for c in range(s + 1):
            edges.append((min(pix(r, c - 1), pix(r, c)), (r, c), (r + 1, c)))

    parent = {}
    birth = {}

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    out = []
    levels = sorted(set(vertices.values()) | {e[0] for e in edges})
    for level in levels:
        for v, val in vertices.items():
            if val == level:
                parent[v] = v
                birth[v] = val
        for val, u, v in edges:
            if val != level:
                continue
            ru, rv = find(u), find(v)
            if ru == rv:
                continue
            if birth[ru] > birth[rv]:
                ru, rv = rv, ru
            # rv is younger and dies here
            if birth[rv] < level:
                out.append((birth[rv], level))
            parent[rv] = ru
    roots = {find(v) for v in vertices}
    out.extend((birth[r], math.inf) for r in roots)
    return sorted(out)
