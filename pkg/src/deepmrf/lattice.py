"""4-connected pixel grid, zigzag traversal and its acyclic two-way split."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class GridSpec:
    height: int
    width: int

    def __post_init__(self):
        if int(self.height) < 1 or int(self.width) < 1:
            raise ValueError(f"grid must be at least 1x1, got {self.height}x{self.width}")

    @property
    def n_nodes(self) -> int:
        return self.height * self.width

    def node(self, row: int, col: int) -> int:
        return row * self.width + col

    def coords(self, u: int) -> tuple[int, int]:
        return divmod(u, self.width)


def neighbors4(spec: GridSpec, u: int) -> set[int]:
    if not 0 <= u < spec.n_nodes:
        raise IndexError(f"node {u} out of range for {spec.height}x{spec.width} grid")
    r, c = spec.coords(u)
    out = set()
    if r > 0:
        out.add(u - spec.width)
    if r < spec.height - 1:
        out.add(u + spec.width)
    if c > 0:
        out.add(u - 1)
    if c < spec.width - 1:
        out.add(u + 1)
    return out


def build_zigzag_order(spec: GridSpec) -> list[int]:
    """Row-serpentine order: even rows left to right, odd rows right to left."""
    order = []
    for r in range(spec.height):
        cols = range(spec.width) if r % 2 == 0 else range(spec.width - 1, -1, -1)
        order.extend(r * spec.width + c for c in cols)
    return order


@dataclass(frozen=True)
class ZigzagDecomposition:
    """Visit order plus, per node, the neighbours that precede it
    (``forward_parents``) and follow it (``backward_parents``) in that order.

    ``neighbor_table`` is an ``(n_nodes, 4)`` int array of full
    neighbourhoods padded with -1; ``fresh_mask[u, j]`` marks entries that are
    forward parents of ``u``.
    """

    spec: GridSpec
    order: tuple[int, ...]
    forward_parents: tuple[tuple[int, ...], ...]
    backward_parents: tuple[tuple[int, ...], ...]
    neighbor_table: np.ndarray = field(repr=False, compare=False)
    fresh_mask: np.ndarray = field(repr=False, compare=False)

    @property
    def position(self) -> np.ndarray:
        pos = np.empty(len(self.order), dtype=np.int64)
        pos[np.asarray(self.order)] = np.arange(len(self.order))
        return pos


def decompose(spec: GridSpec, order) -> ZigzagDecomposition:
    n = spec.n_nodes
    order = [int(u) for u in order]
    if len(order) != n or sorted(order) != list(range(n)):
        raise ValueError("order must be a permutation of the grid's node ids")
    pos = [0] * n
    for i, u in enumerate(order):
        pos[u] = i
    fwd, bwd = [], []
    table = np.full((n, 4), -1, dtype=np.int64)
    for u in range(n):
        nb = sorted(neighbors4(spec, u))
        fwd.append(tuple(v for v in nb if pos[v] < pos[u]))
        bwd.append(tuple(v for v in nb if pos[v] > pos[u]))
        table[u, : len(nb)] = nb
    pos_arr = np.asarray(pos)
    fresh = (table >= 0) & (pos_arr[np.where(table >= 0, table, 0)] < pos_arr[:, None])
    table.setflags(write=False)
    fresh.setflags(write=False)
    return ZigzagDecomposition(spec, tuple(order), tuple(fwd), tuple(bwd), table, fresh)


def zigzag(height: int, width: int) -> ZigzagDecomposition:
    spec = GridSpec(height, width)
    return decompose(spec, build_zigzag_order(spec))


def neighbor_table(spec: GridSpec) -> np.ndarray:
    return decompose(spec, range(spec.n_nodes)).neighbor_table


def check_decomposition(dec: ZigzagDecomposition) -> dict[str, bool]:
    """Evaluate every structural invariant; returns name -> holds."""
    spec = dec.spec
    n = spec.n_nodes
    order = list(dec.order)
    res = {"permutation": sorted(order) == list(range(n))}
    res["continuity"] = all(
        order[i + 1] in neighbors4(spec, order[i]) for i in range(len(order) - 1)
    )
    ok = True
    for u in range(n):
        f, b = set(dec.forward_parents[u]), set(dec.backward_parents[u])
        if f & b or (f | b) != neighbors4(spec, u):
            ok = False
            break
    res["disjoint_union"] = ok
    res["forward_acyclic"] = _is_acyclic(n, dec.forward_parents)
    res["backward_acyclic"] = _is_acyclic(n, dec.backward_parents)

    edges = {frozenset((u, v)) for u in range(n) for v in neighbors4(spec, u)}
    f_edges = [(v, u) for u in range(n) for v in dec.forward_parents[u]]
    b_edges = [(v, u) for u in range(n) for v in dec.backward_parents[u]]
    res["edge_bijection"] = (
        len(f_edges) == len(edges) == len(b_edges)
        and {frozenset(e) for e in f_edges} == edges
        and {(v, u) for (u, v) in f_edges} == set(b_edges)
    )
    pos = {u: i for i, u in enumerate(order)}
    res["topological_order"] = all(pos[v] < pos[u] for v, u in f_edges) and all(
        pos[v] > pos[u] for v, u in b_edges
    )
    return res


def _is_acyclic(n: int, parents) -> bool:
    # Kahn's algorithm over parent lists
    indeg = [len(p) for p in parents]
    children = [[] for _ in range(n)]
    for u, ps in enumerate(parents):
        for v in ps:
            children[v].append(u)
    stack = [u for u in range(n) if indeg[u] == 0]
    seen = 0
    while stack:
        v = stack.pop()
        seen += 1
        for u in children[v]:
            indeg[u] -= 1
            if indeg[u] == 0:
                stack.append(u)
    return seen == n
