"""Feature-dependency graphs and hop-distance receptive-field masks.

Only the zero/nonzero pattern of the adjacency matrix is used for masking.
The diagonal is always part of a receptive field: a node reaches itself at
distance 0 even when ``adjacency[i][i] == 0``.
"""

from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class GraphError(ValueError):
    pass


class NonSquare(GraphError):
    pass


class Asymmetric(GraphError):
    pass


class NegativeEntry(GraphError):
    pass


@dataclass(frozen=True, eq=False)
class Graph:
    f: int
    adjacency: np.ndarray

    def neighbors(self, i: int) -> list[int]:
        """Nodes sharing a nonzero off-diagonal entry with ``i``."""
        row = self.adjacency[i]
        return [j for j in range(self.f) if j != i and row[j] != 0]

    def edge_pattern(self) -> np.ndarray:
        """Boolean off-diagonal nonzero pattern."""
        pattern = self.adjacency != 0
        np.fill_diagonal(pattern, False)
        return pattern


@dataclass(frozen=True, eq=False)
class HopMask:
    k: int
    mask: np.ndarray


# Five-node reference graph: edges 0-1, 0-4, 1-2, 1-3, 3-4, diagonal 2.
EXAMPLE_ADJACENCY = [
    [2, 1, 0, 0, 1],
    [1, 2, 1, 1, 0],
    [0, 1, 2, 0, 0],
    [0, 1, 0, 2, 1],
    [1, 0, 0, 1, 2],
]


def validate_graph(adjacency) -> Graph:
    rows = [list(r) for r in adjacency]
    n = len(rows)
    if n == 0:
        raise NonSquare("adjacency is empty")
    for i, r in enumerate(rows):
        if len(r) != n:
            raise NonSquare(f"row {i} has length {len(r)}, expected {n}")
    a = np.array(rows, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        i, j = np.argwhere(~np.isfinite(a))[0]
        raise GraphError(f"non-finite entry at ({i}, {j})")
    neg = np.argwhere(a < 0)
    if len(neg):
        i, j = neg[0]
        raise NegativeEntry(f"negative entry {a[i, j]} at ({i}, {j})")
    asym = np.argwhere(a != a.T)
    if len(asym):
        i, j = asym[0]
        raise Asymmetric(f"adjacency[{i}][{j}]={a[i, j]} != adjacency[{j}][{i}]={a[j, i]}")
    a.setflags(write=False)
    return Graph(f=n, adjacency=a)


def example_graph() -> Graph:
    return validate_graph(EXAMPLE_ADJACENCY)


def bfs_distance(g: Graph, source: int) -> np.ndarray:
    """Unweighted hop counts from ``source``; unreachable nodes get ``inf``."""
    if not 0 <= source < g.f:
        raise IndexError(f"source {source} out of range for {g.f} nodes")
    dist = np.full(g.f, np.inf)
    dist[source] = 0
    queue = deque([source])
    while queue:
        u = queue.popleft()
        for v in g.neighbors(u):
            if dist[v] == np.inf:
                dist[v] = dist[u] + 1
                queue.append(v)
    return dist


def hop_mask(g: Graph, k: int) -> HopMask:
    """Nodes within ``k`` hops of each other, diagonal included."""
    if k < 0:
        raise ValueError(f"hop distance must be >= 0, got {k}")
    step = g.edge_pattern() | np.eye(g.f, dtype=bool)
    reach = np.eye(g.f, dtype=bool)
    for _ in range(min(k, g.f)):
        nxt = (reach.astype(np.int64) @ step.astype(np.int64)) > 0
        if np.array_equal(nxt, reach):
            break
        reach = nxt
    reach.setflags(write=False)
    return HopMask(k=k, mask=reach)


def lattice_graph(rows: int, cols: int, neighborhood: str = "eight") -> Graph:
    """Image-grid graph with node index ``r * cols + c`` and self-loops."""
    if rows < 1 or cols < 1:
        raise ValueError("lattice needs rows, cols >= 1")
    if neighborhood == "four":
        offsets = [(-1, 0), (1, 0), (0, -1), (0, 1)]
    elif neighborhood == "eight":
        offsets = [(dr, dc) for dr in (-1, 0, 1) for dc in (-1, 0, 1) if (dr, dc) != (0, 0)]
    else:
        raise ValueError(f"neighborhood must be 'four' or 'eight', got {neighborhood!r}")
    f = rows * cols
    a = np.eye(f)
    for r in range(rows):
        for c in range(cols):
            for dr, dc in offsets:
                rr, cc = r + dr, c + dc
                if 0 <= rr < rows and 0 <= cc < cols:
                    a[r * cols + c, rr * cols + cc] = 1.0
    return validate_graph(a)


def complete_graph(f: int) -> Graph:
    return validate_graph(np.ones((f, f)))


def identity_graph(f: int) -> Graph:
    return validate_graph(np.eye(f))


def is_connected(g: Graph) -> bool:
    return bool(np.all(np.isfinite(bfs_distance(g, 0))))


def load_adjacency_csv(path) -> Graph:
    rows = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh)):
            if not row or all(not cell.strip() for cell in row):
                continue
            try:
                rows.append([float(cell) for cell in row])
            except ValueError as exc:
                raise GraphError(f"{path}: row {lineno}: {exc}") from None
    return validate_graph(rows)


def save_adjacency_csv(g: Graph, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in g.adjacency:
            w.writerow([repr(float(v)) for v in row])


def save_mask_csv(m: HopMask, path) -> None:
    Path(path).write_text("".join(",".join(str(int(v)) for v in row) + "\n" for row in m.mask))
