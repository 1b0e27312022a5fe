"""Ensemble graph, GNSS attachments and the interconnection matrices built
from them.

Indices are 0-based in the Python API.  Edge-state rows follow one
canonical order everywhere: node ``i = 0..n-1``, and within node ``i`` its
neighbours in ascending order.  Row ``(i, j)`` is the deviation of clock
``j`` seen from clock ``i`` (``x_j - x_i``).
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import BadIndex, Disconnected, TooManyReceivers
from .numerics import pinv


def laplacian(adjacency) -> np.ndarray:
    adj = np.asarray(adjacency, dtype=float)
    return np.diag(adj.sum(axis=1)) - adj


@dataclass(frozen=True, eq=False)
class Topology:
    n: int
    g: int
    edges: tuple
    attachments: tuple  # (gac, mac) pairs sorted by gac
    adjacency: np.ndarray
    degree: np.ndarray
    laplacian: np.ndarray
    neighbors: tuple  # neighbors[i] = sorted tuple of j
    slots: tuple  # canonical (i, j) order of V rows
    V_blocks: tuple  # per-node V_i
    V: np.ndarray
    V_G: np.ndarray
    q: np.ndarray
    q_G: np.ndarray
    q_A: np.ndarray
    Pi: np.ndarray
    V_pinv: np.ndarray
    reverse: np.ndarray  # reverse[k] = slot index of (j, i) for slot k = (i, j)
    fiedler: float
    node_slices: tuple = field(default=())

    @property
    def num_slots(self) -> int:
        """|E| in the ensemble's directed-edge count (rows of V)."""
        return len(self.slots)

    @property
    def attached_mac(self) -> np.ndarray:
        return np.array([m for _, m in self.attachments], dtype=int)


def build_topology(n, g, edges, attachments) -> Topology:
    """Build and check a topology.

    Args:
        n: number of ensemble clocks (MACs), at least 2.
        g: number of GNSS receiver clocks (GACs), ``g < n``.
        edges: undirected MAC pairs ``(i, j)``.
        attachments: ``(gac, mac)`` pairs, one per GAC.

    Raises:
        BadIndex: an index is out of range, a self loop, or a GAC is attached
            twice / a MAC hosts two GACs.
        TooManyReceivers: ``g >= n``.
        Disconnected: the ensemble graph is not connected.
    """
    n, g = int(n), int(g)
    if n < 2:
        raise BadIndex(f"need at least 2 ensemble clocks, got {n}")
    if g >= n:
        raise TooManyReceivers(f"g={g} receivers for n={n} clocks; need g < n")
    if g < 0:
        raise BadIndex("negative receiver count")

    adj = np.zeros((n, n))
    clean_edges = set()
    for e in edges:
        i, j = (int(x) for x in e)
        if not (0 <= i < n and 0 <= j < n) or i == j:
            raise BadIndex(f"bad edge {e!r} for n={n}")
        adj[i, j] = adj[j, i] = 1.0
        clean_edges.add((min(i, j), max(i, j)))

    att = sorted((int(a), int(m)) for a, m in attachments)
    if [a for a, _ in att] != list(range(g)):
        raise BadIndex(f"attachments must name each GAC 0..{g - 1} exactly once, got {attachments!r}")
    macs = [m for _, m in att]
    if any(not 0 <= m < n for m in macs) or len(set(macs)) != len(macs):
        raise BadIndex(f"attachments must use distinct MACs in 0..{n - 1}, got {attachments!r}")

    lap = laplacian(adj)
    eig = np.linalg.eigvalsh(lap)
    fiedler = float(eig[1])
    if fiedler <= 1e-9:
        raise Disconnected(f"ensemble graph is not connected (Fiedler value {fiedler:.3g})")

    eye_n = np.eye(n)
    neighbors = tuple(tuple(int(j) for j in np.flatnonzero(adj[i])) for i in range(n))
    slots, blocks, node_slices = [], [], []
    for i in range(n):
        start = len(slots)
        rows = [eye_n[j] - eye_n[i] for j in neighbors[i]]
        blocks.append(np.array(rows))
        slots.extend((i, j) for j in neighbors[i])
        node_slices.append(slice(start, len(slots)))
    V = np.vstack(blocks)
    index = {s: k for k, s in enumerate(slots)}
    reverse = np.array([index[(j, i)] for i, j in slots], dtype=int)

    V_G = np.zeros((g, n + g))
    for a, m in att:
        V_G[a, m] = -1.0
        V_G[a, n + a] = 1.0
    q_A = np.zeros(n)
    q_A[macs] = 1.0
    q = np.full(n, 1.0 / n)
    q_G = np.full(g, 1.0 / g) if g else np.zeros(0)

    return Topology(
        n=n, g=g,
        edges=tuple(sorted(clean_edges)),
        attachments=tuple(att),
        adjacency=adj,
        degree=np.diag(adj.sum(axis=1)),
        laplacian=lap,
        neighbors=neighbors,
        slots=tuple(slots),
        V_blocks=tuple(blocks),
        V=V,
        V_G=V_G,
        q=q,
        q_G=q_G,
        q_A=q_A,
        Pi=np.eye(n) - np.outer(np.ones(n), q),
        V_pinv=pinv(V),
        reverse=reverse,
        fiedler=fiedler,
        node_slices=tuple(node_slices),
    )


def example_topology() -> Topology:
    """Three clocks on the path 1-2-3, GAC 1 at clock 1 and GAC 2 at clock 3."""
    return build_topology(3, 2, [(0, 1), (1, 2)], [(0, 0), (1, 2)])
