"""Distance-geometric graph construction.

Atom pairs are classified by their shortest-path length in the bond graph:
1 (bonded), 2 (angle end points) and 3 (dihedral end points). Every kept pair
becomes two directed edges carrying the Euclidean distance and a cosine-encoded
feature; each node additionally gets a self-loop.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .molio import Molecule

SELF = 0  # order tag stored for self-loop edges


@dataclass(frozen=True)
class DGConfig:
    max_order: int = 3
    d_cutoff: float = 10.0
    include_order_onehot: bool = True

    def __post_init__(self):
        if self.max_order not in (1, 2, 3):
            raise ValueError(f"max_order must be 1, 2 or 3, got {self.max_order}")
        if not (isinstance(self.d_cutoff, (int, float)) and self.d_cutoff > 0):
            raise ValueError(f"d_cutoff must be positive, got {self.d_cutoff}")

    @property
    def edge_dim(self) -> int:
        return 4 if self.include_order_onehot else 1

    def to_dict(self) -> dict:
        return {
            "max_order": self.max_order,
            "d_cutoff": float(self.d_cutoff),
            "include_order_onehot": self.include_order_onehot,
        }


@dataclass(frozen=True)
class DGEdge:
    src: int
    dst: int
    order: int  # 0 marks a self-loop
    distance: float
    feature: tuple[float, ...]

    def to_record(self) -> dict:
        return {
            "src": self.src,
            "dst": self.dst,
            "order": "self" if self.order == SELF else self.order,
            "distance": self.distance,
            "feature": list(self.feature),
        }


def expand_neighbors(
    bonds: Iterable[Sequence[int]], n_atoms: int, max_order: int
) -> dict[tuple[int, int], int]:
    """Map each unordered pair ``(i, j)``, ``i < j``, to its bond-graph distance.

    Breadth-first search from every atom, truncated at ``max_order``; pairs
    further apart (or in different components) are absent.
    """
    if max_order not in (1, 2, 3):
        raise ValueError(f"max_order must be 1, 2 or 3, got {max_order}")
    adj: list[list[int]] = [[] for _ in range(n_atoms)]
    for b in bonds:
        i, j = int(b[0]), int(b[1])
        adj[i].append(j)
        adj[j].append(i)
    pairs: dict[tuple[int, int], int] = {}
    for root in range(n_atoms):
        depth = {root: 0}
        queue = deque([root])
        while queue:
            u = queue.popleft()
            if depth[u] == max_order:
                continue
            for v in adj[u]:
                if v not in depth:
                    depth[v] = depth[u] + 1
                    queue.append(v)
        for v, k in depth.items():
            if v > root:
                pairs[(root, v)] = k
    return pairs


def encode_distance(d, d_cutoff: float):
    """Cosine distance encoding: 1 at ``d = 0`` falling to 0 at ``d >= d_cutoff``.

    Accepts a float or an array of distances.
    """
    if d_cutoff <= 0:
        raise ValueError(f"d_cutoff must be positive, got {d_cutoff}")
    arr = np.asarray(d, dtype=np.float64)
    if np.any(arr < 0) or np.any(np.isnan(arr)):
        raise ValueError("distance must be non-negative")
    out = 0.5 * (np.cos(np.pi * np.minimum(arr, d_cutoff) / d_cutoff) + 1.0)
    # cos(pi) is -1 exactly, but keep the cutoff endpoint exact regardless
    out = np.where(arr >= d_cutoff, 0.0, out)
    return float(out) if np.ndim(d) == 0 else out


def _edge_features(order: np.ndarray, distance: np.ndarray, cfg: DGConfig) -> np.ndarray:
    enc = encode_distance(distance, cfg.d_cutoff).reshape(-1, 1)
    if not cfg.include_order_onehot:
        return enc
    onehot = np.zeros((order.size, 3))
    bonded = order > 0
    onehot[np.flatnonzero(bonded), order[bonded] - 1] = 1.0
    return np.concatenate([enc, onehot], axis=1)


@dataclass(frozen=True, eq=False)
class DGGraph:
    """Node features plus directed edges sorted by ``(src, dst)``.

    Edge attributes are stored as parallel arrays; :attr:`edges` gives the
    record view.
    """

    node_features: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    order: np.ndarray
    distance: np.ndarray
    edge_features: np.ndarray
    config: DGConfig

    @property
    def n_nodes(self) -> int:
        return self.node_features.shape[0]

    @property
    def n_edges(self) -> int:
        return self.src.size

    @property
    def edges(self) -> list[DGEdge]:
        return [
            DGEdge(int(s), int(t), int(o), float(d), tuple(float(v) for v in f))
            for s, t, o, d, f in zip(self.src, self.dst, self.order, self.distance, self.edge_features)
        ]

    def pair_counts(self) -> dict[int, int]:
        """Number of unordered pairs per neighbor order."""
        return {k: int(np.sum(self.order == k)) // 2 for k in (1, 2, 3)}

    def restrict(self, max_order: int) -> "DGGraph":
        """Drop edges above ``max_order``; equal to rebuilding with that order."""
        keep = self.order <= max_order
        cfg = DGConfig(max_order, self.config.d_cutoff, self.config.include_order_onehot)
        return DGGraph(
            self.node_features, self.src[keep], self.dst[keep], self.order[keep],
            self.distance[keep], self.edge_features[keep], cfg,
        )


def build_dg_graph(m: Molecule, features: np.ndarray, cfg: DGConfig) -> DGGraph:
    features = np.asarray(features, dtype=np.float64)
    n = m.n_atoms
    if features.shape[0] != n:
        raise ValueError(f"feature rows {features.shape[0]} != atom count {n}")
    pos = m.positions
    pairs = expand_neighbors(m.bonds, n, cfg.max_order)
    rows = [(i, i, SELF) for i in range(n)]
    for (i, j), k in pairs.items():
        rows.append((i, j, k))
        rows.append((j, i, k))
    rows.sort()
    arr = np.array(rows, dtype=np.int64).reshape(-1, 3)
    src, dst, order = arr[:, 0], arr[:, 1], arr[:, 2]
    # row-wise norm of the difference, identical for (i, j) and (j, i)
    lo, hi = np.minimum(src, dst), np.maximum(src, dst)
    diff = pos[hi] - pos[lo]
    distance = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    feats = _edge_features(order, distance, cfg)
    return DGGraph(features, src, dst, order, distance, feats, cfg)


def pair_distance_sum(m: Molecule, max_order: int = 3, d_cutoff: float = 10.0) -> float:
    """Sum of encoded distances over all pairs within ``max_order`` bonds."""
    pos = m.positions
    total = 0.0
    for (i, j) in sorted(expand_neighbors(m.bonds, m.n_atoms, max_order)):
        total += encode_distance(math.dist(pos[i], pos[j]), d_cutoff)
    return total
