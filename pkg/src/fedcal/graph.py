"""Graph data model, client partitioning, synthetic generation, file I/O.

A Graph is an undirected, unweighted node-attributed graph with optional
train/val/test masks. Instances are treated as immutable after
construction; all operations return new Graph values.

File formats (plain text, `#` starts a comment line):
  edges     one ``u v`` pair per line, 0-based node ids
  features  one row per node, whitespace-separated decimals
  labels    one integer per node, -1 meaning unlabeled
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

__all__ = [
    "Graph",
    "PartitionSpec",
    "HopAggregator",
    "induced_subgraph",
    "partition_nonoverlapping",
    "partition_overlapping",
    "generate_sbm",
    "load_graph",
    "save_graph_files",
    "split_masks",
    "k_hop_sets",
    "edge_homophily",
]


@dataclass
class Graph:
    """One (sub)graph: features, labels, neighbor lists and split masks.

    ``node_ids`` keeps the identity of each node in the graph it was
    induced from (arange(n) for a root graph), so overlapping clients can
    be compared and embeddings exported under stable ids.
    """

    features: np.ndarray                 # (n, d0) float64
    labels: np.ndarray                   # (n,) int64, -1 = unlabeled
    neighbors: tuple                     # per-node sorted unique int64 arrays
    train_mask: np.ndarray               # (n,) bool
    val_mask: np.ndarray                 # (n,) bool
    test_mask: np.ndarray                # (n,) bool
    node_ids: np.ndarray = field(default=None)  # (n,) int64

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = self.features.shape[0]
        if self.node_ids is None:
            self.node_ids = np.arange(n, dtype=np.int64)
        for name in ("train_mask", "val_mask", "test_mask"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=bool))
        self.validate()

    @property
    def num_nodes(self) -> int:
        return self.features.shape[0]

    @property
    def feat_dim(self) -> int:
        return self.features.shape[1]

    @property
    def num_edges(self) -> int:
        return sum(len(nb) for nb in self.neighbors) // 2

    def validate(self):
        n = self.num_nodes
        if self.labels.shape != (n,):
            raise ValueError("labels length must equal node count")
        if len(self.neighbors) != n:
            raise ValueError("neighbor list length must equal node count")
        for name in ("train_mask", "val_mask", "test_mask"):
            if getattr(self, name).shape != (n,):
                raise ValueError(f"{name} length must equal node count")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features contain non-finite entries")
        overlap = (
            (self.train_mask & self.val_mask)
            | (self.train_mask & self.test_mask)
            | (self.val_mask & self.test_mask)
        )
        if overlap.any():
            raise ValueError("train/val/test masks must be pairwise disjoint")
        if np.any(self.labels[self.train_mask] < 0):
            raise ValueError("every train-mask node must carry a label")
        for v, nb in enumerate(self.neighbors):
            if np.any(nb == v):
                raise ValueError(f"self-loop at node {v}")
            for u in nb:
                if v not in self.neighbors[u]:
                    raise ValueError(f"asymmetric edge {v}->{u}")

    @classmethod
    def from_edges(cls, features, labels, edges, train_mask=None,
                   val_mask=None, test_mask=None, node_ids=None) -> "Graph":
        """Build a Graph from an iterable of (u, v) pairs.

        Edges are symmetrized and deduplicated; self-loops are dropped.
        """
        features = np.asarray(features, dtype=np.float64)
        n = features.shape[0]
        adj = [set() for _ in range(n)]
        for u, v in edges:
            u, v = int(u), int(v)
            if not (0 <= u < n and 0 <= v < n):
                raise ValueError(f"edge ({u}, {v}) out of range for n={n}")
            if u == v:
                continue
            adj[u].add(v)
            adj[v].add(u)
        neighbors = tuple(np.array(sorted(s), dtype=np.int64) for s in adj)
        zeros = np.zeros(n, dtype=bool)
        return cls(
            features=features,
            labels=np.asarray(labels, dtype=np.int64),
            neighbors=neighbors,
            train_mask=zeros.copy() if train_mask is None else train_mask,
            val_mask=zeros.copy() if val_mask is None else val_mask,
            test_mask=zeros.copy() if test_mask is None else test_mask,
            node_ids=node_ids,
        )


@dataclass(frozen=True)
class PartitionSpec:
    """How to carve a root graph into client subgraphs."""

    num_clients: int
    mode: str = "non-overlapping"        # or "overlapping"
    seed: int = 0

    def __post_init__(self):
        if self.num_clients < 2:
            raise ValueError("num_clients must be >= 2")
        if self.mode not in ("non-overlapping", "overlapping"):
            raise ValueError(f"unknown partition mode {self.mode!r}")
        if self.mode == "overlapping" and self.num_clients % 5 != 0:
            raise ValueError("overlapping mode requires num_clients to be a multiple of 5")


def induced_subgraph(g: Graph, nodes) -> Graph:
    """Subgraph on the given node list (original-order ids, deduplicated)."""
    nodes = np.array(sorted(set(int(v) for v in nodes)), dtype=np.int64)
    remap = {int(v): i for i, v in enumerate(nodes)}
    neighbors = []
    for v in nodes:
        kept = [remap[int(u)] for u in g.neighbors[v] if int(u) in remap]
        neighbors.append(np.array(sorted(kept), dtype=np.int64))
    return Graph(
        features=g.features[nodes].copy(),
        labels=g.labels[nodes].copy(),
        neighbors=tuple(neighbors),
        train_mask=g.train_mask[nodes].copy(),
        val_mask=g.val_mask[nodes].copy(),
        test_mask=g.test_mask[nodes].copy(),
        node_ids=g.node_ids[nodes].copy(),
    )


def _multi_source_hop_distances(g: Graph, sources) -> np.ndarray:
    dist = np.full(g.num_nodes, np.iinfo(np.int64).max, dtype=np.int64)
    queue = deque()
    for s in sources:
        dist[s] = 0
        queue.append(int(s))
    while queue:
        v = queue.popleft()
        for u in g.neighbors[v]:
            if dist[u] > dist[v] + 1:
                dist[u] = dist[v] + 1
                queue.append(int(u))
    return dist


def _farthest_point_seeds(g: Graph, m: int, rng: np.random.Generator) -> list:
    """m seed nodes: one random, the rest maximizing hop distance to chosen seeds."""
    seeds = [int(rng.integers(g.num_nodes))]
    while len(seeds) < m:
        dist = _multi_source_hop_distances(g, seeds)
        seeds.append(int(np.argmax(dist)))
    return seeds


def partition_nonoverlapping(g: Graph, spec: PartitionSpec):
    """Disjoint, covering, size-balanced client subgraphs.

    Seeded greedy BFS region growing: farthest-point seeds, fronts grown
    smallest-part-first (so sizes stay within one node of each other),
    then a single boundary-refinement pass that moves a node to the
    neighboring part holding more of its neighbors whenever the move
    keeps sizes within the +-20% balance band.
    """
    m = spec.num_clients
    n = g.num_nodes
    if m > n:
        raise ValueError(f"cannot split {n} nodes into {m} parts")
    rng = np.random.default_rng(spec.seed)
    seeds = _farthest_point_seeds(g, m, rng)

    owner = np.full(n, -1, dtype=np.int64)
    sizes = np.zeros(m, dtype=np.int64)
    frontiers = [deque() for _ in range(m)]
    for p, s in enumerate(seeds):
        owner[s] = p
        sizes[p] = 1
        frontiers[p].extend(int(u) for u in g.neighbors[s])
    scan = 0                                     # pointer for teleport fallback
    remaining = n - m
    while remaining > 0:
        p = int(np.argmin(sizes))                # argmin breaks ties by lowest index
        v = -1
        while frontiers[p]:
            cand = frontiers[p].popleft()
            if owner[cand] < 0:
                v = cand
                break
        if v < 0:                                # disconnected or exhausted front
            while owner[scan] >= 0:
                scan += 1
            v = scan
        owner[v] = p
        sizes[p] += 1
        remaining -= 1
        frontiers[p].extend(int(u) for u in g.neighbors[v] if owner[u] < 0)

    # balance band: +-20% of the ideal size, widened just enough to keep
    # the perfectly balanced sizes floor(n/m)/ceil(n/m) always feasible
    target = n / m
    lo = min(int(np.ceil(0.8 * target)), n // m)
    hi = max(int(np.floor(1.2 * target)), -(-n // m))
    for v in range(n):
        nb = g.neighbors[v]
        if len(nb) == 0:
            continue
        cur = int(owner[v])
        counts = np.bincount(owner[nb], minlength=m)
        best = int(np.argmax(counts))
        if best != cur and counts[best] > counts[cur]:
            if sizes[cur] - 1 >= lo and sizes[best] + 1 <= hi:
                owner[v] = best
                sizes[cur] -= 1
                sizes[best] += 1

    return [induced_subgraph(g, np.nonzero(owner == p)[0]) for p in range(m)]


def partition_overlapping(g: Graph, spec: PartitionSpec):
    """Client subgraphs with deliberately shared nodes.

    The root graph is first split into num_clients/5 temporary disjoint
    subgraphs; from each, five independent seeded samples of half the
    nodes (rounded up) are drawn with their induced edges, giving exactly
    num_clients client graphs. Masks are inherited from the root split.
    """
    m = spec.num_clients
    if m % 5 != 0:
        raise ValueError("overlapping mode requires num_clients to be a multiple of 5")
    n_temp = m // 5
    if n_temp > g.num_nodes:
        raise ValueError("more temporary parts than nodes")
    if n_temp >= 2:
        temps = partition_nonoverlapping(
            g, PartitionSpec(n_temp, "non-overlapping", spec.seed)
        )
    else:
        temps = [g]
    clients = []
    for ti, tg in enumerate(temps):
        half = -(-tg.num_nodes // 2)             # ceil(n/2)
        for s in range(5):
            rng = np.random.default_rng([spec.seed, ti, s])
            nodes = rng.choice(tg.num_nodes, size=half, replace=False)
            clients.append(induced_subgraph(tg, nodes))
    return clients


def generate_sbm(n: int, num_classes: int, p_in: float, p_out: float,
                 feat_dim: int, feat_sep: float, seed) -> Graph:
    """Seeded stochastic block model with class-separated Gaussian features.

    Classes are assigned round-robin (balanced); each unordered node pair
    gets an edge independently with probability p_in (same class) or
    p_out (different class). Features are a seeded unit class-mean vector
    scaled by feat_sep plus standard-normal noise. p_in > p_out yields a
    homophilic graph, p_in < p_out a heterophilic one.
    """
    if not (0.0 <= p_in <= 1.0 and 0.0 <= p_out <= 1.0):
        raise ValueError("edge probabilities must lie in [0, 1]")
    if feat_sep < 0:
        raise ValueError("feat_sep must be >= 0")
    if n < 1 or num_classes < 1 or feat_dim < 1:
        raise ValueError("n, num_classes and feat_dim must be >= 1")
    rng = np.random.default_rng(seed)
    labels = np.arange(n, dtype=np.int64) % num_classes

    iu, ju = np.triu_indices(n, k=1)
    prob = np.where(labels[iu] == labels[ju], p_in, p_out)
    keep = rng.random(iu.size) < prob
    edges = zip(iu[keep].tolist(), ju[keep].tolist())

    means = rng.standard_normal((num_classes, feat_dim))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    features = feat_sep * means[labels] + rng.standard_normal((n, feat_dim))
    return Graph.from_edges(features, labels, edges)


def edge_homophily(g: Graph) -> float:
    """Fraction of edges joining same-class nodes (labeled endpoints only)."""
    same = total = 0
    for v, nb in enumerate(g.neighbors):
        for u in nb:
            if u <= v or g.labels[u] < 0 or g.labels[v] < 0:
                continue
            total += 1
            same += int(g.labels[u] == g.labels[v])
    return same / total if total else 0.0


def _parse_error(path, lineno, msg):
    return ValueError(f"{path}:{lineno}: {msg}")


def _data_lines(path):
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            yield lineno, line


def load_graph(edges_path, features_path, labels_path, num_classes=None) -> Graph:
    """Read a graph from the three text files (see module docstring)."""
    features = []
    width = None
    for lineno, line in _data_lines(features_path):
        parts = line.split()
        try:
            row = [float(x) for x in parts]
        except ValueError:
            raise _parse_error(features_path, lineno, f"bad feature value in {line!r}")
        if width is None:
            width = len(row)
        elif len(row) != width:
            raise _parse_error(
                features_path, lineno, f"expected {width} values, got {len(row)}"
            )
        features.append(row)
    if not features:
        raise ValueError(f"{features_path}: no feature rows")
    features = np.asarray(features, dtype=np.float64)
    n = features.shape[0]

    labels = []
    for lineno, line in _data_lines(labels_path):
        parts = line.split()
        if len(parts) != 1:
            raise _parse_error(labels_path, lineno, "expected one integer per line")
        try:
            lab = int(parts[0])
        except ValueError:
            raise _parse_error(labels_path, lineno, f"bad label {parts[0]!r}")
        if lab < -1:
            raise _parse_error(labels_path, lineno, f"label {lab} out of range")
        if num_classes is not None and lab >= num_classes:
            raise ValueError(
                f"{labels_path}:{lineno}: label {lab} >= num_classes {num_classes}"
            )
        labels.append(lab)
    if len(labels) != n:
        raise ValueError(
            f"{labels_path}: {len(labels)} labels for {n} feature rows"
        )

    edges = []
    for lineno, line in _data_lines(edges_path):
        parts = line.split()
        if len(parts) != 2:
            raise _parse_error(edges_path, lineno, f"expected 'u v', got {line!r}")
        try:
            u, v = int(parts[0]), int(parts[1])
        except ValueError:
            raise _parse_error(edges_path, lineno, f"bad node id in {line!r}")
        if not (0 <= u < n and 0 <= v < n):
            raise _parse_error(edges_path, lineno, f"edge ({u}, {v}) out of range")
        edges.append((u, v))

    return Graph.from_edges(features, labels, edges)


def save_graph_files(g: Graph, edges_path, features_path, labels_path):
    """Write a graph in the text format load_graph reads."""
    with open(edges_path, "w", encoding="utf-8") as fh:
        for v, nb in enumerate(g.neighbors):
            for u in nb:
                if v < u:
                    fh.write(f"{v} {u}\n")
    with open(features_path, "w", encoding="utf-8") as fh:
        for row in g.features:
            fh.write(" ".join(repr(float(x)) for x in row) + "\n")
    with open(labels_path, "w", encoding="utf-8") as fh:
        for lab in g.labels:
            fh.write(f"{int(lab)}\n")


def split_masks(g: Graph, ratios=(0.2, 0.4, 0.4), seed=0) -> Graph:
    """Stratified train/val/test masks over the labeled nodes.

    Per class, nodes are shuffled with the seeded generator and seat
    counts follow largest-remainder rounding of ratios * class size (an
    implicit leftover bucket absorbs 1 - sum(ratios)).
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise ValueError("ratios must be three non-negative numbers")
    if sum(ratios) > 1.0 + 1e-12:
        raise ValueError("ratios must sum to at most 1")
    rng = np.random.default_rng(seed)
    n = g.num_nodes
    masks = [np.zeros(n, dtype=bool) for _ in range(3)]
    quotas4 = np.array(list(ratios) + [max(0.0, 1.0 - sum(ratios))])
    labeled = np.nonzero(g.labels >= 0)[0]
    for c in np.unique(g.labels[labeled]):
        idx = labeled[g.labels[labeled] == c]
        idx = rng.permutation(idx)
        share = quotas4 * len(idx)
        base = np.floor(share).astype(int)
        order = np.argsort(-(share - base), kind="stable")
        for k in range(len(idx) - base.sum()):
            base[order[k]] += 1
        pos = 0
        for bucket in range(3):
            masks[bucket][idx[pos:pos + base[bucket]]] = True
            pos += base[bucket]
    return replace(
        g, train_mask=masks[0], val_mask=masks[1], test_mask=masks[2]
    )


class HopAggregator:
    """Sparse ring-mean operators for one graph, built once and reused.

    hop1 rows average the 1-hop neighbor values (the node's own row if it
    has no neighbors); hop2 rows average the 1-hop and exact-2-hop ring
    means, the 2-hop mean falling back to the 1-hop aggregate when that
    ring is empty. Both operators are constants of the graph, so
    gradients flow through them as fixed linear maps.
    """

    def __init__(self, g: Graph):
        n = g.num_nodes
        a1 = sp.lil_matrix((n, n))
        a2 = sp.lil_matrix((n, n))
        for v in range(n):
            one = g.neighbors[v]
            if len(one):
                a1[v, one] = 1.0 / len(one)
            else:
                a1[v, v] = 1.0
            two = k_hop_sets(g, v, 2)
            if len(two):
                a2[v, two] = 1.0 / len(two)
            else:
                a2[v] = a1[v]
        self.m1 = a1.tocsr()
        self.m2 = (0.5 * (a1 + a2)).tocsr()
        self.m1t = self.m1.T.tocsr()
        self.m2t = self.m2.T.tocsr()

    def rings(self, values: np.ndarray):
        """(hop1, hop2) ring means of per-node row vectors."""
        return self.m1 @ values, self.m2 @ values

    def backward(self, g_hop1: np.ndarray, g_hop2: np.ndarray) -> np.ndarray:
        """Pull ring-mean gradients back onto the per-node rows."""
        return self.m1t @ g_hop1 + self.m2t @ g_hop2


def k_hop_sets(g: Graph, v: int, k: int) -> np.ndarray:
    """Nodes at shortest-path distance exactly k from v, for k in {1, 2}."""
    if not (0 <= v < g.num_nodes):
        raise ValueError(f"node {v} out of range")
    if k == 1:
        return g.neighbors[v].copy()
    if k != 2:
        raise ValueError("only k in {1, 2} is supported")
    one = set(int(u) for u in g.neighbors[v])
    two = set()
    for u in one:
        two.update(int(w) for w in g.neighbors[u])
    two.discard(v)
    two -= one
    return np.array(sorted(two), dtype=np.int64)
