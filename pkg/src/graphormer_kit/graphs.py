"""Graph containers and structural preprocessing.

Everything downstream consumes the two value types defined here. ``Graph``
stores the combinatorial object plus categorical features; ``StructuralFeatures``
carries what the encoders need: all-pairs shortest-path distances, hop-position
edge distributions over all shortest paths, and degree vectors. All functions
are pure; none mutate their inputs.
"""

from __future__ import annotations

import hashlib
from collections import deque
from dataclasses import dataclass

import numpy as np

UNREACHABLE = -1
# distance code for pairs involving the aggregation node; kept distinct from
# every real distance and from UNREACHABLE so it can own a bias-table slot
VNODE_DISTANCE_CODE = -2
VNODE_FEATURE = -1
VNODE_DEGREE = -1


@dataclass(eq=False)
class Graph:
    num_nodes: int
    directed: bool
    edges: np.ndarray  # [m, 2] int64
    node_feats: np.ndarray  # [n, F] int64 vocabulary indices
    edge_feats: np.ndarray  # [m, Fe] int64 vocabulary indices
    target: float | None = None


@dataclass(eq=False)
class StructuralFeatures:
    spd: np.ndarray  # [n, n] int64, UNREACHABLE / VNODE_DISTANCE_CODE sentinels
    path_profile: np.ndarray  # [n, n, L, m] hop-position edge distributions
    indeg: np.ndarray  # [n] int64, VNODE_DEGREE sentinel on the aggregation node
    outdeg: np.ndarray
    has_vnode: bool = False


@dataclass(eq=False)
class WLColoring:
    colors: list  # per-node content-derived integer ids, comparable across graphs
    rounds: int


def _feat_matrix(x, rows, name):
    if x is None:
        return np.zeros((rows, 0), dtype=np.int64)
    arr = np.asarray(x, dtype=np.int64)
    if arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be a 2-d index matrix")
    return arr


def make_graph(num_nodes, edges, directed=False, node_feats=None, edge_feats=None, target=None) -> Graph:
    """Normalize inputs into a validated Graph."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    g = Graph(
        int(num_nodes),
        bool(directed),
        edges,
        _feat_matrix(node_feats, num_nodes, "node_feats"),
        _feat_matrix(edge_feats, len(edges), "edge_feats"),
        target,
    )
    validate_graph(g)
    return g


def validate_graph(g: Graph):
    if g.num_nodes < 1:
        raise ValueError(f"graph needs at least one node, got {g.num_nodes}")
    if g.edges.size and (g.edges.min() < 0 or g.edges.max() >= g.num_nodes):
        raise ValueError(f"edge endpoint out of range for {g.num_nodes} nodes")
    if g.node_feats.shape[0] != g.num_nodes:
        raise ValueError("node_feats row count does not match num_nodes")
    if g.edge_feats.shape[0] != g.edges.shape[0]:
        raise ValueError("edge_feats row count does not match edge count")
    if g.node_feats.size and g.node_feats.min() < 0:
        raise ValueError("negative node feature index")
    if g.edge_feats.size and g.edge_feats.min() < 0:
        raise ValueError("negative edge feature index")


def adjacency(g: Graph):
    """Sorted (neighbor, edge_id) lists; symmetric unless the graph is directed."""
    adj = [[] for _ in range(g.num_nodes)]
    for eid, (u, v) in enumerate(g.edges):
        adj[u].append((int(v), eid))
        if not g.directed:
            adj[v].append((int(u), eid))
    for lst in adj:
        lst.sort()
    return adj


def compute_degrees(g: Graph):
    indeg = np.zeros(g.num_nodes, dtype=np.int64)
    outdeg = np.zeros(g.num_nodes, dtype=np.int64)
    for u, v in g.edges:
        outdeg[u] += 1
        indeg[v] += 1
        if not g.directed:
            outdeg[v] += 1
            indeg[u] += 1
    return indeg, outdeg


def shortest_path_distances(g: Graph) -> np.ndarray:
    """Unweighted all-pairs distances by repeated BFS; UNREACHABLE off-component."""
    adj = adjacency(g)
    n = g.num_nodes
    spd = np.full((n, n), UNREACHABLE, dtype=np.int64)
    for s in range(n):
        spd[s, s] = 0
        q = deque([s])
        while q:
            u = q.popleft()
            du = spd[s, u]
            for v, _ in adj[u]:
                if spd[s, v] == UNREACHABLE:
                    spd[s, v] = du + 1
                    q.append(v)
    return spd


def _geodesic_counts(g: Graph, spd: np.ndarray):
    """(to[s, v], frm[v, t]): shortest-path counts s->v and v->t, float64."""
    n = g.num_nodes
    into = [[] for _ in range(n)]  # predecessors: u with an edge u->v
    outof = [[] for _ in range(n)]  # successors: w with an edge v->w
    for u, v in g.edges:
        into[v].append(int(u))
        outof[u].append(int(v))
        if not g.directed:
            into[u].append(int(v))
            outof[v].append(int(u))

    to = np.zeros((n, n))
    for s in range(n):
        to[s, s] = 1.0
        for v in np.argsort(spd[s], kind="stable"):
            d = spd[s, v]
            if d < 1:  # the source itself, or an unreachable sentinel
                continue
            to[s, v] = sum(to[s, u] for u in into[v] if spd[s, u] == d - 1)
    if not g.directed:
        return to, to.T

    frm = np.zeros((n, n))
    for t in range(n):
        frm[t, t] = 1.0
        for v in np.argsort(spd[:, t], kind="stable"):
            d = spd[v, t]
            if d < 1:
                continue
            frm[v, t] = sum(frm[w, t] for w in outof[v] if spd[w, t] == d - 1)
    return to, frm


def geodesic_profile(g: Graph, max_len: int) -> np.ndarray:
    """Hop-position edge distribution over all shortest paths, per ordered pair.

    Returns [n, n, max_len, num_edges] where entry (s, t, k, e) is the
    probability that a uniformly random shortest s-to-t path crosses edge e
    as its (k+1)-th hop. Rows for positions past min(distance, max_len), the
    diagonal, and unreachable pairs are all zero; every valid position's row
    sums to one. Averaging per-hop quantities against this profile is
    invariant to node relabeling, which no single tie-broken path can be.
    """
    if max_len < 1:
        raise ValueError(f"max_len must be >= 1, got {max_len}")
    n, m = g.num_nodes, len(g.edges)
    spd = shortest_path_distances(g)
    prof = np.zeros((n, n, max_len, m))
    if m == 0:
        return prof
    to, frm = _geodesic_counts(g, spd)  # to[s, v], frm[v, t]
    for s in range(n):
        for t in range(n):
            dist = spd[s, t]
            if s == t or dist < 1:
                continue
            for eid, (u, v) in enumerate(g.edges):
                for a, b in ((u, v),) if g.directed else ((u, v), (v, u)):
                    if spd[s, a] + 1 + spd[b, t] == dist and spd[s, a] >= 0 and spd[b, t] >= 0:
                        k = spd[s, a]  # hop index, 0-based
                        if k < max_len:
                            prof[s, t, k, eid] += to[s, a] * frm[b, t] / to[s, t]
    return prof


def structural_features(g: Graph, max_len: int) -> StructuralFeatures:
    indeg, outdeg = compute_degrees(g)
    return StructuralFeatures(
        spd=shortest_path_distances(g),
        path_profile=geodesic_profile(g, max_len),
        indeg=indeg,
        outdeg=outdeg,
        has_vnode=False,
    )


def attach_virtual_node(g: Graph, sf: StructuralFeatures):
    """Append one aggregation node reachable-by-code from every other node.

    The new node carries reserved feature and degree sentinels, its distance
    rows use VNODE_DISTANCE_CODE (its connection is not a physical edge), and
    no shortest paths run through it.
    """
    if sf.has_vnode:
        raise ValueError("graph already has a virtual node attached")
    n = g.num_nodes
    node_feats = np.vstack([g.node_feats, np.full((1, g.node_feats.shape[1]), VNODE_FEATURE, dtype=np.int64)])
    g2 = Graph(n + 1, g.directed, g.edges, node_feats, g.edge_feats, g.target)

    spd = np.full((n + 1, n + 1), VNODE_DISTANCE_CODE, dtype=np.int64)
    spd[:n, :n] = sf.spd
    spd[n, n] = 0
    max_len, m = sf.path_profile.shape[2:]
    profile = np.zeros((n + 1, n + 1, max_len, m))
    profile[:n, :n] = sf.path_profile
    indeg = np.append(sf.indeg, VNODE_DEGREE)
    outdeg = np.append(sf.outdeg, VNODE_DEGREE)
    return g2, StructuralFeatures(spd, profile, indeg, outdeg, has_vnode=True)


def _digest(*parts: bytes) -> bytes:
    h = hashlib.blake2b(digest_size=16)
    for p in parts:
        h.update(p)
        h.update(b"|")
    return h.digest()


def wl1_refinement(g: Graph, max_rounds: int | None = None) -> WLColoring:
    """Iterative color refinement with content-derived hashes.

    Colors start from the node feature rows (uniform when featureless) and are
    refined by hashing each node's color with the sorted multiset of neighbor
    colors, until the induced partition stops changing. The hash values are a
    pure function of graph content, so color ids and histograms line up across
    different graphs.
    """
    if g.directed:
        raise ValueError("refinement is defined on undirected graphs")
    if max_rounds is None:
        max_rounds = g.num_nodes
    adj = adjacency(g)
    colors = [_digest(g.node_feats[i].tobytes()) for i in range(g.num_nodes)]

    def partition(cs):
        groups = {}
        for i, c in enumerate(cs):
            groups.setdefault(c, []).append(i)
        return frozenset(frozenset(v) for v in groups.values())

    rounds = 0
    for _ in range(max_rounds):
        rounds += 1
        refined = [
            _digest(colors[i], *sorted(colors[v] for v, _ in adj[i]))
            for i in range(g.num_nodes)
        ]
        if partition(refined) == partition(colors):
            break
        colors = refined
    ids = [int.from_bytes(c[:8], "big") for c in colors]
    return WLColoring(colors=ids, rounds=rounds)


def wl_histogram(coloring: WLColoring) -> dict:
    hist = {}
    for c in coloring.colors:
        hist[c] = hist.get(c, 0) + 1
    return hist


def spd_multiset_signature(g: Graph) -> tuple:
    """Sorted collection of per-node sorted distance multisets."""
    if g.directed:
        raise ValueError("signature is defined on undirected graphs")
    spd = shortest_path_distances(g)
    rows = [tuple(sorted(int(x) for x in row)) for row in spd]
    return tuple(sorted(rows))


def permute_graph(g: Graph, perm) -> Graph:
    """Relabel nodes: old node i becomes perm[i]. Edge order is unchanged."""
    perm = np.asarray(perm, dtype=np.int64)
    if sorted(perm.tolist()) != list(range(g.num_nodes)):
        raise ValueError("perm must be a permutation of node indices")
    node_feats = np.empty_like(g.node_feats)
    node_feats[perm] = g.node_feats
    edges = perm[g.edges] if g.edges.size else g.edges
    return Graph(g.num_nodes, g.directed, edges, node_feats, g.edge_feats.copy(), g.target)


def cycle_graph(n: int, node_feats=None, edge_feats=None) -> Graph:
    if n < 3:
        raise ValueError("cycle needs at least 3 nodes")
    edges = [(i, (i + 1) % n) for i in range(n)]
    return make_graph(n, edges, node_feats=node_feats, edge_feats=edge_feats)


def path_graph(n: int, node_feats=None, edge_feats=None) -> Graph:
    edges = [(i, i + 1) for i in range(n - 1)]
    return make_graph(n, edges, node_feats=node_feats, edge_feats=edge_feats)


def disjoint_union(a: Graph, b: Graph) -> Graph:
    if a.directed != b.directed:
        raise ValueError("cannot union directed with undirected")
    if a.node_feats.shape[1] != b.node_feats.shape[1] or a.edge_feats.shape[1] != b.edge_feats.shape[1]:
        raise ValueError("feature widths disagree")
    edges = np.vstack([a.edges, b.edges + a.num_nodes]) if (a.edges.size or b.edges.size) else a.edges
    return Graph(
        a.num_nodes + b.num_nodes,
        a.directed,
        edges.reshape(-1, 2),
        np.vstack([a.node_feats, b.node_feats]),
        np.vstack([a.edge_feats, b.edge_feats]),
        None,
    )
