"""Per-graph preprocessing and padded batch assembly.

``prepare_graph`` attaches the aggregation node, computes structural features,
and converts everything to clamp-safe integer index arrays. Edge features are
folded into ``path_probs``: the hop-position distribution over all shortest
paths, projected onto edge-vocabulary indicator columns. Averaging embedded
edge features along shortest paths is then a single matrix product, and no
per-edge arrays survive into a batch. ``collate`` pads a list of prepared
graphs to a common node count; padded slots carry valid (but masked) indices
and all-zero path rows, so no lookup can fail.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoding import degree_index, path_hop_weights, spd_code_matrix
from .graphs import Graph, attach_virtual_node, structural_features, validate_graph


@dataclass(eq=False)
class PreparedGraph:
    node_idx: np.ndarray  # [n, F] rows into the node embedding tables
    deg_in_idx: np.ndarray  # [n]
    deg_out_idx: np.ndarray  # [n]
    spd_codes: np.ndarray  # [n, n]
    path_probs: np.ndarray  # [n, n, L, W] per-hop edge-vocabulary weights
    path_w: np.ndarray  # [n, n, L] averaging weights, 0 where no hop
    num_nodes: int  # includes the aggregation node
    vnode_pos: int
    target: float


@dataclass(eq=False)
class Batch:
    node_idx: np.ndarray  # [B, N, F]
    deg_in_idx: np.ndarray  # [B, N]
    deg_out_idx: np.ndarray  # [B, N]
    spd_codes: np.ndarray  # [B, N, N]
    path_probs: np.ndarray  # [B, N, N, L, W]
    path_w: np.ndarray  # [B, N, N, L]
    pad_mask: np.ndarray  # [B, N] bool, True = real slot
    vnode_pos: np.ndarray  # [B]
    targets: np.ndarray  # [B] float64, NaN when absent

    @property
    def num_graphs(self) -> int:
        return self.node_idx.shape[0]

    @property
    def num_slots(self) -> int:
        return self.node_idx.shape[1]


def _check_vocab(feats: np.ndarray, sizes, what: str) -> np.ndarray:
    if feats.shape[0] == 0:
        # no rows to validate; normalize the width for collation
        return np.zeros((0, len(sizes)), dtype=np.int64)
    if feats.shape[1] != len(sizes):
        raise ValueError(f"{what} width {feats.shape[1]} does not match {len(sizes)} vocabularies")
    for k, size in enumerate(sizes):
        if feats[:, k].max() >= size:
            raise ValueError(f"{what} vocabulary {k}: index {feats[:, k].max()} >= cardinality {size}")
    return feats


def _vocab_indicators(edge_feats: np.ndarray, sizes) -> np.ndarray:
    """[m, sum(sizes)] one-hot blocks, one block per edge vocabulary."""
    m = edge_feats.shape[0]
    out = np.zeros((m, int(sum(sizes))))
    offset = 0
    for k, size in enumerate(sizes):
        out[np.arange(m), offset + edge_feats[:, k]] = 1.0
        offset += size
    return out


def prepare_graph(
    g: Graph,
    node_vocab_sizes,
    edge_vocab_sizes,
    max_deg: int,
    max_spd: int,
    max_path_len: int,
) -> PreparedGraph:
    validate_graph(g)
    _check_vocab(g.node_feats, node_vocab_sizes, "node feature")
    edge_feats = _check_vocab(g.edge_feats, edge_vocab_sizes, "edge feature")

    g2, sf2 = attach_virtual_node(g, structural_features(g, max_path_len))
    # the appended row holds the -1 sentinel; route it to each table's last row
    node_idx = g2.node_feats.copy()
    for k, size in enumerate(node_vocab_sizes):
        node_idx[node_idx[:, k] < 0, k] = size
    path_probs = np.einsum(
        "stkm,mw->stkw", sf2.path_profile, _vocab_indicators(edge_feats, edge_vocab_sizes)
    )
    return PreparedGraph(
        node_idx=node_idx,
        deg_in_idx=degree_index(sf2.indeg, max_deg),
        deg_out_idx=degree_index(sf2.outdeg, max_deg),
        spd_codes=spd_code_matrix(sf2.spd, max_spd),
        path_probs=path_probs,
        path_w=path_hop_weights(sf2, max_path_len),
        num_nodes=g2.num_nodes,
        vnode_pos=g2.num_nodes - 1,
        target=float("nan") if g.target is None else float(g.target),
    )


def collate(prepared: list) -> Batch:
    if not prepared:
        raise ValueError("cannot collate an empty batch")
    bsz = len(prepared)
    n_max = max(p.num_nodes for p in prepared)
    feat_w = prepared[0].node_idx.shape[1]
    path_len, vocab_w = prepared[0].path_probs.shape[2:]
    for p in prepared:
        if p.node_idx.shape[1] != feat_w or p.path_probs.shape[2:] != (path_len, vocab_w):
            raise ValueError("prepared graphs disagree on feature widths")

    vnode_row = prepared[0].node_idx[-1]  # any valid index works for padding
    node_idx = np.tile(vnode_row, (bsz, n_max, 1)) if feat_w else np.zeros((bsz, n_max, 0), dtype=np.int64)
    deg_in = np.zeros((bsz, n_max), dtype=np.int64)
    deg_out = np.zeros((bsz, n_max), dtype=np.int64)
    spd_codes = np.zeros((bsz, n_max, n_max), dtype=np.int64)
    path_probs = np.zeros((bsz, n_max, n_max, path_len, vocab_w))
    path_w = np.zeros((bsz, n_max, n_max, path_len))
    pad_mask = np.zeros((bsz, n_max), dtype=bool)
    vnode_pos = np.zeros(bsz, dtype=np.int64)
    targets = np.full(bsz, np.nan)

    for b, p in enumerate(prepared):
        n = p.num_nodes
        node_idx[b, :n] = p.node_idx
        deg_in[b, :n] = p.deg_in_idx
        deg_out[b, :n] = p.deg_out_idx
        spd_codes[b, :n, :n] = p.spd_codes
        path_probs[b, :n, :n] = p.path_probs
        path_w[b, :n, :n] = p.path_w
        pad_mask[b, :n] = True
        vnode_pos[b] = p.vnode_pos
        targets[b] = p.target

    return Batch(
        node_idx=node_idx,
        deg_in_idx=deg_in,
        deg_out_idx=deg_out,
        spd_codes=spd_codes,
        path_probs=path_probs,
        path_w=path_w,
        pad_mask=pad_mask,
        vnode_pos=vnode_pos,
        targets=targets,
    )
