"""Structural encodings feeding the attention stack.

Three signals are produced from ``StructuralFeatures``: a degree embedding
added to node inputs, a per-head bias indexed by shortest-path distance, and a
per-head bias averaging dot products of edge features with learnable per-hop
weights over all shortest paths between each pair. All table lookups are
clamp-guarded and all outputs live on the autodiff tape so the tables train.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graphs import UNREACHABLE, VNODE_DEGREE, VNODE_DISTANCE_CODE, StructuralFeatures

# stand-in for minus infinity inside bias tensors; large enough that exp()
# underflows to exactly zero after the softmax max-shift
NEG_INF_BIAS = -1e9


@dataclass(eq=False)
class EncodingTables:
    """Learnable tables shared across all layers of a model."""

    z_in: Tensor  # [max_deg + 2, d], last row reserved for the virtual node
    z_out: Tensor  # same shape as z_in
    b_spatial: Tensor  # [num_heads, max_spd + 3]: 0..max_spd, unreachable, vnode
    w_edge: Tensor  # [num_heads, max_path_len, d_E]
    edge_feat_embed: list  # per-vocabulary Tensors [cardinality, d_E]
    max_deg: int
    max_spd: int
    max_path_len: int

    @property
    def num_heads(self) -> int:
        return self.b_spatial.shape[0]

    @property
    def d_edge(self) -> int:
        return self.w_edge.shape[2]

    def parameters(self):
        named = [
            ("enc.z_in", self.z_in),
            ("enc.z_out", self.z_out),
            ("enc.b_spatial", self.b_spatial),
            ("enc.w_edge", self.w_edge),
        ]
        named += [(f"enc.edge_feat_embed.{k}", t) for k, t in enumerate(self.edge_feat_embed)]
        return named


def init_encoding_tables(
    rng: np.random.Generator,
    d: int,
    num_heads: int,
    d_edge: int,
    edge_vocab_sizes,
    max_deg: int = 64,
    max_spd: int = 20,
    max_path_len: int = 20,
) -> EncodingTables:
    """Fresh tables, truncated-normal.

    The per-distance bias rows and the degree tables get a wide spread
    (std 0.5, i.e. logit-scale) rather than the embedding-scale 0.02: when
    node features carry little per-node signal, structural information
    reaches the rest of the network only through these tables, and
    near-zero tables make uniform attention over interchangeable tokens a
    flat region the optimizer is slow to leave.

    The distance-bias columns additionally start on a shared -log(1+distance)
    slope, so attention begins local rather than uniform. When node tokens are
    interchangeable, each node's softmax mass then reflects how central it is
    from the first step, which hands the optimizer a usable gradient where a
    zero-mean start leaves escape to chance; the noise term keeps heads
    distinct. Unreachable pairs sit one step past the farthest distance
    bucket, and the virtual-node column stays noise-only so the readout hub
    is not down-weighted.
    """
    tn = ad.trunc_normal
    z_in = tn(rng, (max_deg + 2, d), std=0.5)
    z_out = tn(rng, (max_deg + 2, d), std=0.5)
    b_spatial = tn(rng, (num_heads, max_spd + 3), std=0.5)
    b_spatial[:, : max_spd + 1] -= np.log1p(np.arange(max_spd + 1))
    b_spatial[:, max_spd + 1] -= np.log1p(max_spd + 1)
    return EncodingTables(
        z_in=Tensor(z_in, requires_grad=True),
        z_out=Tensor(z_out, requires_grad=True),
        b_spatial=Tensor(b_spatial, requires_grad=True),
        w_edge=Tensor(tn(rng, (num_heads, max_path_len, d_edge)), requires_grad=True),
        edge_feat_embed=[Tensor(tn(rng, (v, d_edge)), requires_grad=True) for v in edge_vocab_sizes],
        max_deg=max_deg,
        max_spd=max_spd,
        max_path_len=max_path_len,
    )


def degree_index(deg: np.ndarray, max_deg: int) -> np.ndarray:
    """Clamp degrees into table rows; the sentinel routes to the reserved row."""
    deg = np.asarray(deg)
    return np.where(deg == VNODE_DEGREE, max_deg + 1, np.minimum(deg, max_deg))


def spd_code_matrix(spd: np.ndarray, max_spd: int) -> np.ndarray:
    """Map raw distances to bias-table columns.

    0..max_spd clamp into place; UNREACHABLE and the virtual-node code get the
    two trailing columns.
    """
    spd = np.asarray(spd)
    clamped = np.minimum(np.maximum(spd, 0), max_spd)
    out = np.where(spd == UNREACHABLE, max_spd + 1, clamped)
    return np.where(spd == VNODE_DISTANCE_CODE, max_spd + 2, out)


def centrality_encode(node_embed: Tensor, sf: StructuralFeatures, t: EncodingTables) -> Tensor:
    """Add indegree and outdegree embedding rows to each node's input vector."""
    in_rows = ad.embedding_lookup(t.z_in, degree_index(sf.indeg, t.max_deg))
    out_rows = ad.embedding_lookup(t.z_out, degree_index(sf.outdeg, t.max_deg))
    return ad.add(node_embed, ad.add(in_rows, out_rows))


def spatial_bias(sf: StructuralFeatures, t: EncodingTables) -> Tensor:
    """bias[h, i, j] = b_spatial[h, code(spd[i, j])], shape [num_heads, n, n]."""
    codes = spd_code_matrix(sf.spd, t.max_spd)
    rows = ad.embedding_lookup(ad.transpose_last(t.b_spatial), codes)  # [n, n, H]
    return ad.moveaxis(rows, -1, 0)


def embed_edge_features(edge_feats: np.ndarray, t: EncodingTables) -> Tensor:
    """Sum per-vocabulary embedding rows into one d_E vector per edge."""
    m = edge_feats.shape[0]
    if m == 0 or not t.edge_feat_embed:
        return Tensor(np.zeros((m, t.d_edge)))
    if edge_feats.shape[1] != len(t.edge_feat_embed):
        raise ValueError(
            f"edge feature width {edge_feats.shape[1]} does not match {len(t.edge_feat_embed)} vocabularies"
        )
    acc = ad.embedding_lookup(t.edge_feat_embed[0], edge_feats[:, 0])
    for k in range(1, len(t.edge_feat_embed)):
        acc = ad.add(acc, ad.embedding_lookup(t.edge_feat_embed[k], edge_feats[:, k]))
    return acc


def path_hop_weights(sf: StructuralFeatures, max_path_len: int) -> np.ndarray:
    """[n, n, L] averaging weights: 1/min(distance, L) over the kept hops.

    Stored profiles cap hop positions, so pairs farther apart than both caps
    average their first min(stored, L) hops. The diagonal, unreachable pairs,
    and virtual-node pairs (negative-sentinel distances) get all-zero rows.
    """
    n = sf.spd.shape[0]
    stored = sf.path_profile.shape[2]
    w = np.zeros((n, n, max_path_len))
    kept = np.minimum(sf.spd, min(stored, max_path_len))
    for i in range(n):
        for j in range(n):
            k = kept[i, j]
            if i != j and k >= 1:
                w[i, j, :k] = 1.0 / k
    return w


def edge_bias(sf: StructuralFeatures, edge_feature_vectors: Tensor, t: EncodingTables) -> Tensor:
    """Per-hop dot products with the hop weights, averaged along geodesics.

    Each hop position uses the shortest-path-averaged feature vector from
    ``sf.path_profile``. Output [num_heads, n, n]; zero wherever no path is
    recorded.
    """
    n = sf.spd.shape[0]
    h = t.num_heads
    m = edge_feature_vectors.shape[0]
    if m == 0:
        return Tensor(np.zeros((h, n, n)))
    L = t.max_path_len
    prof = sf.path_profile[:, :, :L, :]
    if prof.shape[2] < L:
        prof = np.concatenate(
            [prof, np.zeros((n, n, L - prof.shape[2], m))], axis=2)
    sel = ad.matmul(Tensor(prof.reshape(n * n * L, m)), edge_feature_vectors)
    weighted = ad.mul(ad.reshape(sel, (n, n, L, t.d_edge)),
                      path_hop_weights(sf, L)[..., None])
    flat = ad.reshape(weighted, (n * n, L * t.d_edge))
    w_flat = ad.reshape(t.w_edge, (h, L * t.d_edge))
    c = ad.matmul(flat, ad.transpose_last(w_flat))  # [n*n, H]
    return ad.moveaxis(ad.reshape(c, (n, n, h)), -1, 0)


def assemble_attention_bias(spatial: Tensor, edge: Tensor, pad_mask=None) -> Tensor:
    """Sum the two bias fields; padded positions are forced to NEG_INF_BIAS."""
    if spatial.shape != edge.shape:
        raise ValueError(f"bias shapes disagree: {spatial.shape} vs {edge.shape}")
    total = ad.add(spatial, edge)
    if pad_mask is None:
        return total
    m = np.asarray(pad_mask, dtype=bool)
    if m.shape != (spatial.shape[-1],):
        raise ValueError(f"pad_mask shape {m.shape} does not match bias {spatial.shape}")
    if m.all():
        return total
    keep = (m[:, None] & m[None, :]).astype(total.data.dtype)
    return ad.add(ad.mul(total, keep), Tensor((1.0 - keep) * NEG_INF_BIAS))
