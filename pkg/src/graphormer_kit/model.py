"""Full model assembly plus the message-passing oracle it is tested against.

The forward pass embeds categorical node features, adds the degree encoding,
runs the stacked attention layers under one shared structural bias, and reads
the prediction off the aggregation node's final row. The reference GNN here is
deliberately naive numpy (explicit neighbor loops): it is the independent
oracle for the aggregator-emulation checks, not a fast implementation.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .attention import LayerParams, graphormer_layer, init_layer_params
from .autodiff import Tensor
from .batching import Batch
from .encoding import NEG_INF_BIAS, EncodingTables, init_encoding_tables
from .graphs import Graph, adjacency

TASKS = ("regression", "binary")


@dataclass(eq=False)
class ModelConfig:
    num_layers: int = 2
    d: int = 32
    num_heads: int = 4
    d_edge: int = 8
    node_vocab_sizes: tuple = (1,)
    edge_vocab_sizes: tuple = ()
    max_deg: int = 64
    max_spd: int = 20
    max_path_len: int = 20
    dropout_ffn: float = 0.0
    dropout_attn: float = 0.0
    dropout_embed: float = 0.0
    task: str = "regression"
    final_ln: bool = True
    use_spatial: bool = True
    use_centrality: bool = True
    use_edge: bool = True

    def validate(self):
        if self.d % self.num_heads:
            raise ValueError(f"d={self.d} not divisible by num_heads={self.num_heads}")
        for name in ("dropout_ffn", "dropout_attn", "dropout_embed"):
            r = getattr(self, name)
            if not 0.0 <= r < 1.0:
                raise ValueError(f"{name} must be in [0, 1), got {r}")
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        if len(self.node_vocab_sizes) < 1:
            raise ValueError("at least one node feature vocabulary is required")
        if self.num_layers < 0:
            raise ValueError("num_layers must be >= 0")
        return self

    def to_dict(self) -> dict:
        out = asdict(self)
        out["node_vocab_sizes"] = list(self.node_vocab_sizes)
        out["edge_vocab_sizes"] = list(self.edge_vocab_sizes)
        return out


@dataclass(eq=False)
class ModelParams:
    node_feat_embed: list  # per-vocabulary Tensors [cardinality + 1, d]
    enc: EncodingTables
    layers: list  # LayerParams
    final_gamma: Tensor
    final_beta: Tensor
    head_w: Tensor  # [d, 1]
    head_b: Tensor  # [1]

    def named_parameters(self):
        out = [(f"node_embed.{k}", t) for k, t in enumerate(self.node_feat_embed)]
        out += self.enc.parameters()
        for i, lp in enumerate(self.layers):
            out += lp.parameters(prefix=f"layers.{i}.")
        out += [
            ("final_gamma", self.final_gamma),
            ("final_beta", self.final_beta),
            ("head_w", self.head_w),
            ("head_b", self.head_b),
        ]
        return out


def init_model_params(rng: np.random.Generator, config: ModelConfig) -> ModelParams:
    config.validate()
    d = config.d
    # each vocabulary gets one extra row for the aggregation-node sentinel
    node_embed = [
        Tensor(ad.trunc_normal(rng, (v + 1, d)), requires_grad=True)
        for v in config.node_vocab_sizes
    ]
    enc = init_encoding_tables(
        rng, d, config.num_heads, config.d_edge, list(config.edge_vocab_sizes),
        max_deg=config.max_deg, max_spd=config.max_spd, max_path_len=config.max_path_len,
    )
    layers = [init_layer_params(rng, d) for _ in range(config.num_layers)]
    return ModelParams(
        node_feat_embed=node_embed,
        enc=enc,
        layers=layers,
        final_gamma=Tensor(np.ones(d), requires_grad=True),
        final_beta=Tensor(np.zeros(d), requires_grad=True),
        head_w=Tensor(ad.trunc_normal(rng, (d, 1)), requires_grad=True),
        head_b=Tensor(np.zeros(1), requires_grad=True),
    )


def attention_bias_for_batch(params: ModelParams, config: ModelConfig, batch: Batch) -> Tensor:
    """Shared [B, H, N, N] bias: spatial + path-edge terms, padding forced off."""
    bsz, n = batch.node_idx.shape[:2]
    heads = config.num_heads
    parts = []
    if config.use_spatial:
        rows = ad.embedding_lookup(ad.transpose_last(params.enc.b_spatial), batch.spd_codes)
        parts.append(ad.moveaxis(rows, -1, -3))  # [B, H, N, N]
    if config.use_edge and batch.path_probs.shape[-1] > 0 and params.enc.edge_feat_embed:
        # averaged embedded edge vector per hop position: project the batched
        # vocabulary weights through each embedding table and sum the slots
        length = batch.path_probs.shape[3]
        flat_probs = batch.path_probs.reshape(bsz * n * n * length, -1)
        sel = None
        offset = 0
        for table in params.enc.edge_feat_embed:
            rows = table.shape[0]
            term = ad.matmul(Tensor(flat_probs[:, offset:offset + rows]), table)
            sel = term if sel is None else ad.add(sel, term)
            offset += rows
        sel = ad.reshape(sel, (bsz, n, n, length, config.d_edge))
        weighted = ad.mul(sel, batch.path_w[..., None])
        flat = ad.reshape(weighted, (bsz, n * n, config.max_path_len * config.d_edge))
        w_flat = ad.reshape(params.enc.w_edge, (heads, config.max_path_len * config.d_edge))
        c = ad.matmul(flat, ad.transpose_last(w_flat))  # [B, N*N, H]
        parts.append(ad.moveaxis(ad.reshape(c, (bsz, n, n, heads)), -1, -3))

    if not parts:
        total = Tensor(np.zeros((bsz, heads, n, n)))
    elif len(parts) == 1:
        total = parts[0]
    else:
        total = ad.add(parts[0], parts[1])

    if batch.pad_mask.all():
        return total
    keep = (batch.pad_mask[:, :, None] & batch.pad_mask[:, None, :]).astype(np.float64)
    keep = keep[:, None, :, :]
    return ad.add(ad.mul(total, keep), Tensor((1.0 - keep) * NEG_INF_BIAS))


def forward(
    params: ModelParams,
    config: ModelConfig,
    batch: Batch,
    training: bool = False,
    rng: np.random.Generator | None = None,
    input_delta: Tensor | None = None,
) -> Tensor:
    """Predictions, one scalar per graph (logit for classification).

    ``input_delta`` [B, N, d], when given, is added to the node embeddings
    after the degree encoding; the adversarial augmentation in training
    differentiates the loss with respect to it.
    """
    if batch.node_idx.shape[2] != len(params.node_feat_embed):
        raise ValueError(
            f"batch has {batch.node_idx.shape[2]} node feature slots, "
            f"params expect {len(params.node_feat_embed)}"
        )
    if len(params.layers) != config.num_layers:
        raise ValueError("params/config disagree on layer count")

    x = ad.embedding_lookup(params.node_feat_embed[0], batch.node_idx[..., 0])
    for k in range(1, len(params.node_feat_embed)):
        x = ad.add(x, ad.embedding_lookup(params.node_feat_embed[k], batch.node_idx[..., k]))
    if config.use_centrality:
        x = ad.add(x, ad.embedding_lookup(params.enc.z_in, batch.deg_in_idx))
        x = ad.add(x, ad.embedding_lookup(params.enc.z_out, batch.deg_out_idx))
    if input_delta is not None:
        if input_delta.data.shape != x.data.shape:
            raise ValueError(
                f"input_delta shape {input_delta.data.shape} does not match "
                f"embeddings {x.data.shape}"
            )
        x = ad.add(x, input_delta)
    h = ad.dropout(x, config.dropout_embed, training, rng)

    bias = attention_bias_for_batch(params, config, batch)
    for lp in params.layers:
        h = graphormer_layer(
            h, bias, lp, training=training,
            ffn_dropout=config.dropout_ffn, attn_dropout=config.dropout_attn, rng=rng,
        )
    if config.final_ln:
        h = ad.layer_norm(h, params.final_gamma, params.final_beta)
    readout = ad.gather_rows(h, batch.vnode_pos)  # [B, d]
    pred = ad.add(ad.matmul(readout, params.head_w), params.head_b)
    return ad.reshape(pred, (batch.num_graphs,))


def loss_fn(pred: Tensor, targets: np.ndarray, task: str) -> Tensor:
    targets = np.asarray(targets, dtype=np.float64)
    if np.any(np.isnan(targets)):
        raise ValueError("loss requires targets on every graph in the batch")
    if task == "regression":
        return ad.l1_loss(pred, targets)
    if task == "binary":
        return ad.bce_with_logits(pred, targets)
    raise ValueError(f"unknown task {task!r}")


def finite_difference_loss_check(
    params: ModelParams,
    config: ModelConfig,
    batch: Batch,
    h: float = 1e-5,
    param_filter=None,
):
    """Compare tape gradients of the batch loss against central differences.

    Sweeps every coordinate of every (optionally filtered) parameter, so keep
    the model small. Returns (max relative error, name of the worst parameter).
    Relative error per coordinate is |g_fd - g_ad| / max(1, |g_fd|, |g_ad|).
    """
    named = params.named_parameters()
    if param_filter is not None:
        named = [(n, t) for n, t in named if param_filter(n)]
    if not named:
        raise ValueError("no parameters selected for the finite-difference sweep")

    def loss_value() -> float:
        return loss_fn(forward(params, config, batch), batch.targets, config.task).item()

    for _, t in named:
        t.zero_grad()
    loss_fn(forward(params, config, batch), batch.targets, config.task).backward()

    worst, worst_name = 0.0, named[0][0]
    for name, t in named:
        g_ad = t.grad if t.grad is not None else np.zeros_like(t.data)
        g_ad = g_ad.ravel()
        flat = t.data.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = loss_value()
            flat[i] = orig - h
            fm = loss_value()
            flat[i] = orig
            g_fd = (fp - fm) / (2.0 * h)
            err = abs(g_fd - g_ad[i]) / max(1.0, abs(g_fd), abs(g_ad[i]))
            if err > worst:
                worst, worst_name = err, name
        t.zero_grad()
    return worst, worst_name


# ------------------------------------------------------------------ oracle

AGG_KINDS = ("MEAN", "SUM", "MAX")
READOUT_KINDS = ("MEAN", "SUM")


def reference_gnn_step(g: Graph, h: np.ndarray, kind: str, combine=None) -> np.ndarray:
    """One aggregate(+combine) sweep, written as explicit per-node loops.

    Nodes with no neighbors aggregate to the zero vector. ``combine`` maps
    (own row, aggregate row) to the new row; identity on the aggregate when
    omitted.
    """
    if kind not in AGG_KINDS:
        raise ValueError(f"kind must be one of {AGG_KINDS}, got {kind!r}")
    h = np.asarray(h, dtype=np.float64)
    adj = adjacency(g)
    out = np.zeros_like(h)
    for i in range(g.num_nodes):
        nbrs = [v for v, _ in adj[i]]
        if nbrs:
            rows = h[nbrs]
            if kind == "MEAN":
                agg = rows.mean(axis=0)
            elif kind == "SUM":
                agg = rows.sum(axis=0)
            else:
                agg = rows.max(axis=0)
        else:
            agg = np.zeros(h.shape[1])
        out[i] = combine(h[i], agg) if combine is not None else agg
    return out


def reference_readout(h: np.ndarray, kind: str) -> np.ndarray:
    if kind not in READOUT_KINDS:
        raise ValueError(f"kind must be one of {READOUT_KINDS}, got {kind!r}")
    h = np.asarray(h, dtype=np.float64)
    return h.mean(axis=0) if kind == "MEAN" else h.sum(axis=0)


@dataclass(eq=False)
class ReferenceGNN:
    aggregation: str = "MEAN"
    combine: object = None
    readout: str = "MEAN"

    def __post_init__(self):
        if self.aggregation not in AGG_KINDS:
            raise ValueError(f"aggregation must be one of {AGG_KINDS}")
        if self.readout not in READOUT_KINDS:
            raise ValueError(f"readout must be one of {READOUT_KINDS}")

    def step(self, g: Graph, h: np.ndarray) -> np.ndarray:
        return reference_gnn_step(g, h, self.aggregation, self.combine)

    def read(self, h: np.ndarray) -> np.ndarray:
        return reference_readout(h, self.readout)
