"""Biased multi-head self-attention and the pre-norm residual block.

The attention logits are query/key dot products scaled by sqrt(d_head) plus an
externally assembled per-head additive bias; that bias is where all graph
structure enters. Q and K projections carry optional additive bias vectors
(default zero) because the aggregator-emulation weight settings need them; V
and the output projection stay bias-free.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(eq=False)
class LayerParams:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    b_q: Tensor
    b_k: Tensor
    w1: Tensor  # FFN expand [d, d]; inner width equals d by contract
    b1: Tensor
    w2: Tensor  # FFN contract [d, d]
    b2: Tensor
    ln1_gamma: Tensor
    ln1_beta: Tensor
    ln2_gamma: Tensor
    ln2_beta: Tensor

    @property
    def d(self) -> int:
        return self.w_q.shape[0]

    def parameters(self, prefix: str = ""):
        names = [
            "w_q", "w_k", "w_v", "w_o", "b_q", "b_k",
            "w1", "b1", "w2", "b2",
            "ln1_gamma", "ln1_beta", "ln2_gamma", "ln2_beta",
        ]
        return [(prefix + n, getattr(self, n)) for n in names]


def init_layer_params(rng: np.random.Generator, d: int) -> LayerParams:
    tn = ad.trunc_normal
    return LayerParams(
        w_q=Tensor(tn(rng, (d, d)), requires_grad=True),
        w_k=Tensor(tn(rng, (d, d)), requires_grad=True),
        w_v=Tensor(tn(rng, (d, d)), requires_grad=True),
        w_o=Tensor(tn(rng, (d, d)), requires_grad=True),
        b_q=Tensor(np.zeros(d), requires_grad=True),
        b_k=Tensor(np.zeros(d), requires_grad=True),
        w1=Tensor(tn(rng, (d, d)), requires_grad=True),
        b1=Tensor(np.zeros(d), requires_grad=True),
        w2=Tensor(tn(rng, (d, d)), requires_grad=True),
        b2=Tensor(np.zeros(d), requires_grad=True),
        ln1_gamma=Tensor(np.ones(d), requires_grad=True),
        ln1_beta=Tensor(np.zeros(d), requires_grad=True),
        ln2_gamma=Tensor(np.ones(d), requires_grad=True),
        ln2_beta=Tensor(np.zeros(d), requires_grad=True),
    )


def multi_head_attention(
    h: Tensor,
    bias: Tensor,
    p: LayerParams,
    training: bool = False,
    attn_dropout: float = 0.0,
    rng: np.random.Generator | None = None,
    return_weights: bool = False,
):
    """Softmax(QK^T / sqrt(d_head) + bias) V, heads concatenated through W_O.

    ``h``: [..., n, d]; ``bias``: [..., num_heads, n, n] (leading axes
    broadcast). The head count is read off the bias tensor.
    """
    d = p.d
    if h.shape[-1] != d:
        raise ValueError(f"input width {h.shape[-1]} does not match params d={d}")
    num_heads = bias.shape[-3]
    if bias.shape[-1] != h.shape[-2] or bias.shape[-2] != h.shape[-2]:
        raise ValueError(f"bias shape {bias.shape} does not match {h.shape[-2]} nodes")
    if d % num_heads:
        raise ValueError(f"d={d} not divisible by {num_heads} heads")
    d_head = d // num_heads

    q = ad.add(ad.matmul(h, p.w_q), p.b_q)
    k = ad.add(ad.matmul(h, p.w_k), p.b_k)
    v = ad.matmul(h, p.w_v)
    qh = ad.split_heads(q, num_heads)
    kh = ad.split_heads(k, num_heads)
    vh = ad.split_heads(v, num_heads)

    logits = ad.scale(ad.matmul(qh, ad.transpose_last(kh)), 1.0 / math.sqrt(d_head))
    probs = ad.biased_masked_softmax(logits, bias)
    dropped = ad.dropout(probs, attn_dropout, training, rng)
    out = ad.matmul(ad.concat_heads(ad.matmul(dropped, vh)), p.w_o)
    return (out, probs) if return_weights else out


def graphormer_layer(
    h: Tensor,
    bias: Tensor,
    p: LayerParams,
    training: bool = False,
    ffn_dropout: float = 0.0,
    attn_dropout: float = 0.0,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Pre-norm residual block: attention sublayer then feed-forward sublayer."""
    attn = multi_head_attention(
        ad.layer_norm(h, p.ln1_gamma, p.ln1_beta), bias, p,
        training=training, attn_dropout=attn_dropout, rng=rng,
    )
    h1 = ad.add(h, ad.dropout(attn, ffn_dropout, training, rng))

    f = ad.layer_norm(h1, p.ln2_gamma, p.ln2_beta)
    f = ad.gelu(ad.add(ad.matmul(f, p.w1), p.b1))
    f = ad.add(ad.matmul(f, p.w2), p.b2)
    return ad.add(h1, ad.dropout(f, ffn_dropout, training, rng))
