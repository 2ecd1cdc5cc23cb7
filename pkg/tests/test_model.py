"""End-to-end model properties: batching equals per-graph evaluation, padding
is inert, relabeling never changes predictions, the depth-0 model has a closed
form, and the batched bias assembly matches the per-graph encoding ops."""

import numpy as np
import pytest

import graphormer_kit.autodiff as ad
import graphormer_kit.encoding as enc
import graphormer_kit.graphs as gr
import graphormer_kit.model as mo
from graphormer_kit.autodiff import Tensor
from graphormer_kit.batching import Batch, collate, prepare_graph


def small_config(**kw):
    base = dict(
        num_layers=2, d=8, num_heads=2, d_edge=3,
        node_vocab_sizes=(3,), edge_vocab_sizes=(4,),
        max_deg=8, max_spd=6, max_path_len=5,
    )
    base.update(kw)
    return mo.ModelConfig(**base).validate()


def random_graph(rng, n, config=None):
    config = config or small_config()
    edges = [(i, int(rng.integers(0, i))) for i in range(1, n)]  # spanning tree
    extra = [(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < 0.25]
    edges = list(dict.fromkeys([(min(a, b), max(a, b)) for a, b in edges + extra]))
    return gr.make_graph(
        n, edges,
        node_feats=rng.integers(0, config.node_vocab_sizes[0], size=(n, 1)),
        edge_feats=rng.integers(0, config.edge_vocab_sizes[0], size=(len(edges), 1)),
        target=float(rng.standard_normal()),
    )


def batch_of(graphs, config):
    return collate([
        prepare_graph(g, config.node_vocab_sizes, config.edge_vocab_sizes,
                      config.max_deg, config.max_spd, config.max_path_len)
        for g in graphs
    ])


def test_single_node_graph_runs_finite():
    config = small_config()
    params = mo.init_model_params(np.random.default_rng(0), config)
    g = gr.make_graph(1, [], node_feats=[[1]])
    pred = mo.forward(params, config, batch_of([g], config))
    assert pred.shape == (1,)
    assert np.isfinite(pred.data).all()


def test_batch_matches_individual_forwards():
    rng = np.random.default_rng(1)
    config = small_config()
    params = mo.init_model_params(rng, config)
    graphs = [random_graph(rng, n) for n in (3, 6, 5, 2)]
    batched = mo.forward(params, config, batch_of(graphs, config)).data
    singles = np.array([mo.forward(params, config, batch_of([g], config)).data[0] for g in graphs])
    assert np.allclose(batched, singles, atol=1e-10)


def test_padding_slots_are_inert():
    rng = np.random.default_rng(2)
    config = small_config()
    params = mo.init_model_params(rng, config)
    g = random_graph(rng, 5)
    b = batch_of([g], config)
    n, pad = b.num_slots, 3

    def grow(a, shape, fill=0):
        out = np.full(shape, fill, dtype=a.dtype)
        out[tuple(slice(0, s) for s in a.shape)] = a
        return out

    vocab_w = b.path_probs.shape[-1]
    bigger = Batch(
        node_idx=grow(b.node_idx, (1, n + pad, 1), fill=b.node_idx[0, -1, 0]),
        deg_in_idx=grow(b.deg_in_idx, (1, n + pad)),
        deg_out_idx=grow(b.deg_out_idx, (1, n + pad)),
        spd_codes=grow(b.spd_codes, (1, n + pad, n + pad)),
        path_probs=grow(b.path_probs, (1, n + pad, n + pad, config.max_path_len, vocab_w)),
        path_w=grow(b.path_w, (1, n + pad, n + pad, config.max_path_len)),
        pad_mask=grow(b.pad_mask, (1, n + pad), fill=False),
        vnode_pos=b.vnode_pos,
        targets=b.targets,
    )
    assert np.allclose(
        mo.forward(params, config, b).data, mo.forward(params, config, bigger).data, atol=1e-10
    )


def test_isomorphic_graphs_agree():
    rng = np.random.default_rng(3)
    config = small_config()
    params = mo.init_model_params(rng, config)
    for _ in range(10):
        g = random_graph(rng, int(rng.integers(3, 9)))
        base = mo.forward(params, config, batch_of([g], config)).data[0]
        for _ in range(5):
            gp = gr.permute_graph(g, rng.permutation(g.num_nodes))
            got = mo.forward(params, config, batch_of([gp], config)).data[0]
            assert abs(got - base) < 1e-6


def test_depth_zero_closed_form():
    rng = np.random.default_rng(4)
    config = small_config(num_layers=0)
    params = mo.init_model_params(rng, config)
    g = random_graph(rng, 4)
    pred = mo.forward(params, config, batch_of([g], config)).data[0]

    # by hand: the readout row is the aggregation node's embedded input
    vrow = params.node_feat_embed[0].data[config.node_vocab_sizes[0]]
    vrow = vrow + params.enc.z_in.data[config.max_deg + 1] + params.enc.z_out.data[config.max_deg + 1]
    mu, var = vrow.mean(), vrow.var()
    normed = (vrow - mu) / np.sqrt(var + 1e-5)
    expect = normed @ params.head_w.data[:, 0] + params.head_b.data[0]
    assert abs(pred - expect) < 1e-12


def test_bias_assembly_matches_per_graph_ops():
    rng = np.random.default_rng(5)
    config = small_config()
    params = mo.init_model_params(rng, config)
    params.enc.b_spatial.data[...] = rng.standard_normal(params.enc.b_spatial.shape)
    g = random_graph(rng, 6)
    g2, sf2 = gr.attach_virtual_node(g, gr.structural_features(g, config.max_path_len))
    xe = enc.embed_edge_features(g2.edge_feats, params.enc)
    ref = enc.assemble_attention_bias(
        enc.spatial_bias(sf2, params.enc), enc.edge_bias(sf2, xe, params.enc)
    ).data
    got = mo.attention_bias_for_batch(params, config, batch_of([g], config)).data[0]
    assert np.allclose(got, ref, atol=1e-12)


def test_flags_disable_each_signal():
    rng = np.random.default_rng(6)
    config = small_config()
    params = mo.init_model_params(rng, config)
    params.enc.b_spatial.data[...] = 1.0
    b = batch_of([random_graph(rng, 5)], config)
    full = mo.attention_bias_for_batch(params, config, b).data
    bare = mo.attention_bias_for_batch(
        params, small_config(use_spatial=False, use_edge=False), b
    ).data
    assert np.array_equal(bare, np.zeros_like(bare))
    assert not np.array_equal(full, bare)
    # centrality off: input embedding loses the degree rows
    c_off = small_config(use_centrality=False)
    p2 = mo.init_model_params(np.random.default_rng(6), c_off)
    assert not np.allclose(
        mo.forward(params, config, b).data, mo.forward(p2, c_off, b).data
    )


def test_loss_values_and_gradients():
    pred = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    assert mo.loss_fn(pred, np.array([1.0, 2.0]), "regression").item() == 0.0
    assert abs(mo.loss_fn(Tensor(np.zeros(1)), np.array([1.0]), "binary").item() - np.log(2.0)) < 1e-12

    rng = np.random.default_rng(7)
    t_reg = rng.standard_normal(6) + 3.0
    t_bin = rng.integers(0, 2, size=6).astype(np.float64)
    assert ad.finite_difference_check(lambda p: mo.loss_fn(p, t_reg, "regression"), Tensor(rng.standard_normal(6))) < 1e-6
    assert ad.finite_difference_check(lambda p: mo.loss_fn(p, t_bin, "binary"), Tensor(rng.standard_normal(6))) < 1e-6

    with pytest.raises(ValueError, match="targets"):
        mo.loss_fn(pred, np.array([1.0, np.nan]), "regression")
    with pytest.raises(ValueError, match="task"):
        mo.loss_fn(pred, np.array([1.0, 2.0]), "hinge")


def test_gradients_reach_every_parameter():
    rng = np.random.default_rng(8)
    config = small_config()
    params = mo.init_model_params(rng, config)
    graphs = [random_graph(rng, n) for n in (4, 5)]
    b = batch_of(graphs, config)
    loss = mo.loss_fn(mo.forward(params, config, b), b.targets, "regression")
    loss.backward()
    for name, p in params.named_parameters():
        assert p.grad is not None, f"no gradient for {name}"
        assert np.all(np.isfinite(p.grad)), f"non-finite gradient for {name}"


def test_forward_shape_mismatches_raise():
    rng = np.random.default_rng(9)
    config = small_config()
    params = mo.init_model_params(rng, config)
    b = batch_of([random_graph(rng, 4)], config)
    with pytest.raises(ValueError, match="layer count"):
        mo.forward(params, small_config(num_layers=5), b)
    params2 = mo.init_model_params(rng, small_config(node_vocab_sizes=(3, 2)))
    with pytest.raises(ValueError, match="feature slots"):
        mo.forward(params2, config, b)


def test_config_validation():
    with pytest.raises(ValueError, match="divisible"):
        small_config(d=10, num_heads=4)
    with pytest.raises(ValueError, match="dropout_attn"):
        small_config(dropout_attn=1.0)
    with pytest.raises(ValueError, match="task"):
        small_config(task="multiclass")
    with pytest.raises(ValueError, match="node feature"):
        small_config(node_vocab_sizes=())


# ------------------------------------------------------------------ oracle


def test_reference_mean_on_path():
    rng = np.random.default_rng(10)
    h = rng.standard_normal((3, 4))
    out = mo.reference_gnn_step(gr.path_graph(3), h, "MEAN")
    assert np.allclose(out[1], (h[0] + h[2]) / 2.0, atol=1e-15)
    assert np.allclose(out[0], h[1], atol=1e-15)


def test_reference_sum_is_degree_times_mean_when_regular():
    rng = np.random.default_rng(11)
    g = gr.cycle_graph(6)
    h = rng.standard_normal((6, 3))
    assert np.allclose(
        mo.reference_gnn_step(g, h, "SUM"), 2.0 * mo.reference_gnn_step(g, h, "MEAN"), atol=1e-14
    )


def test_reference_max_with_one_hot_rows_marks_neighbors():
    g = gr.path_graph(3)
    h = np.eye(3)
    out = mo.reference_gnn_step(g, h, "MAX")
    expect = np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]], dtype=np.float64)
    assert np.array_equal(out, expect)


def test_reference_isolated_node_aggregates_to_zero():
    g = gr.make_graph(3, [(0, 1)])
    out = mo.reference_gnn_step(g, np.ones((3, 2)), "MAX")
    assert np.array_equal(out[2], np.zeros(2))


def test_reference_combine_hook():
    g = gr.path_graph(3)
    h = np.ones((3, 2))
    out = mo.reference_gnn_step(g, h, "SUM", combine=lambda own, agg: own + 2.0 * agg)
    assert np.allclose(out[1], 1.0 + 2.0 * 2.0, atol=1e-15)


def test_reference_readout():
    rng = np.random.default_rng(12)
    h = rng.standard_normal((5, 3))
    assert np.allclose(mo.reference_readout(h, "MEAN"), h.mean(axis=0), atol=1e-15)
    assert np.allclose(mo.reference_readout(h, "SUM"), 5.0 * mo.reference_readout(h, "MEAN"), atol=1e-13)
    assert np.allclose(mo.reference_readout(np.full((4, 3), 2.5), "MEAN"), 2.5, atol=1e-15)
    perm = rng.permutation(5)
    assert np.allclose(mo.reference_readout(h[perm], "SUM"), mo.reference_readout(h, "SUM"), atol=1e-13)


def test_reference_kind_validation():
    with pytest.raises(ValueError):
        mo.reference_gnn_step(gr.path_graph(2), np.zeros((2, 1)), "MEDIAN")
    with pytest.raises(ValueError):
        mo.reference_readout(np.zeros((2, 1)), "MAX")
    with pytest.raises(ValueError):
        mo.ReferenceGNN(aggregation="MEDIAN")
    gnn = mo.ReferenceGNN(aggregation="MEAN", readout="SUM")
    h = np.ones((3, 2))
    assert np.allclose(gnn.read(gnn.step(gr.path_graph(3), h)), [3.0, 3.0], atol=1e-15)
