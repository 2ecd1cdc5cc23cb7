"""Optimizer arithmetic, schedule, adversarial augmentation, and the run loop."""

import filecmp
import os

import numpy as np
import pytest

import graphormer_kit.training as training
from graphormer_kit.autodiff import Tensor
from graphormer_kit.batching import collate, prepare_graph
from graphormer_kit.graphs import make_graph
from graphormer_kit.model import ModelConfig, forward, init_model_params
from graphormer_kit.training import (
    FlagConfig,
    OptimConfig,
    TrainingDiverged,
    TrainSettings,
    adamw_step,
    clip_gradients,
    evaluate,
    flag_gradients,
    init_optim_state,
    load_checkpoint,
    lr_at,
    plain_gradients,
    restore_params,
    save_checkpoint,
    train,
)


def ring_graph(n, target=None):
    return make_graph(
        n, [(i, (i + 1) % n) for i in range(n)],
        node_feats=np.zeros((n, 1), dtype=np.int64),
        target=float(n) if target is None else target,
    )


def toy_dataset(count=10, lo=4, hi=8, seed=0):
    rng = np.random.default_rng(seed)
    return [ring_graph(int(rng.integers(lo, hi))) for _ in range(count)]


def toy_config(**kw):
    base = dict(num_layers=1, d=8, num_heads=2, d_edge=2, node_vocab_sizes=(1,),
                edge_vocab_sizes=(), max_deg=8, max_spd=6, max_path_len=4)
    base.update(kw)
    return ModelConfig(**base)


def toy_batch(config, count=4, seed=0):
    graphs = toy_dataset(count, seed=seed)
    prepared = [
        prepare_graph(g, list(config.node_vocab_sizes), list(config.edge_vocab_sizes),
                      config.max_deg, config.max_spd, config.max_path_len)
        for g in graphs
    ]
    return collate(prepared)


# -------------------------------------------------------------------- schedule


def test_lr_schedule_hand_values():
    cfg = OptimConfig(peak_lr=1e-3, warmup_steps=10, total_steps=100)
    assert lr_at(0, cfg) == 0.0
    assert lr_at(5, cfg) == pytest.approx(5e-4)
    assert lr_at(10, cfg) == pytest.approx(1e-3)
    assert lr_at(55, cfg) == pytest.approx(1e-3 * 45 / 90)
    assert lr_at(100, cfg) == 0.0
    assert lr_at(250, cfg) == 0.0


def test_lr_schedule_without_warmup_starts_near_peak():
    cfg = OptimConfig(peak_lr=2e-3, warmup_steps=0, total_steps=4)
    assert lr_at(1, cfg) == pytest.approx(2e-3 * 3 / 4)
    assert lr_at(4, cfg) == 0.0


def test_optim_config_validation():
    with pytest.raises(ValueError, match="warmup_steps"):
        OptimConfig(warmup_steps=11, total_steps=10).validate()
    with pytest.raises(ValueError, match="peak_lr"):
        OptimConfig(peak_lr=0.0).validate()
    with pytest.raises(ValueError, match="beta2"):
        OptimConfig(beta2=1.0).validate()


# -------------------------------------------------------------------- adamw


def test_adamw_single_step_matches_hand_formula():
    cfg = OptimConfig(peak_lr=1e-2, warmup_steps=0, total_steps=2,
                      weight_decay=0.0, clip_norm=0.0)
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    named = {"p": p}
    state = init_optim_state(named.items())
    g = np.array([0.5, -0.25])
    lr = adamw_step(named, {"p": g}, state, cfg)

    assert lr == pytest.approx(lr_at(1, cfg))
    m = 0.1 * g
    v = 0.001 * g * g
    mhat = m / (1 - 0.9)
    vhat = v / (1 - 0.999)
    want = np.array([1.0, -2.0]) - lr * mhat / (np.sqrt(vhat) + 1e-8)
    np.testing.assert_allclose(p.data, want, atol=1e-12)


def test_adamw_three_steps_match_independent_replica():
    cfg = OptimConfig(peak_lr=3e-3, warmup_steps=1, total_steps=5,
                      weight_decay=0.01, clip_norm=0.0)
    rng = np.random.default_rng(3)
    init = rng.normal(size=(4,))
    grads = [rng.normal(size=(4,)) for _ in range(3)]

    p = Tensor(init.copy(), requires_grad=True)
    named = {"w": p}
    state = init_optim_state(named.items())
    for g in grads:
        adamw_step(named, {"w": g}, state, cfg)

    # replica written independently of the implementation above
    x = init.copy()
    m = np.zeros(4)
    v = np.zeros(4)
    for t, g in enumerate(grads, start=1):
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        lr = lr_at(t, cfg)
        step = lr * ((m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8))
        x = x - step - lr * 0.01 * x
    np.testing.assert_allclose(p.data, x, atol=1e-10)


def test_weight_decay_is_decoupled_from_gradient():
    # zero gradient: the Adam term vanishes but decay still shrinks the weight
    cfg = OptimConfig(peak_lr=1e-2, warmup_steps=0, total_steps=2, weight_decay=0.1)
    p = Tensor(np.array([4.0]), requires_grad=True)
    named = {"p": p}
    state = init_optim_state(named.items())
    lr = adamw_step(named, {"p": np.zeros(1)}, state, cfg)
    np.testing.assert_allclose(p.data, 4.0 * (1 - lr * 0.1), atol=1e-15)


def test_adamw_rejects_non_finite_gradients():
    cfg = OptimConfig()
    p = Tensor(np.zeros(2), requires_grad=True)
    named = {"bad_param": p, "fine": Tensor(np.zeros(2), requires_grad=True)}
    state = init_optim_state(named.items())
    grads = {"bad_param": np.array([np.nan, 0.0]), "fine": np.zeros(2)}
    with pytest.raises(RuntimeError, match="bad_param"):
        adamw_step(named, grads, state, cfg)


def test_clip_rescales_to_global_norm():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    clipped, norm = clip_gradients(grads, 1.0)
    assert norm == pytest.approx(5.0)
    total = np.sqrt(sum(float(np.sum(g * g)) for g in clipped.values()))
    assert total == pytest.approx(1.0, abs=1e-12)
    # under the bound, and with clipping disabled, gradients pass through
    same, _ = clip_gradients(grads, 10.0)
    np.testing.assert_array_equal(same["a"], grads["a"])
    same, _ = clip_gradients(grads, 0.0)
    np.testing.assert_array_equal(same["b"], grads["b"])


# --------------------------------------------------------------- augmentation


def test_flag_config_validation():
    with pytest.raises(ValueError, match="steps"):
        FlagConfig(steps=0).validate()
    with pytest.raises(ValueError, match="alpha"):
        FlagConfig(alpha=0.0).validate()
    with pytest.raises(ValueError, match="ball"):
        FlagConfig(ball=-1.0).validate()


def test_flag_gradients_approach_plain_as_alpha_vanishes():
    config = toy_config()
    rng = np.random.default_rng(5)
    params = init_model_params(rng, config)
    batch = toy_batch(config)

    plain, _ = plain_gradients(params, config, batch, np.random.default_rng(0))
    fl, _, _ = flag_gradients(params, config, batch, np.random.default_rng(0),
                              FlagConfig(alpha=1e-9, steps=2))
    worst = max(np.max(np.abs(plain[k] - fl[k])) for k in plain)
    assert worst < 1e-4


def test_flag_projection_keeps_delta_in_ball():
    config = toy_config()
    rng = np.random.default_rng(6)
    params = init_model_params(rng, config)
    batch = toy_batch(config)
    ball = 0.01
    # ascent step far larger than the ball: only the projection can hold it
    _, _, delta_maxes = flag_gradients(params, config, batch, np.random.default_rng(1),
                                       FlagConfig(alpha=0.5, steps=3, ball=ball))
    assert len(delta_maxes) == 3
    assert all(dm <= ball + 1e-12 for dm in delta_maxes)


def test_flag_multi_step_is_deterministic():
    config = toy_config()
    params = init_model_params(np.random.default_rng(7), config)
    batch = toy_batch(config)
    fcfg = FlagConfig(alpha=0.02, steps=4, ball=0.05)
    g1, l1, d1 = flag_gradients(params, config, batch, np.random.default_rng(42), fcfg)
    g2, l2, d2 = flag_gradients(params, config, batch, np.random.default_rng(42), fcfg)
    assert l1 == l2 and d1 == d2
    for k in g1:
        np.testing.assert_array_equal(g1[k], g2[k])


def test_flag_averages_parameter_gradients():
    # with a deterministic forward pass, the averaged multi-step gradients sit
    # near the plain ones; a gross scaling bug (sum instead of mean) would not
    config = toy_config()
    params = init_model_params(np.random.default_rng(8), config)
    batch = toy_batch(config)
    plain, _ = plain_gradients(params, config, batch, np.random.default_rng(0))
    fl, _, _ = flag_gradients(params, config, batch, np.random.default_rng(2),
                              FlagConfig(alpha=1e-6, steps=5))
    num = sum(float(np.sum(plain[k] * fl[k])) for k in plain)
    den = np.sqrt(sum(float(np.sum(plain[k] ** 2)) for k in plain))
    den *= np.sqrt(sum(float(np.sum(fl[k] ** 2)) for k in fl))
    assert num / den > 0.999
    ratio = sum(float(np.sum(np.abs(fl[k]))) for k in fl) / sum(
        float(np.sum(np.abs(plain[k]))) for k in plain)
    assert 0.8 < ratio < 1.2


# ------------------------------------------------------------------ run loop


def test_evaluate_constant_model_hand_value():
    # a depth-zero model predicts the same value for every graph, so the
    # metric reduces to mean absolute deviation from that constant
    config = toy_config(num_layers=0)
    params = init_model_params(np.random.default_rng(1), config)
    graphs = [ring_graph(4, target=1.0), ring_graph(5, target=2.0), ring_graph(6, target=7.0)]
    prepared = [
        prepare_graph(g, [1], [], config.max_deg, config.max_spd, config.max_path_len)
        for g in graphs
    ]
    c = float(forward(params, config, collate(prepared[:1])).data[0])
    got = evaluate(params, config, prepared, batch_size=2)
    want = np.mean([abs(c - 1.0), abs(c - 2.0), abs(c - 7.0)])
    assert got == pytest.approx(want, abs=1e-10)


def test_evaluate_rejects_empty_split():
    config = toy_config()
    params = init_model_params(np.random.default_rng(1), config)
    with pytest.raises(ValueError, match="empty"):
        evaluate(params, config, [])


def run_settings(tmp_path, name, **kw):
    base = dict(seed=1, batch_size=4, valid_count=2, out_dir=str(tmp_path / name))
    base.update(kw)
    return TrainSettings(**base)


def test_train_writes_expected_artifacts(tmp_path):
    graphs = toy_dataset()
    cfg = toy_config()
    optim = OptimConfig(peak_lr=1e-3, warmup_steps=2, total_steps=6)
    res = train(graphs, cfg, optim, run_settings(tmp_path, "run"))

    assert res.steps == 6
    assert os.path.exists(res.metrics_path)
    assert os.path.exists(res.best_checkpoint)
    assert os.path.exists(res.latest_checkpoint)
    with open(res.metrics_path) as f:
        lines = f.read().strip().split("\n")
    assert lines[0] == "step,lr,train_loss,valid_metric"
    assert len(lines) == 7  # header + one row per step
    for i, line in enumerate(lines[1:], start=1):
        step, lr, loss, valid = line.split(",")
        assert int(step) == i
        assert float(lr) == pytest.approx(lr_at(i, optim))
        assert np.isfinite(float(loss))
    # the final row always carries a validation measurement
    assert lines[-1].split(",")[3] != ""

    meta, arrays = load_checkpoint(res.latest_checkpoint)
    assert meta["step"] == 6
    assert any(k.startswith("param.") for k in arrays)
    assert any(k.startswith("adam_m.") for k in arrays)


def test_same_seed_runs_are_byte_identical(tmp_path):
    graphs = toy_dataset()
    cfg = toy_config()
    optim = OptimConfig(peak_lr=1e-3, warmup_steps=2, total_steps=5)
    r1 = train(graphs, cfg, optim, run_settings(tmp_path, "a"))
    r2 = train(graphs, cfg, optim, run_settings(tmp_path, "b"))
    assert filecmp.cmp(r1.metrics_path, r2.metrics_path, shallow=False)
    assert filecmp.cmp(r1.best_checkpoint, r2.best_checkpoint, shallow=False)
    assert filecmp.cmp(r1.latest_checkpoint, r2.latest_checkpoint, shallow=False)


def test_different_seed_changes_the_run(tmp_path):
    graphs = toy_dataset()
    cfg = toy_config()
    optim = OptimConfig(peak_lr=1e-3, warmup_steps=2, total_steps=5)
    r1 = train(graphs, cfg, optim, run_settings(tmp_path, "a"))
    r2 = train(graphs, cfg, optim, run_settings(tmp_path, "b", seed=2))
    assert not filecmp.cmp(r1.latest_checkpoint, r2.latest_checkpoint, shallow=False)


def test_resume_reproduces_straight_run_bitwise(tmp_path):
    graphs = toy_dataset()
    cfg = toy_config()
    optim = OptimConfig(peak_lr=1e-3, warmup_steps=2, total_steps=6)

    straight = train(graphs, cfg, optim, run_settings(tmp_path, "straight"))
    part1 = train(graphs, cfg, optim, run_settings(tmp_path, "split", stop_after=3))
    assert part1.steps == 3
    part2 = train(graphs, cfg, optim, run_settings(tmp_path, "split"),
                  resume_from=part1.latest_checkpoint)
    assert part2.steps == 6

    _, want = load_checkpoint(straight.latest_checkpoint)
    _, got = load_checkpoint(part2.latest_checkpoint)
    assert set(want) == set(got)
    for k in want:
        np.testing.assert_array_equal(want[k], got[k])


def test_resume_rejects_mismatched_config(tmp_path):
    graphs = toy_dataset()
    optim = OptimConfig(peak_lr=1e-3, warmup_steps=2, total_steps=6)
    part1 = train(graphs, toy_config(), optim,
                  run_settings(tmp_path, "a", stop_after=2))
    with pytest.raises(ValueError, match="does not match"):
        train(graphs, toy_config(d=16), optim, run_settings(tmp_path, "b"),
              resume_from=part1.latest_checkpoint)


def test_divergence_aborts_and_keeps_last_checkpoint(tmp_path, monkeypatch):
    graphs = toy_dataset()
    cfg = toy_config()

    def exploding(params, config, batch, rng):
        named = dict(params.named_parameters())
        return {k: np.zeros_like(t.data) for k, t in named.items()}, float("nan")

    monkeypatch.setattr(training, "plain_gradients", exploding)
    settings = run_settings(tmp_path, "boom")
    with pytest.raises(TrainingDiverged, match="step 1"):
        train(graphs, cfg, OptimConfig(total_steps=4), settings)
    # the pre-training snapshot survives the abort
    meta, _ = load_checkpoint(os.path.join(settings.out_dir, "latest.ckpt"))
    assert meta["step"] == 0


def test_non_finite_gradients_abort_with_parameter_name(tmp_path, monkeypatch):
    graphs = toy_dataset()
    cfg = toy_config()

    def poisoned(params, config, batch, rng):
        named = dict(params.named_parameters())
        grads = {k: np.zeros_like(t.data) for k, t in named.items()}
        grads["head_w"][:] = np.inf
        return grads, 1.0

    monkeypatch.setattr(training, "plain_gradients", poisoned)
    with pytest.raises(RuntimeError, match="head_w"):
        train(graphs, cfg, OptimConfig(total_steps=4), run_settings(tmp_path, "inf"))


def test_train_input_validation(tmp_path):
    cfg = toy_config()
    optim = OptimConfig(total_steps=2)
    with pytest.raises(ValueError, match="empty"):
        train([], cfg, optim, run_settings(tmp_path, "a"))
    with pytest.raises(ValueError, match="valid_count"):
        train(toy_dataset(3), cfg, optim, run_settings(tmp_path, "b", valid_count=3))


def test_checkpoint_roundtrip_restores_state(tmp_path):
    cfg = toy_config()
    params = init_model_params(np.random.default_rng(9), cfg)
    state = init_optim_state(params.named_parameters())
    state.step = 17
    rng = np.random.default_rng(123)
    rng.normal(size=100)  # advance so the saved state is nontrivial
    perm = np.array([2, 0, 1], dtype=np.int64)
    path = str(tmp_path / "snap.ckpt")
    save_checkpoint(path, params, state, {"model": "x"}, rng, perm, 1, 0.5, 12)

    meta, arrays = load_checkpoint(path)
    assert meta["step"] == 17 and meta["perm_offset"] == 1
    assert meta["best_valid"] == 0.5 and meta["best_step"] == 12
    np.testing.assert_array_equal(arrays["perm"], perm)

    fresh = init_model_params(np.random.default_rng(1), cfg)
    fresh_state = init_optim_state(fresh.named_parameters())
    restore_params(fresh, fresh_state, meta, arrays)
    for (_, a), (_, b) in zip(fresh.named_parameters(), params.named_parameters()):
        np.testing.assert_array_equal(a.data, b.data)
    assert fresh_state.step == 17

    rng2 = np.random.default_rng(0)
    rng2.bit_generator.state = meta["rng_state"]
    assert rng2.normal() == rng.normal()


def test_flag_training_runs_and_is_deterministic(tmp_path):
    graphs = toy_dataset()
    cfg = toy_config()
    optim = OptimConfig(peak_lr=1e-3, warmup_steps=1, total_steps=4)
    fcfg = FlagConfig(alpha=0.01, steps=2, ball=0.02)
    r1 = train(graphs, cfg, optim, run_settings(tmp_path, "f1"), flag_cfg=fcfg)
    r2 = train(graphs, cfg, optim, run_settings(tmp_path, "f2"), flag_cfg=fcfg)
    assert filecmp.cmp(r1.latest_checkpoint, r2.latest_checkpoint, shallow=False)
    # augmentation changes the trajectory relative to the plain loop
    r3 = train(graphs, cfg, optim, run_settings(tmp_path, "p"))
    assert not filecmp.cmp(r1.latest_checkpoint, r3.latest_checkpoint, shallow=False)
