"""Training loop: AdamW, warmup/decay schedule, adversarial input augmentation.

Everything is driven by one seeded numpy Generator so that two runs with the
same config produce byte-identical metrics files and checkpoints. Divergence
(non-finite loss) aborts the run but leaves the last good checkpoint on disk;
non-finite gradients abort with the offending parameter named.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import serialize
from .autodiff import Tensor, scale
from .batching import Batch, PreparedGraph, collate, prepare_graph
from .model import (
    ModelConfig,
    ModelParams,
    finite_difference_loss_check,
    forward,
    init_model_params,
    loss_fn,
)
from .graphs import Graph, make_graph


class TrainingDiverged(RuntimeError):
    """Raised when the training loss stops being finite."""


# ------------------------------------------------------------------ optimizer


@dataclass(eq=False)
class OptimConfig:
    peak_lr: float = 1e-3
    warmup_steps: int = 0
    total_steps: int = 1000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    clip_norm: float = 5.0  # 0 disables clipping

    def validate(self):
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ValueError("warmup_steps must lie in [0, total_steps]")
        if self.peak_lr <= 0:
            raise ValueError("peak_lr must be positive")
        for name in ("beta1", "beta2"):
            b = getattr(self, name)
            if not 0.0 <= b < 1.0:
                raise ValueError(f"{name} must be in [0, 1), got {b}")
        if self.clip_norm < 0:
            raise ValueError("clip_norm must be >= 0")
        return self


@dataclass(eq=False)
class OptimState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def init_optim_state(named_params) -> OptimState:
    state = OptimState()
    for name, t in named_params:
        state.m[name] = np.zeros_like(t.data)
        state.v[name] = np.zeros_like(t.data)
    return state


def lr_at(step: int, cfg: OptimConfig) -> float:
    """Linear warmup from 0 to peak, then linear decay back to 0.

    ``step`` counts completed updates starting at 1; lr_at(0) is 0 by
    construction and lr_at(total_steps) is 0 again.
    """
    if step <= 0:
        return 0.0
    if step >= cfg.total_steps:
        return 0.0
    if cfg.warmup_steps and step <= cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    span = cfg.total_steps - cfg.warmup_steps
    return cfg.peak_lr * (cfg.total_steps - step) / span


def clip_gradients(grads: dict, max_norm: float):
    """Scale the whole gradient dict so its global L2 norm is <= max_norm."""
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g * g))
    norm = float(np.sqrt(total))
    # leave non-finite gradients untouched so the optimizer can report them
    if max_norm > 0 and np.isfinite(norm) and norm > max_norm:
        factor = max_norm / norm
        grads = {k: g * factor for k, g in grads.items()}
    return grads, norm


def adamw_step(named_params: dict, grads: dict, state: OptimState, cfg: OptimConfig) -> float:
    """One decoupled-weight-decay Adam update in place. Returns the lr used."""
    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise RuntimeError(
            f"non-finite gradient at step {state.step + 1} for: {', '.join(sorted(bad))}"
        )
    state.step += 1
    lr = lr_at(state.step, cfg)
    bc1 = 1.0 - cfg.beta1 ** state.step
    bc2 = 1.0 - cfg.beta2 ** state.step
    for name, tensor in named_params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        if cfg.weight_decay:
            update = update + cfg.weight_decay * tensor.data
        tensor.data -= lr * update
    return lr


# ------------------------------------------------------------ gradient passes


@dataclass(eq=False)
class FlagConfig:
    """Adversarial perturbation of the input node embeddings.

    ``steps`` inner ascent iterations of size ``alpha`` each; parameter
    gradients from all iterations are averaged. ``ball`` > 0 projects the
    perturbation onto the L-inf ball of that radius after every ascent step.
    """

    alpha: float = 0.01
    steps: int = 3
    ball: float = 0.0

    def validate(self):
        if self.steps < 1:
            raise ValueError("adversarial augmentation needs steps >= 1")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.ball < 0:
            raise ValueError("ball must be >= 0")
        return self


def _grab_and_zero(named: dict) -> dict:
    out = {}
    for name, t in named.items():
        out[name] = t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
        t.zero_grad()
    return out


def plain_gradients(params: ModelParams, config: ModelConfig, batch: Batch,
                    rng: np.random.Generator):
    named = dict(params.named_parameters())
    for t in named.values():
        t.zero_grad()
    loss = loss_fn(forward(params, config, batch, training=True, rng=rng),
                   batch.targets, config.task)
    loss.backward()
    return _grab_and_zero(named), float(loss.data)


def flag_gradients(params: ModelParams, config: ModelConfig, batch: Batch,
                   rng: np.random.Generator, fcfg: FlagConfig):
    """Averaged gradients over ``fcfg.steps`` ascent iterations on the input delta.

    Returns (grads, mean loss, per-iteration max |delta|) so callers can check
    the projection invariant.
    """
    fcfg.validate()
    named = dict(params.named_parameters())
    for t in named.values():
        t.zero_grad()
    bsz, n = batch.pad_mask.shape
    delta = rng.uniform(-fcfg.alpha, fcfg.alpha, size=(bsz, n, config.d))
    if fcfg.ball > 0:
        delta = np.clip(delta, -fcfg.ball, fcfg.ball)
    inv_m = 1.0 / fcfg.steps
    losses = []
    delta_maxes = []
    for _ in range(fcfg.steps):
        dt = Tensor(delta.copy(), requires_grad=True)
        loss = loss_fn(
            forward(params, config, batch, training=True, rng=rng, input_delta=dt),
            batch.targets, config.task,
        )
        # scaling the loss by 1/m makes the accumulated parameter grads the
        # average; the delta ascent direction is unaffected by the scale
        scale(loss, inv_m).backward()
        losses.append(float(loss.data))
        g = dt.grad if dt.grad is not None else np.zeros_like(delta)
        gnorm = float(np.sqrt(np.sum(g * g)))
        if gnorm > 0:
            delta = delta + fcfg.alpha * (g / gnorm)
        if fcfg.ball > 0:
            delta = np.clip(delta, -fcfg.ball, fcfg.ball)
        delta_maxes.append(float(np.max(np.abs(delta))))
    return _grab_and_zero(named), float(np.mean(losses)), delta_maxes


def evaluate(params: ModelParams, config: ModelConfig, prepared: list,
             batch_size: int = 32) -> float:
    """Mean absolute error (regression) or mean log loss (binary), no dropout."""
    if not prepared:
        raise ValueError("cannot evaluate on an empty split")
    total = 0.0
    for start in range(0, len(prepared), batch_size):
        chunk = prepared[start : start + batch_size]
        batch = collate(chunk)
        loss = loss_fn(forward(params, config, batch), batch.targets, config.task)
        total += float(loss.data) * len(chunk)
    return total / len(prepared)


def gradcheck_model(seed: int, num_nodes: int = 6, h: float = 1e-5):
    """Finite-difference audit of a full small model on one random graph.

    Builds a two-layer model exercising every parameter family (feature
    embeddings, degree tables, distance bias, path-edge bias, attention,
    feed-forward, norms, head) and sweeps all coordinates. Returns
    (max relative error, worst parameter name).
    """
    rng = np.random.default_rng(seed)
    config = ModelConfig(num_layers=2, d=8, num_heads=2, d_edge=4,
                         node_vocab_sizes=(3,), edge_vocab_sizes=(4,),
                         max_deg=8, max_spd=6, max_path_len=4)
    n = num_nodes
    edges = [(i, (i + 1) % n) for i in range(n)]
    for i in range(n):
        if rng.random() < 0.4:
            chord = (i, (i + 2) % n)
            if chord[0] < chord[1] and chord not in edges:
                edges.append(chord)
    g = make_graph(
        n, edges,
        node_feats=rng.integers(0, 3, size=(n, 1)),
        edge_feats=rng.integers(0, 4, size=(len(edges), 1)),
        target=float(rng.normal()),
    )
    batch = collate([prepare_graph(g, [3], [4], config.max_deg, config.max_spd,
                                   config.max_path_len)])
    params = init_model_params(rng, config)
    return finite_difference_loss_check(params, config, batch, h=h)


# ------------------------------------------------------------------ run loop


@dataclass(eq=False)
class TrainSettings:
    seed: int = 0
    batch_size: int = 16
    valid_count: int = 0  # taken from the tail of the dataset, 0 = no split
    out_dir: str = "run"
    eval_every: int = 0  # 0 = at epoch boundaries
    checkpoint_every: int = 0  # extra "latest" saves; 0 = only start/end
    stop_after: int = 0  # pause the run at this step (0 = run to completion)

    def validate(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.valid_count < 0 or self.eval_every < 0 or self.checkpoint_every < 0:
            raise ValueError("counts must be >= 0")
        if self.stop_after < 0:
            raise ValueError("stop_after must be >= 0")
        return self


@dataclass(eq=False)
class TrainResult:
    steps: int
    best_valid: float
    best_step: int
    metrics_path: str
    best_checkpoint: str
    latest_checkpoint: str


def _full_config_dict(model_cfg, optim_cfg, settings, flag_cfg) -> dict:
    # out_dir and stop_after are operational, not part of the run's identity:
    # a resumed run must hash equal to the run it continues
    settings_dict = asdict(settings)
    settings_dict.pop("out_dir")
    settings_dict.pop("stop_after")
    return {
        "model": model_cfg.to_dict(),
        "optim": asdict(optim_cfg),
        "settings": settings_dict,
        "flag": asdict(flag_cfg) if flag_cfg is not None else None,
    }


def save_checkpoint(path: str, params: ModelParams, state: OptimState,
                    cfg_dict: dict, rng: np.random.Generator,
                    perm: np.ndarray, perm_offset: int,
                    best_valid: float, best_step: int,
                    valid_metric: float | None = None):
    named = params.named_parameters()
    arrays = [(f"param.{n}", t.data) for n, t in named]
    arrays += [(f"adam_m.{n}", state.m[n]) for n, _ in named]
    arrays += [(f"adam_v.{n}", state.v[n]) for n, _ in named]
    arrays.append(("perm", np.asarray(perm, dtype=np.int64)))
    meta = {
        "kind": "checkpoint",
        "config": cfg_dict,
        "config_hash": serialize.config_hash(cfg_dict),
        "step": state.step,
        "best_valid": best_valid,
        "best_step": best_step,
        "perm_offset": perm_offset,
        "rng_state": rng.bit_generator.state,
        # metric of the stored parameters, when one was just measured; lets
        # an offline evaluation cross-check the recorded number exactly
        "valid_metric_at_save": valid_metric,
    }
    serialize.save_container(path, meta, arrays)


def load_checkpoint(path: str):
    meta, arrays = serialize.load_container(path)
    if meta.get("kind") != "checkpoint":
        raise ValueError(f"{path}: not a checkpoint container")
    return meta, arrays


def restore_params(params: ModelParams, state: OptimState, meta: dict, arrays: dict):
    """Copy checkpoint arrays into live parameter/optimizer structures."""
    for name, t in params.named_parameters():
        key = f"param.{name}"
        if key not in arrays:
            raise ValueError(f"checkpoint is missing {key}")
        if arrays[key].shape != t.data.shape:
            raise ValueError(f"checkpoint {key} has shape {arrays[key].shape}, "
                             f"model expects {t.data.shape}")
        t.data = arrays[key].copy()
        state.m[name] = arrays[f"adam_m.{name}"].copy()
        state.v[name] = arrays[f"adam_v.{name}"].copy()
    state.step = int(meta["step"])


def _format_row(step: int, lr: float, train_loss: float, valid) -> str:
    valid_txt = "" if valid is None else repr(float(valid))
    return f"{step},{lr!r},{train_loss!r},{valid_txt}\n"


def train(graphs: list, model_cfg: ModelConfig, optim_cfg: OptimConfig,
          settings: TrainSettings, flag_cfg: FlagConfig | None = None,
          resume_from: str | None = None) -> TrainResult:
    """Run the full loop over ``graphs`` and leave artifacts in ``settings.out_dir``.

    Artifacts: metrics.csv (step, lr, train_loss, valid_metric), best.ckpt
    (lowest valid metric; final params when there is no valid split), and
    latest.ckpt (most recent state, incl. the pre-training state at step 0).
    """
    model_cfg.validate()
    optim_cfg.validate()
    settings.validate()
    if flag_cfg is not None:
        flag_cfg.validate()
    if not graphs:
        raise ValueError("cannot train on an empty dataset")
    if settings.valid_count >= len(graphs):
        raise ValueError("valid_count must leave at least one training graph")

    prepared = [
        prepare_graph(g, list(model_cfg.node_vocab_sizes), list(model_cfg.edge_vocab_sizes),
                      model_cfg.max_deg, model_cfg.max_spd, model_cfg.max_path_len)
        for g in graphs
    ]
    n_valid = settings.valid_count
    train_set = prepared[: len(prepared) - n_valid] if n_valid else prepared
    valid_set = prepared[len(prepared) - n_valid :] if n_valid else []

    os.makedirs(settings.out_dir, exist_ok=True)
    metrics_path = os.path.join(settings.out_dir, "metrics.csv")
    best_path = os.path.join(settings.out_dir, "best.ckpt")
    latest_path = os.path.join(settings.out_dir, "latest.ckpt")

    cfg_dict = _full_config_dict(model_cfg, optim_cfg, settings, flag_cfg)
    cfg_hash = serialize.config_hash(cfg_dict)

    rng = np.random.default_rng(settings.seed)
    params = init_model_params(rng, model_cfg)
    named = dict(params.named_parameters())
    state = init_optim_state(params.named_parameters())
    best_valid = float("inf")
    best_step = 0
    perm = np.arange(0, dtype=np.int64)
    pos = 0

    if resume_from is not None:
        meta, arrays = load_checkpoint(resume_from)
        if meta["config_hash"] != cfg_hash:
            raise ValueError("checkpoint config does not match the requested run config")
        restore_params(params, state, meta, arrays)
        rng.bit_generator.state = meta["rng_state"]
        perm = arrays["perm"].astype(np.int64)
        pos = int(meta["perm_offset"])
        best_valid = float(meta["best_valid"])
        best_step = int(meta["best_step"])
        metrics_file = open(metrics_path, "a")
    else:
        metrics_file = open(metrics_path, "w")
        metrics_file.write("step,lr,train_loss,valid_metric\n")
        save_checkpoint(latest_path, params, state, cfg_dict, rng, perm, pos,
                        best_valid, best_step)

    def run_eval():
        nonlocal best_valid, best_step
        if not valid_set:
            return None
        metric = evaluate(params, model_cfg, valid_set, settings.batch_size)
        if metric < best_valid:
            best_valid = metric
            best_step = state.step
            save_checkpoint(best_path, params, state, cfg_dict, rng, perm, pos,
                            best_valid, best_step, valid_metric=metric)
        return metric

    stop_at = settings.stop_after or optim_cfg.total_steps
    try:
        while state.step < min(optim_cfg.total_steps, stop_at):
            if pos >= len(perm):
                perm = rng.permutation(len(train_set)).astype(np.int64)
                pos = 0
            idxs = perm[pos : pos + settings.batch_size]
            pos += settings.batch_size
            epoch_end = pos >= len(perm)
            batch = collate([train_set[i] for i in idxs])

            if flag_cfg is not None:
                grads, loss_val, _ = flag_gradients(params, model_cfg, batch, rng, flag_cfg)
            else:
                grads, loss_val = plain_gradients(params, model_cfg, batch, rng)
            if not np.isfinite(loss_val):
                raise TrainingDiverged(
                    f"training loss became non-finite at step {state.step + 1}; "
                    f"last good checkpoint retained at {latest_path}"
                )
            grads, _ = clip_gradients(grads, optim_cfg.clip_norm)
            lr = adamw_step(named, grads, state, optim_cfg)

            final = state.step >= optim_cfg.total_steps
            want_eval = final or (
                settings.eval_every
                and state.step % settings.eval_every == 0
            ) or (not settings.eval_every and epoch_end)
            valid_metric = run_eval() if want_eval else None
            metrics_file.write(_format_row(state.step, lr, loss_val, valid_metric))
            metrics_file.flush()

            if settings.checkpoint_every and state.step % settings.checkpoint_every == 0:
                save_checkpoint(latest_path, params, state, cfg_dict, rng, perm, pos,
                                best_valid, best_step)
    finally:
        metrics_file.close()

    save_checkpoint(latest_path, params, state, cfg_dict, rng, perm, pos,
                    best_valid, best_step)
    if not valid_set:
        # no split to select on: the final state is the one worth keeping
        save_checkpoint(best_path, params, state, cfg_dict, rng, perm, pos,
                        best_valid, best_step)
    return TrainResult(
        steps=state.step,
        best_valid=best_valid,
        best_step=best_step,
        metrics_path=metrics_path,
        best_checkpoint=best_path,
        latest_checkpoint=latest_path,
    )
