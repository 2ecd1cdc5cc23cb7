"""Flat key=value run configuration.

One line per setting, ``#`` comments and blank lines ignored. Every key is
typed against a fixed schema; unknown or repeated keys are errors, missing
keys fall back to the dataclass defaults. Feature vocabulary sizes are never
set here: they belong to the dataset header and are merged in at run time.
"""

from __future__ import annotations

from dataclasses import dataclass

from .model import ModelConfig
from .training import FlagConfig, OptimConfig, TrainSettings


def _parse_bool(raw: str) -> bool:
    if raw == "true":
        return True
    if raw == "false":
        return False
    raise ValueError(f"expected true or false, got {raw!r}")


# key -> (section, field, parser); key names mirror the dataclass fields
_SCHEMA = {}
for _f, _t in (
    ("num_layers", int), ("d", int), ("num_heads", int), ("d_edge", int),
    ("max_deg", int), ("max_spd", int), ("max_path_len", int),
    ("dropout_ffn", float), ("dropout_attn", float), ("dropout_embed", float),
    ("task", str), ("final_ln", _parse_bool),
    ("use_spatial", _parse_bool), ("use_centrality", _parse_bool), ("use_edge", _parse_bool),
):
    _SCHEMA[_f] = ("model", _f, _t)
for _f, _t in (
    ("peak_lr", float), ("warmup_steps", int), ("total_steps", int),
    ("beta1", float), ("beta2", float), ("eps", float),
    ("weight_decay", float), ("clip_norm", float),
):
    _SCHEMA[_f] = ("optim", _f, _t)
for _f, _t in (
    ("seed", int), ("batch_size", int), ("valid_count", int),
    ("eval_every", int), ("checkpoint_every", int),
):
    _SCHEMA[_f] = ("settings", _f, _t)
for _f, _t in (("flag_alpha", float), ("flag_steps", int), ("flag_ball", float)):
    _SCHEMA[_f] = ("flag", _f.removeprefix("flag_"), _t)


@dataclass(eq=False)
class RunConfig:
    model: ModelConfig
    optim: OptimConfig
    settings: TrainSettings
    flag: FlagConfig | None  # None when flag_steps is 0 (the default)


def parse_run_config(text: str, source: str = "<config>") -> RunConfig:
    values = {"model": {}, "optim": {}, "settings": {}, "flag": {}}
    seen = set()
    for lineno, line in enumerate(text.split("\n"), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ValueError(f"{source}:{lineno}: expected key=value, got {stripped!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in _SCHEMA:
            raise ValueError(f"{source}:{lineno}: unknown key {key!r}")
        if key in seen:
            raise ValueError(f"{source}:{lineno}: repeated key {key!r}")
        seen.add(key)
        section, field, parser = _SCHEMA[key]
        try:
            values[section][field] = parser(raw)
        except ValueError as e:
            raise ValueError(f"{source}:{lineno}: bad value for {key!r}: {e}") from e

    model = ModelConfig(**values["model"]).validate()
    optim = OptimConfig(**values["optim"]).validate()
    settings = TrainSettings(**values["settings"]).validate()
    flag_fields = values["flag"]
    if flag_fields.get("steps", 0) == 0:
        if any(k != "steps" for k in flag_fields):
            raise ValueError(f"{source}: flag_alpha/flag_ball require flag_steps >= 1")
        flag = None
    else:
        flag = FlagConfig(**flag_fields).validate()
    return RunConfig(model=model, optim=optim, settings=settings, flag=flag)


def load_run_config(path: str) -> RunConfig:
    with open(path, encoding="utf-8") as f:
        return parse_run_config(f.read(), source=path)
