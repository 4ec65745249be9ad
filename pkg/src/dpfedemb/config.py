"""Experiment configuration loaded from a TOML file.

Federated defaults: 32 users per virtual client, 64 clients per round, at
most 2048 examples per client, head LR scale 100, batch 32 and momentum 0.9
on both optimizers. The data defaults describe a desk-scale synthetic set.
Every field is validated before any work starts.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import sys
import typing
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    source: str = "synthetic"
    path: str = ""
    eval_path: str = ""
    num_users: int = 4096
    classes_per_user: int = 1
    examples_per_class: int = 20
    input_dim: int = 32
    noise_std: float = 0.1
    signal_dim: int = 16
    nuisance_std: float = 1.5
    basis_seed: int = 0
    eval_users: int = 100
    eval_examples_per_class: int = 10


@dataclass
class ModelConfig:
    hidden_dims: list = field(default_factory=lambda: [80])
    embed_dim: int = 32
    activation: str = "relu"
    l2_normalize_embedding: bool = False
    warm_start: str = ""


@dataclass
class FederatedConfig:
    users_per_vc: int = 32
    vcs_per_round: int = 64
    users_per_round: int = -1
    examples_cap: int = 2048
    rounds: int = 800


@dataclass
class ClientConfig:
    local_steps: int = 10
    batch_size: int = 32
    lr: float = 0.002
    head_lr_scale: float = 100.0
    momentum: float = 0.9
    freeze_ranges: list = field(default_factory=list)


@dataclass
class ServerConfig:
    lr: float = 0.2
    momentum: float = 0.9


@dataclass
class DpConfig:
    noise_multiplier: float = 0.0
    clip_norm: float = 0.6
    mechanism: str = "gaussian"
    delta: float = 1e-7
    adaptive_clip: bool = False
    target_quantile: float = 0.5
    clip_lr: float = 0.2


@dataclass
class EvalConfig:
    every: int = 0
    far: float = 1e-2
    metric: str = "cosine"
    minibatch: int = 0


@dataclass
class RunConfig:
    output_dir: str = "runs/default"
    checkpoint_every: int = 0
    threads: int = 1


@dataclass
class ExperimentConfig:
    seed: int = 0
    mode: str = "fedemb"
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    federated: FederatedConfig = field(default_factory=FederatedConfig)
    client: ClientConfig = field(default_factory=ClientConfig)
    server: ServerConfig = field(default_factory=ServerConfig)
    dp: DpConfig = field(default_factory=DpConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    run: RunConfig = field(default_factory=RunConfig)

    @property
    def users_per_round(self) -> int:
        f = self.federated
        return f.vcs_per_round * f.users_per_vc if f.users_per_round < 0 else f.users_per_round

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        """Hash of everything that can change results (not threads or paths)."""
        d = self.to_dict()
        d["run"] = {"checkpoint_every": d["run"]["checkpoint_every"]}
        blob = json.dumps(d, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()

    def validate(self) -> "ExperimentConfig":
        errors = []

        def check(cond, where, msg):
            if not cond:
                errors.append(f"{where}: {msg}")

        check(self.mode in ("fedavg", "fedemb"), "mode", "must be 'fedavg' or 'fedemb'")
        d = self.data
        check(d.source in ("synthetic", "csv"), "data.source", "must be 'synthetic' or 'csv'")
        if d.source == "csv":
            check(bool(d.path), "data.path", "required when source = 'csv'")
        else:
            for name in ("num_users", "classes_per_user", "examples_per_class", "input_dim", "signal_dim"):
                check(getattr(d, name) >= 1, f"data.{name}", "must be >= 1")
            check(d.signal_dim <= d.input_dim, "data.signal_dim", "must be <= data.input_dim")
            check(d.noise_std >= 0 and d.nuisance_std >= 0, "data.noise_std", "noise levels must be >= 0")
            check(d.eval_users >= 0, "data.eval_users", "must be >= 0")
            check(d.eval_examples_per_class >= 1, "data.eval_examples_per_class", "must be >= 1")
        m = self.model
        check(all(isinstance(h, int) and h >= 1 for h in m.hidden_dims), "model.hidden_dims",
              "must be a list of positive integers")
        check(m.embed_dim >= 1, "model.embed_dim", "must be >= 1")
        check(m.activation in ("relu", "tanh"), "model.activation", "must be 'relu' or 'tanh'")
        f = self.federated
        check(f.users_per_vc >= 1, "federated.users_per_vc", "must be >= 1")
        check(f.vcs_per_round >= 0, "federated.vcs_per_round", "must be >= 0")
        check(f.users_per_round >= -1, "federated.users_per_round", "must be >= 0 (or -1 for vcs_per_round*users_per_vc)")
        check(f.examples_cap >= 1, "federated.examples_cap", "must be >= 1")
        check(f.rounds >= 0, "federated.rounds", "must be >= 0")
        if d.source == "synthetic":
            check(self.users_per_round <= d.num_users, "federated.users_per_round",
                  f"{self.users_per_round} exceeds data.num_users = {d.num_users}")
        c = self.client
        check(c.local_steps >= 1, "client.local_steps", "must be >= 1")
        check(c.batch_size >= 1, "client.batch_size", "must be >= 1")
        check(c.lr >= 0, "client.lr", "must be >= 0")
        check(c.head_lr_scale >= 0, "client.head_lr_scale", "must be >= 0")
        check(0 <= c.momentum < 1, "client.momentum", "must be in [0, 1)")
        check(all(isinstance(r, list) and len(r) == 2 and 0 <= r[0] <= r[1] for r in c.freeze_ranges),
              "client.freeze_ranges", "must be a list of [start, stop) pairs")
        s = self.server
        check(s.lr >= 0, "server.lr", "must be >= 0")
        check(0 <= s.momentum < 1, "server.momentum", "must be in [0, 1)")
        p = self.dp
        check(p.noise_multiplier >= 0, "dp.noise_multiplier", "must be >= 0")
        check(p.clip_norm > 0, "dp.clip_norm", "must be > 0 (use inf to disable clipping)")
        check(p.mechanism in ("gaussian", "tree"), "dp.mechanism", "must be 'gaussian' or 'tree'")
        check(0 < p.delta < 1, "dp.delta", "must be in (0, 1)")
        check(not (p.noise_multiplier > 0 and math.isinf(p.clip_norm)), "dp.clip_norm",
              "must be finite when noise_multiplier > 0")
        check(0 < p.target_quantile < 1, "dp.target_quantile", "must be in (0, 1)")
        check(p.clip_lr > 0, "dp.clip_lr", "must be > 0")
        check(not (p.adaptive_clip and math.isinf(p.clip_norm)), "dp.clip_norm",
              "adaptive clipping needs a finite initial clip norm")
        e = self.eval
        check(e.every >= 0, "eval.every", "must be >= 0")
        check(0 < e.far <= 1, "eval.far", "must be in (0, 1]")
        check(e.metric in ("cosine", "inner"), "eval.metric", "must be 'cosine' or 'inner'")
        check(e.minibatch == 0 or e.minibatch >= 2, "eval.minibatch", "must be 0 (all pairs) or >= 2")
        r = self.run
        check(r.checkpoint_every >= 0, "run.checkpoint_every", "must be >= 0")
        check(r.threads >= 1, "run.threads", "must be >= 1")
        check(bool(r.output_dir), "run.output_dir", "must be set")
        if errors:
            raise ConfigError("invalid config:\n  " + "\n  ".join(errors))
        return self


def _coerce(value, annotation, where):
    origin = typing.get_origin(annotation) or annotation
    if annotation is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if annotation is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if annotation is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if annotation is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        return value
    return value


def _build(cls, raw: dict, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected a table")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"{where or 'top level'}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in raw:
            continue
        key = f"{where}.{f.name}" if where else f.name
        hint = hints[f.name]
        if dataclasses.is_dataclass(hint):
            kwargs[f.name] = _build(hint, raw[f.name], key)
        else:
            kwargs[f.name] = _coerce(raw[f.name], hint, key)
    return cls(**kwargs)


def config_from_dict(raw: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, raw, "").validate()


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(raw)
