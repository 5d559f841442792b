"""Experiment configuration: nested dataclasses loaded from a single JSON document.

Unknown keys are rejected, as are values of the wrong type or out of range;
every error names the offending field by its dotted path.
"""
from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .errors import ConfigInvalid

METHODS = ("fedrco", "fedrco_ori", "fedavg", "fedprox", "fedavgm", "fedadam")


@dataclass
class DatasetConfig:
    kind: str = "synthetic"  # synthetic | file
    dim: int = 32
    num_classes: int = 10
    num_samples: int = 4000
    test_samples: int = 1000
    separation: float = 6.0
    noise: float = 1.0
    path: Optional[str] = None
    test_path: Optional[str] = None

    def check(self, p: str) -> None:
        _one_of(f"{p}.kind", self.kind, ("synthetic", "file"))
        if self.kind == "synthetic":
            _at_least(f"{p}.dim", self.dim, 1)
            _at_least(f"{p}.num_classes", self.num_classes, 2)
            _at_least(f"{p}.num_samples", self.num_samples, self.num_classes)
            _at_least(f"{p}.test_samples", self.test_samples, 1)
            _at_least(f"{p}.separation", self.separation, 0.0)
            _positive(f"{p}.noise", self.noise)
        else:
            if not self.path:
                raise ConfigInvalid(f"{p}.path", "required when kind is 'file'")
            if not self.test_path:
                raise ConfigInvalid(f"{p}.test_path", "required when kind is 'file'")


@dataclass
class PartitionConfig:
    kind: str = "dirichlet"  # dirichlet | pathological | iid
    alpha: float = 0.1
    labels_per_client: int = 2
    repair: bool = True

    def check(self, p: str) -> None:
        _one_of(f"{p}.kind", self.kind, ("dirichlet", "pathological", "iid"))
        _positive(f"{p}.alpha", self.alpha)
        _at_least(f"{p}.labels_per_client", self.labels_per_client, 1)


@dataclass
class ModelConfig:
    arch: str = "mlp"  # mlp | cnn
    hidden: list[int] = field(default_factory=lambda: [64])
    conv_channels: list[int] = field(default_factory=lambda: [16, 32])
    conv_hidden: list[int] = field(default_factory=lambda: [32, 256])
    kernel: int = 3
    pad: int = 0

    def check(self, p: str) -> None:
        _one_of(f"{p}.arch", self.arch, ("mlp", "cnn"))
        for i, h in enumerate(self.hidden):
            _at_least(f"{p}.hidden[{i}]", h, 1)
        if len(self.conv_channels) != 2:
            raise ConfigInvalid(f"{p}.conv_channels", "expected exactly two entries")
        _at_least(f"{p}.kernel", self.kernel, 1)
        _at_least(f"{p}.pad", self.pad, 0)


@dataclass
class KfacSection:
    ema_alpha: float = 0.95
    eps: float = 0.03
    t_inv: int = 200
    pi_mode: str = "normalized"
    gamma_norm: str = "positions"
    preconditioner: str = "kfac"
    refresh_each_round: bool = False

    def check(self, p: str) -> None:
        if not 0.0 < self.ema_alpha <= 1.0:
            raise ConfigInvalid(f"{p}.ema_alpha", "must lie in (0, 1]")
        _positive(f"{p}.eps", self.eps)
        _at_least(f"{p}.t_inv", self.t_inv, 1)
        _one_of(f"{p}.pi_mode", self.pi_mode, ("normalized", "literal"))
        _one_of(f"{p}.gamma_norm", self.gamma_norm, ("positions", "batch"))
        _one_of(f"{p}.preconditioner", self.preconditioner, ("kfac", "identity"))


@dataclass
class StabilitySection:
    enabled: bool = True
    tau_low: float = 10.0
    tau_high: float = 1000.0
    xi: float = 1e-8
    grad_stable: float = 10.0
    window: int = 10
    max_consecutive: int = 3
    warmup: int = 3

    def check(self, p: str) -> None:
        if not 1.0 < self.tau_low:
            raise ConfigInvalid(f"{p}.tau_low", "must exceed 1")
        if not self.tau_low < self.tau_high:
            raise ConfigInvalid(f"{p}.tau_high", "must exceed tau_low")
        _positive(f"{p}.xi", self.xi)
        _positive(f"{p}.grad_stable", self.grad_stable)
        _at_least(f"{p}.window", self.window, 1)
        _at_least(f"{p}.max_consecutive", self.max_consecutive, 1)
        _at_least(f"{p}.warmup", self.warmup, 0)


@dataclass
class AggregationSection:
    strategy: str = "adaptive"
    swap_gamma: bool = False

    def check(self, p: str) -> None:
        _one_of(f"{p}.strategy", self.strategy, ("adaptive", "plain"))


@dataclass
class FedProxSection:
    mu: float = 0.01

    def check(self, p: str) -> None:
        _at_least(f"{p}.mu", self.mu, 0.0)


@dataclass
class ServerSection:
    beta: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-3
    lr: float = 1.0
    adam_lr: float = 0.01

    def check(self, p: str) -> None:
        for name in ("beta", "beta1", "beta2"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ConfigInvalid(f"{p}.{name}", "must lie in [0, 1)")
        _positive(f"{p}.eps", self.eps)
        _positive(f"{p}.lr", self.lr)
        _positive(f"{p}.adam_lr", self.adam_lr)


@dataclass
class ExperimentConfig:
    method: str = "fedrco"
    seed: int = 0
    rounds: int = 60
    num_clients: int = 20
    participation: float = 0.8
    local_epochs: int = 20
    batch_size: int = 32
    lr: float = 0.00625
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    kfac: KfacSection = field(default_factory=KfacSection)
    stability: StabilitySection = field(default_factory=StabilitySection)
    aggregation: AggregationSection = field(default_factory=AggregationSection)
    fedprox: FedProxSection = field(default_factory=FedProxSection)
    server: ServerSection = field(default_factory=ServerSection)

    def check(self, p: str = "") -> None:
        _one_of("method", self.method, METHODS)
        _at_least("seed", self.seed, 0)
        _at_least("rounds", self.rounds, 0)
        _at_least("num_clients", self.num_clients, 1)
        if not 0.0 < self.participation <= 1.0:
            raise ConfigInvalid("participation", "must lie in (0, 1]")
        _at_least("local_epochs", self.local_epochs, 1)
        _at_least("batch_size", self.batch_size, 1)
        _positive("lr", self.lr)
        for f in dataclasses.fields(self):
            sub = getattr(self, f.name)
            if dataclasses.is_dataclass(sub):
                sub.check(f.name)
        if (self.partition.kind == "pathological"
                and self.dataset.kind == "synthetic"
                and self.partition.labels_per_client > self.dataset.num_classes):
            raise ConfigInvalid("partition.labels_per_client", "exceeds dataset.num_classes")

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def replace_path(self, dotted: str, value: Any) -> "ExperimentConfig":
        """Copy with one (possibly nested) field overridden; validates the result."""
        data = self.to_dict()
        node = data
        keys = dotted.split(".")
        for k in keys[:-1]:
            if not isinstance(node.get(k), dict):
                raise ConfigInvalid(dotted, "unknown section")
            node = node[k]
        if keys[-1] not in node:
            raise ConfigInvalid(dotted, "unknown key")
        node[keys[-1]] = value
        return config_from_dict(data)


def _one_of(path, value, allowed):
    if value not in allowed:
        raise ConfigInvalid(path, f"must be one of {list(allowed)}, got {value!r}")


def _at_least(path, value, lo):
    if value < lo:
        raise ConfigInvalid(path, f"must be >= {lo}, got {value!r}")


def _positive(path, value):
    if not value > 0:
        raise ConfigInvalid(path, f"must be > 0, got {value!r}")


def _coerce(path: str, tp, value):
    origin = typing.get_origin(tp)
    if origin is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _coerce(path, args[0], value)
    if origin is list:
        (item,) = typing.get_args(tp)
        if not isinstance(value, list):
            raise ConfigInvalid(path, f"expected a list, got {type(value).__name__}")
        return [_coerce(f"{path}[{i}]", item, v) for i, v in enumerate(value)]
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigInvalid(path, f"expected an object, got {type(value).__name__}")
        return _build(tp, value, path)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigInvalid(path, f"expected a boolean, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigInvalid(path, f"expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigInvalid(path, f"expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigInvalid(path, f"expected a string, got {value!r}")
        return value
    raise TypeError(f"unsupported config type {tp}")  # pragma: no cover


def _build(cls, data: dict, prefix: str):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            raise ConfigInvalid(f"{prefix}.{key}" if prefix else key, "unknown key")
    kwargs = {}
    for name in names:
        if name in data:
            path = f"{prefix}.{name}" if prefix else name
            kwargs[name] = _coerce(path, hints[name], data[name])
    return cls(**kwargs)


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigInvalid("", "config must be a JSON object")
    cfg = _build(ExperimentConfig, data, "")
    cfg.check()
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigInvalid("", f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(data)
