"""Configuration dataclasses and the strict dict loader used by the CLI."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from typing import Any

POSITION_MECHANISMS = ("none", "global", "abs_emb", "query_specific")
CONDITION_SOURCES = ("item", "item_seq", "auto")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Switches:
    seq_pooling_tokens: bool = False
    ns_tokens_in_boosting: bool = False
    per_query_ffn: bool = False


@dataclass(frozen=True)
class LensConfig:
    enabled: bool = False
    tcqg: bool = True
    tcpb: bool = True
    rank: int = 8
    condition_source: str = "item"


@dataclass(frozen=True)
class ModelConfig:
    """Latent-query model hyperparameters.

    ``n_queries`` is q, ``d_model`` is D, ``n_layers`` is N_L and ``max_len``
    is L_max. ``k_pool`` only matters with the seq-pooling switch on.
    """

    n_queries: int = 4
    d_model: int = 16
    n_layers: int = 2
    n_heads: int = 2
    max_len: int = 50
    mlp_head: tuple[int, ...] = (256, 128, 1)
    ffn_mult: int = 2
    k_pool: int = 2
    switches: Switches = field(default_factory=Switches)
    position: str = "none"
    lens: LensConfig = field(default_factory=LensConfig)

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def validate(self) -> "ModelConfig":
        if min(self.n_queries, self.d_model, self.n_layers, self.n_heads, self.max_len) < 1:
            raise ConfigError("n_queries, d_model, n_layers, n_heads and max_len must be >= 1")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if not self.mlp_head or self.mlp_head[-1] != 1:
            raise ConfigError(f"mlp_head must end in a single output unit, got {list(self.mlp_head)}")
        if self.k_pool < 0 or self.ffn_mult < 1:
            raise ConfigError("k_pool must be >= 0 and ffn_mult >= 1")
        if self.position not in POSITION_MECHANISMS:
            raise ConfigError(f"position must be one of {POSITION_MECHANISMS}, got {self.position!r}")
        lens = self.lens
        if lens.condition_source not in CONDITION_SOURCES:
            raise ConfigError(f"condition_source must be one of {CONDITION_SOURCES}")
        if lens.enabled:
            if self.position != "query_specific":
                raise ConfigError("LENS requires position='query_specific'")
            if lens.tcpb and lens.rank < 1:
                raise ConfigError("TCPB rank must be >= 1")
        return self


@dataclass(frozen=True)
class DinConfig:
    d_model: int = 16
    max_len: int = 50
    attn_mlp: tuple[int, ...] = (32, 1)
    mlp_head: tuple[int, ...] = (256, 128, 1)
    full_side: bool = True

    def validate(self) -> "DinConfig":
        if self.attn_mlp[-1] != 1 or self.mlp_head[-1] != 1:
            raise ConfigError("attn_mlp and mlp_head must end in a single output unit")
        return self


@dataclass(frozen=True)
class FeatureSchema:
    """Vocabulary sizes a model needs from its dataset."""

    n_items: int
    field_vocab: tuple[int, ...] = ()
    n_dense: int = 0
    n_actions: int = 4


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    epsilon: float = 1e-8
    batch_size: int = 256
    epochs: int = 2
    seed: int = 42
    eval_every: int = 0
    eval_batch_size: int = 1024

    def validate(self) -> "TrainConfig":
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        return self


def from_dict(cls, data: dict[str, Any] | None, path: str = ""):
    """Build dataclass ``cls`` from a plain dict, rejecting unknown keys."""
    data = {} if data is None else data
    if not isinstance(data, dict):
        raise ConfigError(f"{path or cls.__name__}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{path or cls.__name__}: unknown keys {unknown}")
    kwargs = {}
    for key, value in data.items():
        kwargs[key] = _coerce(hints[key], value, f"{path}.{key}" if path else key)
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{path or cls.__name__}: {exc}") from None


def _coerce(hint, value, path):
    if dataclasses.is_dataclass(hint):
        return from_dict(hint, value, path)
    origin = typing.get_origin(hint)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list")
        args = typing.get_args(hint)
        inner = args[0] if args else Any
        return tuple(_coerce(inner, v, path) for v in value)
    if origin is typing.Union:
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        return None if value is None else _coerce(args[0], value, path)
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    return value


def to_dict(obj) -> dict[str, Any]:
    return json.loads(json.dumps(dataclasses.asdict(obj)))


def config_hash(obj) -> str:
    payload = obj if isinstance(obj, dict) else to_dict(obj)
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()
