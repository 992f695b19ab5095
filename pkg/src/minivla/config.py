"""Run configuration: model dimensions, optimizer schedule, ablation knobs."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass

__all__ = ["TrainConfig", "ConfigError"]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    # model dimensions (three towers share the per-head width)
    encoder_layers: int = 4
    expert_layers: int = 4
    head_width: int = 16
    query_heads: int = 4          # encoder attention heads
    kv_heads: int = 2             # encoder KV heads (grouped-query sharing)
    state_heads: int = 2          # state-transformer heads
    expert_kv_heads: int = 2      # condition heads consumed by the expert
    d_model: int = 64
    chunk_len: int = 4            # actions predicted per step
    n_history: int = 8            # downsampled past frames fed to the encoder
    state_tokens: int = 3         # position / orientation / gripper tokens
    condition_mode: str = "per_layer"   # or "final_only"
    target_mode: str = "velocity"       # or "noise"
    # ablation knobs
    use_salr: bool = True
    zero_state: bool = False
    freeze_encoder: bool = False
    # optimizer
    lr_peak: float = 1e-3
    warmup_steps: int = 200
    total_steps: int = 5000
    lr_floor: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    batch_size: int = 32
    # run plumbing
    seed: int = 0
    dataset: str = ""
    checkpoint_dir: str = ""

    @property
    def d_state(self) -> int:
        return self.state_heads * self.head_width

    @property
    def d_expert(self) -> int:
        return self.expert_kv_heads * self.head_width

    @property
    def fused_heads(self) -> int:
        return self.state_heads * self.kv_heads

    def validate(self) -> "TrainConfig":
        if self.d_model != self.query_heads * self.head_width:
            raise ConfigError(
                f"d_model {self.d_model} != query_heads*head_width "
                f"{self.query_heads}*{self.head_width}")
        if self.query_heads % self.kv_heads:
            raise ConfigError(f"query_heads {self.query_heads} not divisible by kv_heads {self.kv_heads}")
        if self.condition_mode not in ("per_layer", "final_only"):
            raise ConfigError(f"unknown condition_mode {self.condition_mode!r}")
        if self.condition_mode == "per_layer" and self.encoder_layers != self.expert_layers:
            raise ConfigError(
                f"per_layer conditioning needs matching depths, got "
                f"{self.encoder_layers} encoder vs {self.expert_layers} expert layers")
        if self.target_mode not in ("velocity", "noise"):
            raise ConfigError(f"unknown target_mode {self.target_mode!r}")
        counts = ("encoder_layers", "expert_layers", "head_width", "query_heads",
                  "kv_heads", "state_heads", "expert_kv_heads", "chunk_len",
                  "n_history", "state_tokens", "batch_size", "total_steps")
        for field in counts:
            if getattr(self, field) < 1:
                raise ConfigError(f"{field} must be positive")
        return self

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)

    @staticmethod
    def from_dict(data: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(TrainConfig)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return TrainConfig(**data).validate()

    @staticmethod
    def from_json(text: str) -> "TrainConfig":
        return TrainConfig.from_dict(json.loads(text))

    def replaced(self, **kwargs) -> "TrainConfig":
        return dataclasses.replace(self, **kwargs).validate()

    def hash(self) -> str:
        return hashlib.sha256(
            json.dumps(dataclasses.asdict(self), sort_keys=True).encode()
        ).hexdigest()[:16]
