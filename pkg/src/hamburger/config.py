from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from typing import Any

from .errors import ConfigError

PAD, BOS, EOS, RESP = 256, 257, 258, 259
# The stop-token ablation reuses PAD as its reserved stop id; PAD is never a target otherwise.
STOP = PAD

EMBEDDERS = ("cross_attn", "softmax")
STOP_MODES = ("head", "token")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 260
    d_model: int = 128
    n_heads: int = 4
    n_layers: int = 4
    decoder_layers: int = 2
    tap_layers: tuple[int, ...] = (2, 4)
    max_steps: int = 4
    ffn_mult: int = 4
    max_context: int = 2048
    rope_base: float = 10000.0
    embedder: str = "cross_attn"
    stop_mode: str = "head"

    def __post_init__(self) -> None:
        object.__setattr__(self, "tap_layers", tuple(sorted(int(t) for t in self.tap_layers)))
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if (self.d_model // self.n_heads) % 2:
            raise ConfigError("head dim must be even for rotary positions")
        if not self.tap_layers or self.tap_layers[-1] != self.n_layers:
            raise ConfigError(f"tap_layers {self.tap_layers} must include n_layers={self.n_layers}")
        if self.tap_layers[0] < 1 or len(set(self.tap_layers)) != len(self.tap_layers):
            raise ConfigError(f"tap_layers {self.tap_layers} must be distinct values in [1, n_layers]")
        if self.max_steps < 1:
            raise ConfigError("max_steps must be >= 1")
        if self.vocab_size <= RESP:
            raise ConfigError(f"vocab_size must exceed {RESP} (bytes plus specials)")
        if self.embedder not in EMBEDDERS:
            raise ConfigError(f"embedder must be one of {EMBEDDERS}, got {self.embedder!r}")
        if self.stop_mode not in STOP_MODES:
            raise ConfigError(f"stop_mode must be one of {STOP_MODES}, got {self.stop_mode!r}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["tap_layers"] = list(self.tap_layers)
        return d

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> ModelConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config field(s): {sorted(unknown)}")
        data = dict(data)
        if "tap_layers" in data:
            data["tap_layers"] = tuple(data["tap_layers"])
        return cls(**data)

    def with_(self, **changes: Any) -> ModelConfig:
        return replace(self, **changes)


VARIANTS = {
    "full": {},
    "softmax-merge": {"embedder": "softmax"},
    "no-taps": {"tap_layers": None},  # resolved to (n_layers,)
    "stop-token": {"stop_mode": "token"},
}


def variant_config(base: ModelConfig, variant: str) -> ModelConfig:
    """Leave-one-out ablation of a single architectural feature."""
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}")
    changes = dict(VARIANTS[variant])
    if "tap_layers" in changes:
        changes["tap_layers"] = (base.n_layers,)
    return base.with_(**changes)
