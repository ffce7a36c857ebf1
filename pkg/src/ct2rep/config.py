"""Run configuration. Defaults are the full-scale training setup; ``RunConfig.desk()`` is the
small configuration used by tests and the experiment scripts."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path


@dataclass
class ModelConfig:
    volume_shape: tuple = (240, 480, 480)
    patch: tuple = (12, 24, 24)  # (p_t, p_1, p_2)
    dim: int = 512
    vision_depth: int = 2
    vision_heads: int = 8
    mlp_ratio: int = 4
    encoder_depth: int = 3
    encoder_heads: int = 8
    decoder_depth: int = 3
    decoder_heads: int = 8
    memory_slots: int = 3
    memory_heads: int = 8
    use_gates: bool = True
    report_encoder_depth: int = 1
    max_tokens: int = 300


@dataclass
class OptimConfig:
    lr_visual: float = 5e-5
    lr_other: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    scheduler_gamma: float = 0.1
    scheduler_step_epochs: int = 1
    use_scheduler: bool = True


@dataclass
class DataConfig:
    spacing: tuple = (1.5, 0.75, 0.75)
    vocab_min_count: int = 1


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 0
    epochs: int = 20
    max_steps: int = 0  # 0 = run all epochs
    checkpoint_every: int = 0  # steps; 0 = only at the end
    decode: str = "greedy"
    beam_size: int = 3

    @classmethod
    def desk(cls, **overrides) -> "RunConfig":
        cfg = cls(
            model=ModelConfig(volume_shape=(24, 48, 48), patch=(6, 12, 12), dim=64, vision_depth=2,
                              vision_heads=4, encoder_depth=1, encoder_heads=4, decoder_depth=2,
                              decoder_heads=2, memory_slots=3, memory_heads=2),
            optim=OptimConfig(lr_visual=5e-4, lr_other=1e-3, use_scheduler=False),
            epochs=20,
        )
        return apply_overrides(cfg, overrides) if overrides else cfg

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        return _build(cls, data)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _build(kind, data: dict):
    known = {f.name: f for f in dataclasses.fields(kind)}
    unknown = set(data) - set(known)
    if unknown:
        raise KeyError(f"unknown {kind.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    defaults = kind()
    for name, value in data.items():
        current = getattr(defaults, name)
        if dataclasses.is_dataclass(current):
            kwargs[name] = _build(type(current), value)
        elif isinstance(current, tuple):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return kind(**kwargs)


def apply_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    """Return a copy with dotted keys (``"model.dim"``) replaced."""
    data = cfg.to_dict()
    for key, value in overrides.items():
        node = data
        *parents, leaf = key.split(".")
        for part in parents:
            if part not in node or not isinstance(node[part], dict):
                raise KeyError(f"unknown config key {key!r}")
            node = node[part]
        if leaf not in node:
            raise KeyError(f"unknown config key {key!r}")
        node[leaf] = value
    return RunConfig.from_dict(data)


def parse_override(text: str) -> tuple:
    """``key=value`` with the value parsed as JSON when possible."""
    key, sep, raw = text.partition("=")
    if not sep:
        raise ValueError(f"override {text!r} is not key=value")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value
