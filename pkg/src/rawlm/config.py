"""``key = value`` run configuration.

Precedence is defaults < config file < command-line ``--set`` overrides.
Every key has a default, so an empty file is a valid configuration that
reproduces the full-size model (128,000-sample context, batch 40).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Iterable, Optional

from .errors import ConfigError
from .generation import SamplerConfig
from .model import ModelConfig
from .training import LrSchedule, TrainSettings


@dataclass
class RunConfig:
    # model
    chunk_len: int = 2000
    conv_channels: list = field(default_factory=lambda: [256, 256, 128, 128, 32])
    conv_strides: list = field(default_factory=lambda: [2, 3, 2, 3, 2])
    conv_kernel: int = 7
    embed_dim: int = 128
    n_layers: int = 3
    ff_dim: int = 256
    n_heads: int = 8
    attn_dropout: float = 0.1
    token_dropout: float = 0.1
    conv_dropout: float = 0.2
    head_dropout: float = 0.2
    head_dims: list = field(default_factory=lambda: [1024, 256])
    # data
    context_len: int = 128_000
    sample_rate: int = 16_000
    train_manifest: str = ""
    valid_manifest: str = ""
    test_manifest: str = ""
    positions_per_epoch: int = 0
    # optimisation
    batch_size: int = 40
    lr_initial: float = 1e-4
    lr_final: float = 0.5e-5
    switch_step: int = 250_000
    max_steps: int = 500_000
    eval_every: int = 1000
    eval_positions: int = 1024
    checkpoint_every: int = 1000
    n_shards: int = 1
    grad_clip: float = 0.0
    prefetch: int = 0
    early_stop: bool = True
    # sampling
    temperature: float = 1.0
    top_k: int = 0
    greedy: bool = False
    n_samples: int = 16_000
    cache_mode: str = "exact"
    # run
    seed: int = 0
    output_dir: str = "run"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.chunk_len <= 0 or self.context_len <= 0 or self.context_len % self.chunk_len:
            raise ConfigError(f"context_len {self.context_len} must be a positive multiple of chunk_len {self.chunk_len}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.sample_rate <= 0:
            raise ConfigError("sample_rate must be > 0")
        self.model_config()
        self.schedule()
        self.sampler()

    @property
    def n_tokens(self) -> int:
        return self.context_len // self.chunk_len

    def model_config(self) -> ModelConfig:
        try:
            return ModelConfig(
                chunk_len=self.chunk_len, conv_channels=list(self.conv_channels),
                conv_strides=list(self.conv_strides), conv_kernel=self.conv_kernel,
                embed_dim=self.embed_dim, n_layers=self.n_layers, ff_dim=self.ff_dim,
                n_heads=self.n_heads, attn_dropout=self.attn_dropout,
                token_dropout=self.token_dropout, conv_dropout=self.conv_dropout,
                head_dims=list(self.head_dims), head_dropout=self.head_dropout,
                n_tokens_train=self.n_tokens,
            )
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def schedule(self) -> LrSchedule:
        try:
            return LrSchedule(self.lr_initial, self.lr_final, self.switch_step)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def sampler(self, seed: Optional[int] = None) -> SamplerConfig:
        return SamplerConfig(self.temperature, self.top_k, self.greedy,
                             self.seed if seed is None else seed, self.n_samples, self.cache_mode)

    def train_settings(self) -> TrainSettings:
        return TrainSettings(
            context_len=self.context_len, batch_size=self.batch_size, max_steps=self.max_steps,
            positions_per_epoch=self.positions_per_epoch, eval_every=self.eval_every,
            eval_positions=self.eval_positions, checkpoint_every=self.checkpoint_every,
            seed=self.seed, n_shards=self.n_shards, grad_clip=self.grad_clip,
            prefetch=self.prefetch, early_stop=self.early_stop, schedule=self.schedule(),
        )

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, list):
                value = ", ".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}
_DEFAULTS = RunConfig()


def _coerce(key: str, raw: str):
    default = getattr(_DEFAULTS, key)
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw.replace("_", ""))
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, list):
        return [int(p) for p in raw.replace("[", "").replace("]", "").split(",") if p.strip()]
    if len(raw) >= 2 and raw[0] == raw[-1] and raw[0] in "\"'":
        raw = raw[1:-1]
    return raw


def _parse_pairs(lines: Iterable[tuple[int, str]], values: dict, where: dict, source: str) -> None:
    for lineno, line in lines:
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"{source} line {lineno}: expected `key = value`, got {text!r}")
        key, raw = (s.strip() for s in text.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"{source} line {lineno}: unknown key {key!r}")
        try:
            values[key] = _coerce(key, raw)
            where[key] = f"{source} line {lineno}"
        except ValueError as exc:
            raise ConfigError(f"{source} line {lineno}: {key}: {exc}") from None


def parse_config(text: str, overrides: Iterable[str] = ()) -> RunConfig:
    """Parse config text, then apply ``key=value`` overrides on top."""
    values: dict = {}
    where: dict = {}
    _parse_pairs(enumerate(text.splitlines(), start=1), values, where, "config")
    _parse_pairs(enumerate(overrides, start=1), values, where, "override")
    try:
        return RunConfig(**values)
    except ConfigError as exc:
        msg = str(exc)
        # point at the first explicitly set key the message mentions
        culprits = [k for k in where if k in msg] or list(where)
        if culprits:
            raise ConfigError(f"{where[culprits[0]]}: {culprits[0]}: {msg}") from None
        raise


def load_config(path: Optional[str], overrides: Iterable[str] = ()) -> RunConfig:
    text = ""
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        except FileNotFoundError:
            raise FileNotFoundError(f"config file not found: {path}") from None
    return parse_config(text, overrides)
