"""Chunked convolutional encoder + Transformer encoder + next-sample head.

A context of ``C`` codes is cut into ``C / chunk_len`` chunks.  Each chunk
goes through the same strided conv stack and a projection to one
``embed_dim`` token; sinusoidal positions are added, a post-norm Transformer
mixes the tokens with unmasked attention, and the last output token feeds a
two-layer head producing 256 logits.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import audio
from .errors import ConfigError, DimensionError
from .numerics import ops
from .numerics.tensor import Tensor, default_dtype


@dataclass
class ModelConfig:
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
    head_dims: list = field(default_factory=lambda: [1024, 256])
    head_dropout: float = 0.2
    n_tokens_train: int = 64
    ln_eps: float = 1e-5

    def __post_init__(self):
        self.conv_channels = [int(c) for c in self.conv_channels]
        self.conv_strides = [int(s) for s in self.conv_strides]
        self.head_dims = [int(h) for h in self.head_dims]
        self.validate()

    def validate(self) -> None:
        if len(self.conv_channels) != len(self.conv_strides) or not self.conv_channels:
            raise ConfigError("conv_channels and conv_strides must be non-empty and the same length")
        if self.conv_kernel % 2 == 0 or self.conv_kernel < 1:
            raise ConfigError(f"conv_kernel must be odd, got {self.conv_kernel}")
        if any(s < 1 for s in self.conv_strides) or any(c < 1 for c in self.conv_channels):
            raise ConfigError("conv strides and channel counts must be >= 1")
        if self.chunk_len < 1:
            raise ConfigError("chunk_len must be >= 1")
        if self.embed_dim % 2:
            raise ConfigError(f"embed_dim must be even for sinusoidal positions, got {self.embed_dim}")
        if self.n_heads < 1 or self.embed_dim % self.n_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} is not divisible by n_heads {self.n_heads}")
        if not self.head_dims or self.head_dims[-1] != audio.N_CODES:
            raise ConfigError(f"last head dim must be {audio.N_CODES}")
        for name in ("attn_dropout", "token_dropout", "conv_dropout", "head_dropout"):
            p = getattr(self, name)
            if not 0.0 <= p < 1.0:
                raise ConfigError(f"{name} must be in [0, 1), got {p}")
        if self.n_layers < 0 or self.ff_dim < 1 or self.n_tokens_train < 1:
            raise ConfigError("n_layers >= 0, ff_dim >= 1 and n_tokens_train >= 1 required")

    @property
    def context_len(self) -> int:
        return self.chunk_len * self.n_tokens_train

    def conv_lengths(self) -> list[int]:
        """Per-layer output lengths of the chunk encoder."""
        lengths, n = [], self.chunk_len
        for s in self.conv_strides:
            n = ops.conv_output_length(n, s)
            lengths.append(n)
        return lengths

    @property
    def flat_dim(self) -> int:
        return self.conv_channels[-1] * self.conv_lengths()[-1]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def param_shapes(config: ModelConfig) -> dict[str, tuple]:
    """Name -> shape for every trainable array, in a fixed order."""
    shapes: dict[str, tuple] = {}
    c_in = 1
    for i, c_out in enumerate(config.conv_channels):
        shapes[f"conv{i}.w"] = (c_out, c_in, config.conv_kernel)
        shapes[f"conv{i}.b"] = (c_out,)
        c_in = c_out
    d = config.embed_dim
    shapes["proj.w"] = (config.flat_dim, d)
    shapes["proj.b"] = (d,)
    for layer in range(config.n_layers):
        p = f"layer{layer}."
        for name in ("q", "k", "v", "o"):
            shapes[p + name + ".w"] = (d, d)
            shapes[p + name + ".b"] = (d,)
        shapes[p + "ln1.gain"] = (d,)
        shapes[p + "ln1.shift"] = (d,)
        shapes[p + "ff1.w"] = (d, config.ff_dim)
        shapes[p + "ff1.b"] = (config.ff_dim,)
        shapes[p + "ff2.w"] = (config.ff_dim, d)
        shapes[p + "ff2.b"] = (d,)
        shapes[p + "ln2.gain"] = (d,)
        shapes[p + "ln2.shift"] = (d,)
    prev = d
    for i, h in enumerate(config.head_dims):
        shapes[f"head{i}.w"] = (prev, h)
        shapes[f"head{i}.b"] = (h,)
        prev = h
    return shapes


def param_count(config: ModelConfig) -> int:
    """Exact number of trainable scalars, from per-layer formulas."""
    k, d = config.conv_kernel, config.embed_dim
    total, c_in = 0, 1
    for c_out in config.conv_channels:
        total += c_out * c_in * k + c_out
        c_in = c_out
    total += config.flat_dim * d + d
    per_layer = 4 * (d * d + d) + (d * config.ff_dim + config.ff_dim) + (config.ff_dim * d + d) + 4 * d
    total += config.n_layers * per_layer
    prev = d
    for h in config.head_dims:
        total += prev * h + h
        prev = h
    return total


class ModelParams:
    """Ordered mapping of parameter name to :class:`Tensor`."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        expected = param_shapes(config)
        if list(tensors) != list(expected):
            raise DimensionError("parameter names do not match the configuration")
        for name, shape in expected.items():
            if tensors[name].shape != shape:
                raise DimensionError(f"{name}: shape {tensors[name].shape}, expected {shape}")
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.values())

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def names(self) -> list[str]:
        return list(self.tensors)

    def count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: Tensor(t.data.copy(), requires_grad=True, dtype=t.dtype)
                                         for k, t in self.tensors.items()})

    @classmethod
    def from_arrays(cls, config: ModelConfig, arrays: dict[str, np.ndarray]) -> "ModelParams":
        return cls(config, {k: Tensor(np.array(arrays[k]), requires_grad=True, name=k)
                            for k in param_shapes(config)})


def init_params(config: ModelConfig, rng: np.random.Generator, zero_head: bool = True) -> ModelParams:
    """Glorot-uniform weights, zero biases, unit norm gains.

    With ``zero_head`` the final head layer starts at exactly zero, so a fresh
    model predicts the uniform distribution over all 256 codes.
    """
    dtype = default_dtype()
    last_head = f"head{len(config.head_dims) - 1}"
    tensors = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".gain"):
            arr = np.ones(shape)
        elif name.endswith(".b") or name.endswith(".shift"):
            arr = np.zeros(shape)
        elif zero_head and name.startswith(last_head + "."):
            arr = np.zeros(shape)
        else:
            if len(shape) == 3:
                fan_in, fan_out = shape[1] * shape[2], shape[0] * shape[2]
            else:
                fan_in, fan_out = shape
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            arr = rng.uniform(-limit, limit, size=shape)
        tensors[name] = Tensor(arr.astype(dtype), requires_grad=True, name=name)
    return ModelParams(config, tensors)


# -- building blocks ---------------------------------------------------------------

def positional_encoding(n_tokens: int, embed_dim: int) -> np.ndarray:
    """Sinusoidal table: sin on even columns, cos on odd, wavelengths up to 10000."""
    if embed_dim % 2:
        raise ConfigError(f"embed_dim must be even, got {embed_dim}")
    pos = np.arange(n_tokens, dtype=np.float64)[:, None]
    rates = 10000.0 ** (-np.arange(0, embed_dim, 2, dtype=np.float64) / embed_dim)
    pe = np.zeros((n_tokens, embed_dim))
    pe[:, 0::2] = np.sin(pos * rates)
    pe[:, 1::2] = np.cos(pos * rates)
    return pe


def token_dropout(tokens: Tensor, p: float, rng: Optional[np.random.Generator], training: bool) -> Tensor:
    """Zero whole token vectors with probability ``p`` (survivors rescaled)."""
    return ops.dropout(tokens, p, rng, training, shared_axes=(-1,))


def encode_chunks(chunks: Tensor, params: ModelParams, training: bool = False,
                  rng: Optional[np.random.Generator] = None) -> Tensor:
    """``(..., chunk_len)`` float chunks -> ``(..., embed_dim)`` latents, one per chunk."""
    cfg = params.config
    if chunks.shape[-1] != cfg.chunk_len:
        raise DimensionError(f"chunk length {chunks.shape[-1]}, expected {cfg.chunk_len}")
    lead = chunks.shape[:-1]
    h = ops.reshape(chunks, (-1, 1, cfg.chunk_len))
    for i, stride in enumerate(cfg.conv_strides):
        h = ops.conv1d_same(h, params[f"conv{i}.w"], params[f"conv{i}.b"], stride)
        h = ops.relu(h)
        h = ops.dropout(h, cfg.conv_dropout, rng, training)
    h = ops.reshape(h, (-1, cfg.flat_dim))
    h = ops.linear(h, params["proj.w"], params["proj.b"])
    return ops.reshape(h, lead + (cfg.embed_dim,))


def encode_chunk(chunk, params: ModelParams, training: bool = False,
                 rng: Optional[np.random.Generator] = None) -> Tensor:
    """One chunk of floats -> one latent vector."""
    x = chunk if isinstance(chunk, Tensor) else Tensor(chunk)
    if x.ndim != 1:
        raise DimensionError(f"encode_chunk expects a 1-D chunk, got {x.shape}")
    return encode_chunks(x, params, training, rng)


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    *lead, n, d = x.shape
    h = ops.reshape(x, tuple(lead) + (n, n_heads, d // n_heads))
    nd = h.ndim
    return ops.transpose(h, tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1))


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, dh = x.shape
    nd = x.ndim
    y = ops.transpose(x, tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1))
    return ops.reshape(y, tuple(lead) + (n, h * dh))


def transformer_layer(x: Tensor, params: ModelParams, layer: int, training: bool = False,
                      rng: Optional[np.random.Generator] = None) -> Tensor:
    cfg = params.config
    p = f"layer{layer}."
    q = _split_heads(ops.linear(x, params[p + "q.w"], params[p + "q.b"]), cfg.n_heads)
    k = _split_heads(ops.linear(x, params[p + "k.w"], params[p + "k.b"]), cfg.n_heads)
    v = _split_heads(ops.linear(x, params[p + "v.w"], params[p + "v.b"]), cfg.n_heads)
    a = _merge_heads(ops.attention(q, k, v, cfg.attn_dropout, rng, training))
    a = ops.linear(a, params[p + "o.w"], params[p + "o.b"])
    x = ops.layer_norm(ops.add(x, a), params[p + "ln1.gain"], params[p + "ln1.shift"], cfg.ln_eps)
    f = ops.relu(ops.linear(x, params[p + "ff1.w"], params[p + "ff1.b"]))
    f = ops.dropout(f, cfg.attn_dropout, rng, training)
    f = ops.linear(f, params[p + "ff2.w"], params[p + "ff2.b"])
    return ops.layer_norm(ops.add(x, f), params[p + "ln2.gain"], params[p + "ln2.shift"], cfg.ln_eps)


def transformer_stack(tokens: Tensor, params: ModelParams, training: bool = False,
                      rng: Optional[np.random.Generator] = None) -> Tensor:
    """Apply every layer, with token dropout after each one while training."""
    cfg = params.config
    if tokens.shape[-1] != cfg.embed_dim:
        raise DimensionError(f"token width {tokens.shape[-1]}, expected {cfg.embed_dim}")
    x = tokens
    for layer in range(cfg.n_layers):
        x = transformer_layer(x, params, layer, training, rng)
        x = token_dropout(x, cfg.token_dropout, rng, training)
    return x


def head(last: Tensor, params: ModelParams, training: bool = False,
         rng: Optional[np.random.Generator] = None) -> Tensor:
    cfg = params.config
    h = last
    final = len(cfg.head_dims) - 1
    for i in range(len(cfg.head_dims)):
        h = ops.linear(h, params[f"head{i}.w"], params[f"head{i}.b"])
        if i < final:
            h = ops.dropout(ops.relu(h), cfg.head_dropout, rng, training)
    return h


def logits_from_latents(latents: Tensor, params: ModelParams, training: bool = False,
                        rng: Optional[np.random.Generator] = None, use_positions: bool = True) -> Tensor:
    """Positional encoding, Transformer and head on ``(..., n_tokens, embed_dim)`` latents."""
    cfg = params.config
    n_tokens = latents.shape[-2]
    x = latents
    if use_positions:
        x = ops.add(x, Tensor(positional_encoding(n_tokens, cfg.embed_dim), dtype=latents.dtype))
    x = token_dropout(x, cfg.token_dropout, rng, training)
    x = transformer_stack(x, params, training, rng)
    last = ops.index(x, (Ellipsis, n_tokens - 1, slice(None)))
    return head(last, params, training, rng)


def context_chunks(context, config: ModelConfig) -> np.ndarray:
    codes = np.asarray(context)
    if codes.shape[-1] == 0:
        raise ConfigError("context must hold at least one chunk")
    return audio.chunk(codes, config.chunk_len)


def forward(context, params: ModelParams, training: bool = False,
            rng: Optional[np.random.Generator] = None, use_positions: bool = True) -> Tensor:
    """Context codes ``(C,)`` or ``(B, C)`` -> logits ``(256,)`` or ``(B, 256)``.

    ``C`` may be any positive multiple of ``chunk_len``; the same weights serve
    every token count.
    """
    chunks = Tensor(context_chunks(context, params.config), dtype=default_dtype())
    latents = encode_chunks(chunks, params, training, rng)
    return logits_from_latents(latents, params, training, rng, use_positions)


def predict_proba(context, params: ModelParams) -> np.ndarray:
    """Next-code distribution(s) in inference mode."""
    logits = forward(context, params, training=False)
    return ops.softmax_array(logits.data.astype(np.float64))


def layer_report(config: ModelConfig, n_tokens: Optional[int] = None) -> list[tuple[str, tuple]]:
    """(stage, output shape) for one forward pass over ``n_tokens`` chunks."""
    n = n_tokens or config.n_tokens_train
    rows = [("context", (n * config.chunk_len,)), ("chunks", (n, config.chunk_len))]
    for i, (c, length) in enumerate(zip(config.conv_channels, config.conv_lengths())):
        rows.append((f"conv{i}", (n, c, length)))
    rows.append(("flatten", (n, config.flat_dim)))
    rows.append(("proj", (n, config.embed_dim)))
    for layer in range(config.n_layers):
        rows.append((f"layer{layer}", (n, config.embed_dim)))
    rows.append(("last_token", (config.embed_dim,)))
    for i, h in enumerate(config.head_dims):
        rows.append((f"head{i}", (h,)))
    return rows
