"""Autoregressive sampling from a trained model."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import audio
from .errors import ConfigError
from .model import ModelParams, encode_chunks, logits_from_latents
from .numerics.ops import softmax_array
from .numerics.tensor import Tensor, default_dtype

CACHE_MODES = ("exact", "stale-chunk")


@dataclass
class SamplerConfig:
    temperature: float = 1.0
    top_k: int = 0
    greedy: bool = False
    seed: int = 0
    n_samples: int = 16000
    cache_mode: str = "exact"

    def __post_init__(self):
        if not self.greedy and not self.temperature > 0:
            raise ConfigError(f"temperature must be > 0 unless greedy, got {self.temperature}")
        if not 0 <= self.top_k <= audio.N_CODES:
            raise ConfigError(f"top_k must be in [0, {audio.N_CODES}], got {self.top_k}")
        if self.n_samples < 0:
            raise ConfigError("n_samples must be >= 0")
        if self.cache_mode not in CACHE_MODES:
            raise ConfigError(f"cache_mode must be one of {CACHE_MODES}, got {self.cache_mode!r}")


def adjust_distribution(logits, temperature: float = 1.0, top_k: int = 0, greedy: bool = False) -> np.ndarray:
    """Temperature and top-k reshaping of 256 logits into probabilities.

    Ties are resolved toward the lower code, both for greedy decoding and at
    the top-k cut.
    """
    z = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=np.float64)
    if greedy:
        out = np.zeros_like(z)
        out[int(np.argmax(z))] = 1.0
        return out
    if not temperature > 0:
        raise ConfigError(f"temperature must be > 0 unless greedy, got {temperature}")
    if not 0 <= top_k <= z.size:
        raise ConfigError(f"top_k must be in [0, {z.size}], got {top_k}")
    z = z / temperature
    if 0 < top_k < z.size:
        keep = np.argsort(-z, kind="stable")[:top_k]
        masked = np.full_like(z, -np.inf)
        masked[keep] = z[keep]
        z = masked
    return softmax_array(z)


def draw(dist, rng: np.random.Generator) -> int:
    """Inverse-CDF sample of one code."""
    cdf = np.cumsum(np.asarray(dist, dtype=np.float64))
    u = rng.random() * cdf[-1]
    return int(min(np.searchsorted(cdf, u, side="right"), len(cdf) - 1))


def entropy_bits(dist) -> float:
    p = np.asarray(dist, dtype=np.float64)
    nz = p[p > 0]
    return float(-(nz * np.log2(nz)).sum())


class Generator:
    """Rolling-buffer sampler.

    ``exact`` re-encodes every chunk of the backward-anchored grid at every
    step.  ``stale-chunk`` re-encodes only the newest chunk each step and
    reuses the older chunk latents from the last refresh, refreshing all of
    them every ``chunk_len`` steps; between refreshes those older latents lag
    the true grid by up to ``chunk_len - 1`` samples.
    """

    def __init__(self, params: ModelParams, seed_codes, context_len: int, cfg: SamplerConfig):
        chunk_len = params.config.chunk_len
        if context_len <= 0 or context_len % chunk_len:
            raise ConfigError(f"context_len {context_len} must be a positive multiple of chunk_len {chunk_len}")
        self.params = params
        self.cfg = cfg
        self.context_len = context_len
        self.chunk_len = chunk_len
        self.n_tokens = context_len // chunk_len
        seed = np.asarray(seed_codes, dtype=np.uint8)
        if len(seed) < context_len:
            seed = np.concatenate([np.full(context_len - len(seed), audio.ZERO_CODE, dtype=np.uint8), seed])
        self.buffer = list(seed[-context_len:].tolist())
        self.generated: list[int] = []
        self.entropies: list[float] = []
        self.rng = np.random.default_rng(cfg.seed)
        self.step_index = 0
        self._cache: Optional[np.ndarray] = None

    def context(self) -> np.ndarray:
        return np.asarray(self.buffer[-self.context_len:], dtype=np.uint8)

    def _latents(self, ctx: np.ndarray) -> np.ndarray:
        chunks = Tensor(audio.chunk(ctx, self.chunk_len), dtype=default_dtype())
        return encode_chunks(chunks, self.params).data

    def logits(self) -> np.ndarray:
        ctx = self.context()
        if self.cfg.cache_mode == "exact" or self.n_tokens == 1:
            latents = self._latents(ctx)
        elif self._cache is None or self.step_index % self.chunk_len == 0:
            latents = self._latents(ctx)
            self._cache = latents
        else:
            newest = self._latents(ctx[-self.chunk_len:])
            latents = np.concatenate([self._cache[:-1], newest], axis=0)
        return logits_from_latents(Tensor(latents, dtype=latents.dtype), self.params).data

    def distribution(self) -> np.ndarray:
        c = self.cfg
        return adjust_distribution(self.logits(), c.temperature, c.top_k, c.greedy)

    def step(self) -> int:
        dist = self.distribution()
        code = draw(dist, self.rng)
        self.entropies.append(entropy_bits(dist))
        self.buffer.append(code)
        self.generated.append(code)
        if len(self.buffer) > 2 * self.context_len:
            del self.buffer[:-self.context_len]
        self.step_index += 1
        return code


def generate(params: ModelParams, seed_clip: audio.QuantizedClip, cfg: SamplerConfig,
             context_len: int, entropies_path=None) -> audio.QuantizedClip:
    """Continue ``seed_clip`` by ``cfg.n_samples`` codes.

    Returns the last ``context_len`` seed codes (left-padded with the mu-law
    zero code if the seed is short) followed by the generated codes.
    """
    gen = Generator(params, seed_clip.codes, context_len, cfg)
    tail = gen.context().copy()
    for _ in range(cfg.n_samples):
        gen.step()
    if entropies_path is not None:
        with open(entropies_path, "w", encoding="utf-8") as fh:
            fh.writelines(f"{h:.6f}\n" for h in gen.entropies)
    codes = np.concatenate([tail, np.asarray(gen.generated, dtype=np.uint8)])
    return audio.QuantizedClip(codes, seed_clip.sample_rate)
