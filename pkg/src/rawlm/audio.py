"""PCM WAV ingest, 8-bit mu-law codes, and (context, target) windows.

Everything the model sees is a code in 0..255.  Floats handed to the chunk
encoder are the decoded mu-law values of those codes, so training and
generation share one representation.
"""

from __future__ import annotations

import math
import wave
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import (
    ConfigError, DataError, RateMismatchError, UnsupportedFormatError, WavParseError, WindowError,
)

MU = 255
N_CODES = 256
ZERO_CODE = 128
_LOG1P_MU = math.log1p(MU)


@dataclass
class WaveformClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.sample_rate <= 0:
            raise DataError(f"sample rate must be positive, got {self.sample_rate}")

    def __len__(self):
        return len(self.samples)


@dataclass
class QuantizedClip:
    codes: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        codes = np.asarray(self.codes)
        if codes.size and (codes.min() < 0 or codes.max() > 255):
            raise DataError("codes must lie in 0..255")
        self.codes = codes.astype(np.uint8)

    def __len__(self):
        return len(self.codes)


@dataclass(frozen=True)
class WindowSpec:
    context_len: int
    target_index: int
    chunk_len: int = 2000

    def __post_init__(self):
        if self.chunk_len <= 0 or self.context_len <= 0:
            raise ConfigError("context_len and chunk_len must be positive")
        if self.context_len % self.chunk_len:
            raise ConfigError(f"context_len {self.context_len} is not a multiple of chunk_len {self.chunk_len}")


@dataclass
class EpochPlan:
    pairs: list = field(default_factory=list)  # (clip id, target index)
    seed: int = 0

    def __len__(self):
        return len(self.pairs)


# -- mu-law ---------------------------------------------------------------------

def compand(x) -> np.ndarray:
    """Mu-law compressor, [-1, 1] -> [-1, 1]."""
    x = np.clip(np.asarray(x, dtype=np.float64), -1.0, 1.0)
    return np.sign(x) * np.log1p(MU * np.abs(x)) / _LOG1P_MU


def expand(f) -> np.ndarray:
    """Inverse of :func:`compand`."""
    f = np.asarray(f, dtype=np.float64)
    return np.sign(f) * np.expm1(np.abs(f) * _LOG1P_MU) / MU


def mu_law_encode(x) -> np.ndarray:
    """Float samples in [-1, 1] (clamped) to codes 0..255; 0.0 maps to 128."""
    f = compand(x)
    return np.floor((f + 1.0) / 2.0 * MU + 0.5).astype(np.uint8)


def mu_law_decode(codes) -> np.ndarray:
    """Codes to floats at the centre of each code's companded interval."""
    c = np.asarray(codes, dtype=np.float64)
    return expand(2.0 * c / MU - 1.0).astype(np.float32)


_DECODE_TABLE = mu_law_decode(np.arange(N_CODES))


def decode_table() -> np.ndarray:
    return _DECODE_TABLE.copy()


def cell_bounds(code: int) -> tuple[float, float]:
    """Interval of linear amplitudes that encode to ``code`` (clipped to [-1, 1])."""
    lo = expand(max((code - 0.5) * 2.0 / MU - 1.0, -1.0))
    hi = expand(min((code + 0.5) * 2.0 / MU - 1.0, 1.0))
    return float(lo), float(hi)


def quantize(clip: WaveformClip) -> QuantizedClip:
    return QuantizedClip(mu_law_encode(clip.samples), clip.sample_rate)


def dequantize(clip: QuantizedClip) -> WaveformClip:
    return WaveformClip(_DECODE_TABLE[clip.codes], clip.sample_rate)


# -- WAV ------------------------------------------------------------------------

def load_wav(path, expected_rate: Optional[int] = None) -> WaveformClip:
    """Read a PCM WAV (8-bit unsigned or 16-bit signed) as mono floats in [-1, 1].

    Channels are averaged.  No resampling: if ``expected_rate`` is given and
    the header disagrees, :class:`RateMismatchError` is raised.
    """
    try:
        with wave.open(str(path), "rb") as w:
            n_channels = w.getnchannels()
            width = w.getsampwidth()
            rate = w.getframerate()
            raw = w.readframes(w.getnframes())
    except wave.Error as exc:
        msg = str(exc)
        if msg.startswith("unknown format"):
            raise UnsupportedFormatError(f"{path}: only integer PCM is supported ({msg})") from exc
        raise WavParseError(f"{path}: {msg}") from exc
    except EOFError as exc:
        raise WavParseError(f"{path}: truncated header") from exc

    if width == 1:
        samples = (np.frombuffer(raw, dtype=np.uint8).astype(np.float32) - 128.0) / 128.0
    elif width == 2:
        samples = np.frombuffer(raw, dtype="<i2").astype(np.float32) / 32768.0
    else:
        raise UnsupportedFormatError(f"{path}: {8 * width}-bit PCM is not supported (8 or 16 only)")
    usable = len(samples) - len(samples) % n_channels
    samples = samples[:usable].reshape(-1, n_channels).mean(axis=1, dtype=np.float64).astype(np.float32)

    if expected_rate is not None and rate != expected_rate:
        raise RateMismatchError(f"{path}: sample rate {rate} Hz, expected {expected_rate} Hz")
    return WaveformClip(samples, rate)


def write_wav(path, samples, sample_rate: int, bits: int = 16) -> None:
    """Write mono PCM; ``samples`` are floats in [-1, 1] (clipped)."""
    x = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0)
    if bits == 16:
        data = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2").tobytes()
    elif bits == 8:
        data = np.clip(np.round(x * 128.0) + 128, 0, 255).astype(np.uint8).tobytes()
    else:
        raise ConfigError(f"bits must be 8 or 16, got {bits}")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(bits // 8)
        w.setframerate(int(sample_rate))
        w.writeframes(data)


def write_codes_wav(path, clip: QuantizedClip, bits: int = 16) -> None:
    write_wav(path, _DECODE_TABLE[clip.codes], clip.sample_rate, bits)


def read_manifest(path) -> list[Path]:
    """One audio path per line; blank lines and ``#`` comments are skipped.

    Relative paths resolve against the manifest's directory.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    out = []
    for line in path.read_text(encoding="utf-8").splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        p = Path(line)
        out.append(p if p.is_absolute() else path.parent / p)
    return out


def load_corpus(manifest, sample_rate: int = 16000) -> list[QuantizedClip]:
    return [quantize(load_wav(p, expected_rate=sample_rate)) for p in read_manifest(manifest)]


# -- windows --------------------------------------------------------------------

def make_window(clip: QuantizedClip, spec: WindowSpec) -> tuple[np.ndarray, int]:
    """``codes[t - C : t]`` and ``codes[t]`` for target index ``t``."""
    t, c = spec.target_index, spec.context_len
    if t < c:
        raise WindowError(f"target index {t} has only {t} samples of history, need {c}")
    if t >= len(clip):
        raise WindowError(f"target index {t} beyond clip of length {len(clip)}")
    return clip.codes[t - c:t], int(clip.codes[t])


def chunk(context, chunk_len: int) -> np.ndarray:
    """Split a context into decoded float chunks, shape ``(n_chunks, chunk_len)``.

    The grid is anchored at the prediction point: the last chunk always ends
    right before the target.  Also accepts a batch ``(B, C)`` of contexts.
    """
    codes = np.asarray(context)
    length = codes.shape[-1]
    if chunk_len <= 0 or length % chunk_len:
        raise ConfigError(f"context length {length} is not a multiple of chunk_len {chunk_len}")
    return _DECODE_TABLE[codes].reshape(codes.shape[:-1] + (length // chunk_len, chunk_len))


def eligible_positions(clips: Sequence[QuantizedClip], context_len: int) -> np.ndarray:
    """Number of targets with full history in each clip."""
    return np.array([max(len(c) - context_len, 0) for c in clips], dtype=np.int64)


def plan_epoch(clips: Sequence[QuantizedClip], n_positions: int, context_len: int, seed: int) -> EpochPlan:
    """Uniform sample without replacement over every target with a full context."""
    counts = eligible_positions(clips, context_len)
    total = int(counts.sum())
    if n_positions > total:
        raise DataError(f"requested {n_positions} positions but only {total} are eligible")
    rng = np.random.default_rng(seed)
    flat = rng.choice(total, size=n_positions, replace=False)
    starts = np.concatenate([[0], np.cumsum(counts)])
    clip_ids = np.searchsorted(starts, flat, side="right") - 1
    targets = flat - starts[clip_ids] + context_len
    return EpochPlan([(int(c), int(t)) for c, t in zip(clip_ids, targets)], seed)


def gather_windows(clips: Sequence[QuantizedClip], pairs: Iterable, context_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Stack windows for ``(clip id, target index)`` pairs into ``(B, C)`` codes and ``(B,)`` targets."""
    contexts, targets = [], []
    for clip_id, t in pairs:
        ctx, tgt = make_window(clips[clip_id], WindowSpec(context_len, t, chunk_len=context_len))
        contexts.append(ctx)
        targets.append(tgt)
    if not contexts:
        return np.zeros((0, context_len), dtype=np.uint8), np.zeros(0, dtype=np.int64)
    return np.stack(contexts), np.asarray(targets, dtype=np.int64)
