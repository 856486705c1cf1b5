"""Deterministic signal-processing primitives.

Everything here works on 64-bit float numpy buffers. The STFT is "centered":
the signal is reflect-padded by ``fft_size // 2`` on both sides, so frame ``t``
is centred on sample ``t * hop_len`` and ``n_frames = 1 + len // hop_len``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache

import numpy as np
from scipy.signal import resample_poly

from .errors import (
    ConfigError,
    EmptySignal,
    GeometryMismatch,
    LengthMismatch,
    RateMismatch,
    SignalTooShort,
    SilentSignal,
)

DEFAULT_RATE = 16000
DEFAULT_PEAK = 0.95


@dataclass(frozen=True, eq=False)
class Waveform:
    """Mono sample buffer plus its sample rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError(f"mono waveform expected, got shape {samples.shape}")
        if int(self.sample_rate) <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("waveform contains non-finite samples")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate

    def with_samples(self, samples) -> "Waveform":
        return Waveform(samples, self.sample_rate)


@dataclass(frozen=True)
class StftConfig:
    win_len: int = 1024
    hop_len: int = 256
    fft_size: int = 1024
    window: str = "hann"

    def __post_init__(self):
        if not 0 < self.hop_len <= self.win_len <= self.fft_size:
            raise ConfigError(
                f"need 0 < hop_len <= win_len <= fft_size, got "
                f"{self.hop_len}/{self.win_len}/{self.fft_size}"
            )
        if self.fft_size % 2:
            raise ConfigError("fft_size must be even")
        if self.window != "hann":
            raise ConfigError(f"unsupported window '{self.window}'")
        if not _is_cola(self):
            raise ConfigError(
                f"hann window of {self.win_len} is not constant-overlap-add at hop {self.hop_len}"
            )

    @classmethod
    def from_ms(cls, sample_rate: int, win_ms: float = 64.0, hop_ms: float = 16.0) -> "StftConfig":
        win = int(round(sample_rate * win_ms / 1000.0))
        hop = int(round(sample_rate * hop_ms / 1000.0))
        return cls(win_len=win, hop_len=hop, fft_size=win + (win % 2))

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1

    def n_frames(self, length: int) -> int:
        return 1 + length // self.hop_len


@dataclass(frozen=True, eq=False)
class ComplexSpectrogram:
    bins: np.ndarray  # (F, T) complex
    cfg: StftConfig
    source_len: int = field(default=0)
    sample_rate: int = DEFAULT_RATE

    def __post_init__(self):
        if self.bins.ndim != 2 or self.bins.shape[0] != self.cfg.n_bins:
            raise GeometryMismatch(
                f"expected {self.cfg.n_bins} bins, got array of shape {self.bins.shape}"
            )

    @property
    def magnitude(self) -> np.ndarray:
        return np.abs(self.bins)


# ---------------------------------------------------------------------------
# windows and framing geometry (shared with the differentiable STFT)
# ---------------------------------------------------------------------------


@lru_cache(maxsize=32)
def analysis_window(cfg: StftConfig) -> np.ndarray:
    """Periodic Hann of ``win_len`` centred inside an ``fft_size`` frame."""
    n = np.arange(cfg.win_len)
    hann = 0.5 - 0.5 * np.cos(2.0 * np.pi * n / cfg.win_len)
    out = np.zeros(cfg.fft_size)
    start = (cfg.fft_size - cfg.win_len) // 2
    out[start:start + cfg.win_len] = hann
    out.setflags(write=False)
    return out


def _is_cola(cfg: StftConfig) -> bool:
    w2 = analysis_window(cfg) ** 2
    acc = np.zeros(cfg.hop_len)
    padded = np.concatenate([w2, np.zeros((-len(w2)) % cfg.hop_len)])
    for k in range(0, len(padded), cfg.hop_len):
        acc += padded[k:k + cfg.hop_len]
    return bool(np.ptp(acc) <= 1e-9 * acc.max())


def reflect_indices(length: int, pad: int) -> np.ndarray:
    """Indices of ``np.pad(x, pad, mode='reflect')`` into ``x``."""
    if pad >= length:
        raise SignalTooShort(f"reflect padding of {pad} needs more than {length} samples")
    idx = np.arange(-pad, length + pad)
    idx = np.abs(idx)
    over = idx >= length
    idx[over] = 2 * (length - 1) - idx[over]
    return idx


@lru_cache(maxsize=64)
def frame_indices(length: int, cfg: StftConfig) -> np.ndarray:
    """(T, fft_size) sample indices of every analysis frame into the *unpadded* signal."""
    pad = cfg.fft_size // 2
    padded = reflect_indices(length, pad)
    starts = np.arange(cfg.n_frames(length)) * cfg.hop_len
    idx = padded[starts[:, None] + np.arange(cfg.fft_size)[None, :]]
    idx.setflags(write=False)
    return idx


@lru_cache(maxsize=64)
def ola_indices(n_frames: int, cfg: StftConfig) -> np.ndarray:
    """(T, fft_size) positions of each synthesis frame in the padded output."""
    starts = np.arange(n_frames) * cfg.hop_len
    idx = starts[:, None] + np.arange(cfg.fft_size)[None, :]
    idx.setflags(write=False)
    return idx


@lru_cache(maxsize=64)
def inverse_envelope(n_frames: int, cfg: StftConfig) -> np.ndarray:
    """Reciprocal of the summed squared window; zero where nothing overlaps."""
    total = (n_frames - 1) * cfg.hop_len + cfg.fft_size
    env = np.zeros(total)
    w2 = analysis_window(cfg) ** 2
    for t in range(n_frames):
        env[t * cfg.hop_len:t * cfg.hop_len + cfg.fft_size] += w2
    inv = np.zeros_like(env)
    nz = env > 1e-10
    inv[nz] = 1.0 / env[nz]
    inv.setflags(write=False)
    return inv


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------


def resample(w: Waveform, target_rate: int) -> Waveform:
    """Band-limited polyphase resampling (Kaiser-windowed sinc FIR)."""
    if len(w) == 0:
        raise EmptySignal("cannot resample an empty waveform")
    if target_rate <= 0:
        raise ValueError(f"target_rate must be positive, got {target_rate}")
    if target_rate == w.sample_rate:
        return w
    ratio = Fraction(int(target_rate), w.sample_rate)
    out = resample_poly(w.samples, ratio.numerator, ratio.denominator)
    return Waveform(out, target_rate)


def peak_normalize(w: Waveform, peak: float = DEFAULT_PEAK) -> Waveform:
    current = np.max(np.abs(w.samples)) if len(w) else 0.0
    if current == 0.0:
        raise SilentSignal("cannot peak-normalize a silent signal")
    if abs(current - peak) <= 4 * np.finfo(float).eps * peak:
        return w
    return w.with_samples(w.samples * (peak / current))


def rms(w: Waveform) -> float:
    if len(w) == 0:
        raise EmptySignal("rms of an empty waveform")
    return float(np.sqrt(np.mean(w.samples ** 2)))


def snr_db(signal: Waveform, noise: Waveform) -> float:
    return 20.0 * math.log10(rms(signal) / rms(noise))


def mix_at_snr(speech: Waveform, env: Waveform, snr_db: float):
    """Scale ``env`` so speech sits ``snr_db`` above it and add the two.

    Returns ``(mixture, scaled_env, gain)``.
    """
    if speech.sample_rate != env.sample_rate:
        raise RateMismatch(f"{speech.sample_rate} Hz speech vs {env.sample_rate} Hz env")
    if len(speech) != len(env):
        raise LengthMismatch(f"speech has {len(speech)} samples, env has {len(env)}")
    rs, re = rms(speech), rms(env)
    if rs == 0.0:
        raise SilentSignal("speech is silent")
    if re == 0.0:
        raise SilentSignal("environment is silent")
    gain = (rs / re) * 10.0 ** (-snr_db / 20.0)
    scaled = env.with_samples(env.samples * gain)
    return speech.with_samples(speech.samples + scaled.samples), scaled, gain


def stft(w: Waveform, cfg: StftConfig = StftConfig()) -> ComplexSpectrogram:
    n = len(w)
    if n < cfg.win_len or n <= cfg.fft_size // 2:
        raise SignalTooShort(f"{n} samples is shorter than one {cfg.win_len}-sample window")
    frames = w.samples[frame_indices(n, cfg)] * analysis_window(cfg)
    bins = np.fft.rfft(frames, n=cfg.fft_size, axis=-1).T
    return ComplexSpectrogram(np.ascontiguousarray(bins), cfg, n, w.sample_rate)


def istft(s: ComplexSpectrogram, out_len: int | None = None) -> Waveform:
    """Weighted overlap-add inverse of :func:`stft`."""
    cfg = s.cfg
    if out_len is None:
        out_len = s.source_len
    n_frames = s.bins.shape[1]
    if s.source_len and out_len > s.source_len:
        raise GeometryMismatch(f"out_len {out_len} exceeds analysed length {s.source_len}")
    if s.source_len and cfg.n_frames(s.source_len) != n_frames:
        raise GeometryMismatch(
            f"{n_frames} frames do not match a {s.source_len}-sample source at hop {cfg.hop_len}"
        )
    frames = np.fft.irfft(s.bins.T, n=cfg.fft_size, axis=-1) * analysis_window(cfg)
    idx = ola_indices(n_frames, cfg)
    total = idx[-1, -1] + 1
    y = np.bincount(idx.ravel(), weights=frames.ravel(), minlength=total)
    y *= inverse_envelope(n_frames, cfg)
    pad = cfg.fft_size // 2
    return Waveform(y[pad:pad + out_len], s.sample_rate)


def chunk(w: Waveform, win_s: float = 4.0, hop_s: float = 2.0) -> list[Waveform]:
    """Fixed windows at hop spacing; the last one is zero-padded to full length."""
    if win_s <= 0 or not 0 < hop_s <= win_s:
        raise ValueError(f"need win_s > 0 and 0 < hop_s <= win_s, got {win_s}/{hop_s}")
    win = int(round(win_s * w.sample_rate))
    hop = int(round(hop_s * w.sample_rate))
    return [w.with_samples(c) for c in chunk_array(w.samples, win, hop)]


def n_chunks(length: int, win: int, hop: int) -> int:
    return max(1, math.ceil((length - win) / hop) + 1)


def chunk_array(x: np.ndarray, win: int, hop: int) -> np.ndarray:
    """(n_chunks, win) view-free copy of ``x`` split as in :func:`chunk`."""
    count = n_chunks(len(x), win, hop)
    out = np.zeros((count, win))
    for i in range(count):
        seg = x[i * hop:i * hop + win]
        out[i, :len(seg)] = seg
    return out
