"""Synthetic source pools for smoke tests and the scaled-down experiment.

Bona fide "speech" is a voiced harmonic tone with vibrato, a random spectral
rolloff and a syllable envelope; spoofed speech drops every harmonic above a
random cutoff (a vocoder-style band limit). Bona fide "environment" is noise
with a random first-order coloring; spoofed environment adds a fixed
comb-filter ripple to the same kind of noise. Originals are bona fide speech
in a small room (exponential reverb) with mains-style hum, never mixed.

The random coloring and rolloff are nuisance factors: each spoof trace is
plain in its own component but partly masked once the two are summed.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy import signal

from .dsp import Waveform
from .forge import POOL_NAMES, PoolSpec
from .wavio import write_wav

SPOOF_CUTOFF_HZ = (1200.0, 2200.0)
COMB_DELAY_S = 0.0025
COMB_GAIN = 0.6
HUM_HZ = 150.0


def _envelope(n: int, sr: int, rng) -> np.ndarray:
    rate = rng.uniform(3.0, 5.0)
    t = np.arange(n) / sr
    env = 0.55 + 0.45 * np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi))
    return env ** 2


def harmonic_speech(n: int, sr: int, rng, spoof: bool = False) -> np.ndarray:
    f0 = rng.uniform(120.0, 250.0)
    rolloff = rng.uniform(0.0, 0.8)
    cutoff = rng.uniform(*SPOOF_CUTOFF_HZ)
    t = np.arange(n) / sr
    vib = 1 + 0.03 * np.sin(2 * np.pi * rng.uniform(4, 7) * t)
    phase = 2 * np.pi * np.cumsum(f0 * vib) / sr
    out = np.zeros(n)
    k = 1
    while k * f0 * 1.03 < sr / 2 - 100:
        if not (spoof and k * f0 > cutoff):
            out += np.sin(k * phase + rng.uniform(0, 2 * np.pi)) / k ** rolloff
        k += 1
    return out * _envelope(n, sr, rng)


def colored_noise(n: int, sr: int, rng) -> np.ndarray:
    x = rng.standard_normal(n)
    sos = signal.butter(1, rng.uniform(300.0, 3500.0), fs=sr, output="sos")
    return signal.sosfilt(sos, x) * rng.uniform(0.5, 2.0) + rng.uniform(0.0, 0.5) * x


def comb_noise(n: int, sr: int, rng) -> np.ndarray:
    d = int(round(COMB_DELAY_S * sr))
    x = colored_noise(n + d, sr, rng)
    return x[d:] + COMB_GAIN * x[:-d]


def original_recording(n: int, sr: int, rng) -> np.ndarray:
    dry = harmonic_speech(n, sr, rng)
    m = int(0.05 * sr)
    tail = np.exp(-np.arange(m) / (0.012 * sr)) * rng.standard_normal(m) * 0.3
    tail[0] = 1.0
    wet = signal.fftconvolve(dry, tail)[:n]
    t = np.arange(n) / sr
    hum = np.sin(2 * np.pi * HUM_HZ * t) + 0.5 * np.sin(2 * np.pi * 2 * HUM_HZ * t)
    return wet + 0.15 * np.std(wet) * rng.standard_normal(n) + 0.5 * np.std(wet) * hum


GENERATORS = {
    "bonafide_speech": lambda n, sr, rng: harmonic_speech(n, sr, rng, spoof=False),
    "spoof_speech": lambda n, sr, rng: harmonic_speech(n, sr, rng, spoof=True),
    "bonafide_env": colored_noise,
    "spoof_env": comb_noise,
    "original_full": original_recording,
}


def make_toy_pools(out_dir, n: int = 30, sample_rate: int = 8000, duration: float = 1.0,
                   seed: int = 0) -> PoolSpec:
    """Write ``n`` files per pool under ``out_dir`` plus ``pools.cfg``; returns the spec."""
    out_dir = Path(out_dir)
    length = int(round(duration * sample_rate))
    for p_idx, pool in enumerate(POOL_NAMES):
        d = out_dir / pool
        d.mkdir(parents=True, exist_ok=True)
        for i in range(n):
            rng = np.random.default_rng([seed, p_idx, i])
            x = GENERATORS[pool](length, sample_rate, rng)
            x = 0.9 * x / np.max(np.abs(x))
            write_wav(d / f"{pool}_{i:04d}.wav", Waveform(x, sample_rate))
    (out_dir / "pools.cfg").write_text("".join(f"{name}={name}\n" for name in POOL_NAMES))
    return PoolSpec(**{name: out_dir / name for name in POOL_NAMES})
