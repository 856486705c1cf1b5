"""Mono 16-bit PCM WAV reading and writing (stdlib ``wave``)."""
from __future__ import annotations

import wave
from pathlib import Path

import numpy as np

from .dsp import Waveform
from .errors import CompSpoofError

PCM_SCALE = 32768.0


class WavFormatError(CompSpoofError):
    pass


def quantize(samples: np.ndarray) -> np.ndarray:
    """Float samples -> int16 codes (round to nearest, clipped)."""
    return np.clip(np.round(np.asarray(samples) * PCM_SCALE), -32768, 32767).astype(np.int16)


def dequantize(codes: np.ndarray) -> np.ndarray:
    return codes.astype(np.float64) / PCM_SCALE


def read_wav(path) -> Waveform:
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as f:
            channels = f.getnchannels()
            width = f.getsampwidth()
            rate = f.getframerate()
            raw = f.readframes(f.getnframes())
    except (wave.Error, EOFError) as exc:
        raise WavFormatError(f"{path}: {exc}") from exc
    if width != 2:
        raise WavFormatError(f"{path}: only 16-bit PCM is supported (got {8 * width}-bit)")
    if channels != 1:
        raise WavFormatError(f"{path}: only mono audio is supported (got {channels} channels)")
    codes = np.frombuffer(raw, dtype="<i2")
    return Waveform(dequantize(codes), rate)


def write_wav(path, w: Waveform) -> None:
    write_codes(path, quantize(w.samples), w.sample_rate)


def write_codes(path, codes: np.ndarray, sample_rate: int) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(int(sample_rate))
        f.writeframes(np.asarray(codes, dtype="<i2").tobytes())
