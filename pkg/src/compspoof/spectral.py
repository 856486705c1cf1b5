"""STFT/ISTFT as differentiable graph operations.

Same geometry as :mod:`compspoof.dsp` but expressed with real DFT matrices,
gathers and scatter-adds so that gradients reach the waveform. Complex
spectrograms are carried as a (real, imag) pair of tensors shaped (N, F, T).
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .dsp import StftConfig, analysis_window, frame_indices, inverse_envelope, ola_indices
from .errors import SignalTooShort

MAG_FLOOR = 1e-12


@lru_cache(maxsize=16)
def _forward_basis(cfg: StftConfig):
    n = np.arange(cfg.fft_size)[:, None]
    k = np.arange(cfg.n_bins)[None, :]
    phase = 2.0 * np.pi * n * k / cfg.fft_size
    w = analysis_window(cfg)[:, None]
    return w * np.cos(phase), -w * np.sin(phase)


@lru_cache(maxsize=16)
def _inverse_basis(cfg: StftConfig):
    eye = np.eye(cfg.n_bins)
    w = analysis_window(cfg)[None, :]
    real = np.fft.irfft(eye, n=cfg.fft_size, axis=-1) * w
    imag = np.fft.irfft(1j * eye, n=cfg.fft_size, axis=-1) * w
    return real, imag


def stft(x, cfg: StftConfig):
    """x: (N, L) waveform tensor -> (re, im), each (N, F, T)."""
    x = ad.tensor.as_tensor(x)
    length = x.shape[-1]
    if length < cfg.win_len or length <= cfg.fft_size // 2:
        raise SignalTooShort(f"{length} samples is shorter than one {cfg.win_len}-sample window")
    cos_b, sin_b = _forward_basis(cfg)
    frames = ad.take(x, frame_indices(length, cfg), axis=-1)  # (N, T, fft)
    re = ad.matmul(frames, cos_b).transpose(0, 2, 1)
    im = ad.matmul(frames, sin_b).transpose(0, 2, 1)
    return re, im


def istft(re, im, cfg: StftConfig, length: int):
    """(N, F, T) real/imag tensors -> (N, length) waveform tensor."""
    n_frames = re.shape[-1]
    inv_re, inv_im = _inverse_basis(cfg)
    frames = ad.matmul(re.transpose(0, 2, 1), inv_re) + ad.matmul(im.transpose(0, 2, 1), inv_im)
    idx = ola_indices(n_frames, cfg)
    y = ad.scatter_add(frames, idx, idx[-1, -1] + 1) * inverse_envelope(n_frames, cfg)
    pad = cfg.fft_size // 2
    return y[:, pad:pad + length]


def magnitude(re, im):
    """Differentiable |z| with a floor inside the root so the gradient exists at zero."""
    return ad.sqrt(re * re + im * im + MAG_FLOOR)


def log_power(re, im, floor: float = 1e-6):
    return ad.log(re * re + im * im + floor)
