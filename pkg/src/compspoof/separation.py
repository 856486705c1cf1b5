"""Speech/environment separation in the STFT domain.

Speech is estimated with a complex ratio mask predicted by a small
encoder-decoder with skip connections. The environment is taken from the
residual (mixture minus separated speech) through a closed-form soft mask
whose strength adapts to the speech/residual magnitude balance.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import autodiff as ad
from . import dsp, spectral
from .autodiff import Module, Tensor
from .autodiff.module import uniform_fan_in
from .dsp import ComplexSpectrogram, StftConfig, Waveform
from .errors import DomainError, GeometryMismatch, LengthMismatch, RateMismatch

SOFT_MASK_EPS = 1e-8
_BYPASS = np.array([1.0, 0.0]).reshape(1, 2, 1, 1)


class MaskNet(Module):
    """Two-level conv encoder-decoder producing a (real, imag) mask of shape (N, 2, F, T).

    The output layer starts at zero and is added to the identity mask (1, 0),
    so an untrained network passes the mixture through unchanged.
    """

    def __init__(self, cfg: StftConfig, channels=(16, 32), seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.channels = tuple(channels)
        c1, c2 = self.channels
        rng = np.random.default_rng(seed)
        relu_gain = np.sqrt(2.0)
        for name, cin, cout, k in (
            ("enc", 1, c1, 3),
            ("down1", c1, c2, 3),
            ("down2", c2, c2, 3),
            ("up1", 2 * c2, c2, 3),
            ("up2", c2 + c1, c1, 3),
        ):
            fan_in = cin * k * k
            self.add_param(f"{name}.weight", uniform_fan_in(rng, (cout, cin, k, k), fan_in, relu_gain))
            self.add_param(f"{name}.bias", np.zeros(cout))
        self.add_param("out.weight", np.zeros((2, c1, 1, 1)))
        self.add_param("out.bias", np.zeros(2))

    def _conv(self, name, x, stride=1, padding=1):
        p = self._params
        return ad.relu(ad.conv2d(x, p[f"{name}.weight"], p[f"{name}.bias"], stride=stride, padding=padding))

    def forward(self, features) -> Tensor:
        """features: (N, 1, F, T) array or tensor -> mask tensor (N, 2, F, T)."""
        x = ad.tensor.as_tensor(features)
        if x.ndim != 4 or x.shape[2] != self.cfg.n_bins:
            raise GeometryMismatch(f"mask net expects (N, 1, {self.cfg.n_bins}, T) input, got {x.shape}")
        e = self._conv("enc", x)
        d1 = self._conv("down1", e, stride=2)
        d2 = self._conv("down2", d1, stride=2)
        u1 = self._conv("up1", ad.concatenate([_upsample_to(d2, d1.shape), d1], axis=1))
        u2 = self._conv("up2", ad.concatenate([_upsample_to(u1, e.shape), e], axis=1))
        p = self._params
        delta = ad.conv2d(u2, p["out.weight"], p["out.bias"])
        return delta + _BYPASS

    __call__ = forward


def _upsample_to(x: Tensor, shape) -> Tensor:
    """Nearest-neighbour 2x upsampling cropped to ``shape[2:]``."""
    h, w = shape[2], shape[3]
    x = ad.take(x, np.arange(w) // 2, axis=3)
    return ad.take(x, np.arange(h) // 2, axis=2)


def mask_features(re: np.ndarray, im: np.ndarray) -> np.ndarray:
    """Standardised log-magnitude of a batch of mixture spectrograms, (N, 1, F, T)."""
    logmag = np.log(np.sqrt(re * re + im * im) + 1e-5)
    mu = logmag.mean(axis=(1, 2), keepdims=True)
    sd = logmag.std(axis=(1, 2), keepdims=True) + 1e-8
    return ((logmag - mu) / sd)[:, None]


# ---------------------------------------------------------------------------
# waveform-level operations (numpy path)
# ---------------------------------------------------------------------------


def predict_speech_mask(mix_spec: ComplexSpectrogram, net: MaskNet) -> np.ndarray:
    if mix_spec.cfg.n_bins != net.cfg.n_bins:
        raise GeometryMismatch(f"spectrogram has {mix_spec.cfg.n_bins} bins, net expects {net.cfg.n_bins}")
    feats = mask_features(mix_spec.bins.real[None], mix_spec.bins.imag[None])
    with ad.no_grad():
        return net(feats).data[0]


def apply_complex_mask(bins: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return bins * (mask[0] + 1j * mask[1])


def separate_speech(mix: Waveform, net: MaskNet):
    """Returns (speech waveform, 2xFxT mask)."""
    spec = dsp.stft(mix, net.cfg)
    mask = predict_speech_mask(spec, net)
    masked = ComplexSpectrogram(apply_complex_mask(spec.bins, mask), spec.cfg, spec.source_len, spec.sample_rate)
    return dsp.istft(masked, len(mix)), mask


def compute_residual(mix: Waveform, speech: Waveform) -> Waveform:
    if mix.sample_rate != speech.sample_rate:
        raise RateMismatch(f"{mix.sample_rate} Hz mixture vs {speech.sample_rate} Hz speech")
    if len(mix) != len(speech):
        raise LengthMismatch(f"mixture has {len(mix)} samples, speech has {len(speech)}")
    return mix.with_samples(mix.samples - speech.samples)


def env_soft_mask(s_mag: np.ndarray, r_mag: np.ndarray, eps: float = SOFT_MASK_EPS):
    """Adaptive environment mask from speech and residual magnitudes.

    ``alpha = mean(R) / (mean(S) + eps)`` and
    ``mask = 1 - tanh(alpha * S / (R + eps))``. Returns ``(mask, alpha)``.
    The mask is evaluated as ``2 * sigmoid(-2x)``, the same function without
    the cancellation that rounds ``1 - tanh(x)`` to 0 beyond x ~ 19; the far
    tail is floored at the smallest normal float so every entry stays > 0.
    """
    s_mag = np.asarray(s_mag, dtype=np.float64)
    r_mag = np.asarray(r_mag, dtype=np.float64)
    if s_mag.shape != r_mag.shape:
        raise GeometryMismatch(f"magnitude shapes differ: {s_mag.shape} vs {r_mag.shape}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    if (s_mag < 0).any() or (r_mag < 0).any():
        raise DomainError("magnitudes must be non-negative")
    alpha = float(r_mag.mean() / (s_mag.mean() + eps))
    mask = np.maximum(2.0 * expit(-2.0 * (s_mag / (r_mag + eps) * alpha)), np.finfo(np.float64).tiny)
    return mask, alpha


def separate_environment(mix: Waveform, speech: Waveform, cfg: StftConfig):
    """Returns (environment waveform, FxT soft mask, alpha)."""
    residual = compute_residual(mix, speech)
    r_spec = dsp.stft(residual, cfg)
    s_spec = dsp.stft(speech, cfg)
    mask, alpha = env_soft_mask(s_spec.magnitude, r_spec.magnitude)
    masked = ComplexSpectrogram(r_spec.bins * mask, cfg, r_spec.source_len, r_spec.sample_rate)
    return dsp.istft(masked, len(mix)), mask, alpha


@dataclass
class SeparationOutput:
    speech: Waveform
    environment: Waveform
    speech_mask: np.ndarray
    env_mask: np.ndarray
    alpha: float


def separate(mix: Waveform, net: MaskNet) -> SeparationOutput:
    speech, mask = separate_speech(mix, net)
    env, env_mask, alpha = separate_environment(mix, speech, net.cfg)
    return SeparationOutput(speech, env, mask, env_mask, alpha)


# ---------------------------------------------------------------------------
# batched graph path (training and batched inference)
# ---------------------------------------------------------------------------


def env_soft_mask_tensor(s_mag: Tensor, r_mag: Tensor, eps: float = SOFT_MASK_EPS):
    """Batched differentiable soft mask; s_mag, r_mag are (N, F, T). Returns (mask, alpha (N,))."""
    alpha = ad.mean(r_mag, axis=(1, 2)) / (ad.mean(s_mag, axis=(1, 2)) + eps)
    alpha_full = ad.broadcast_to(ad.reshape(alpha, (alpha.shape[0], 1, 1)), s_mag.shape)
    ratio = s_mag / (r_mag + eps) * alpha_full
    return 2.0 * ad.sigmoid(-2.0 * ratio), alpha  # = 1 - tanh(ratio)


def separate_batch(net: MaskNet, mix: np.ndarray) -> dict:
    """Separate a (N, L) batch of mixtures; returns graph tensors.

    Keys: ``speech`` and ``env`` (N, L), ``mask`` (N, 2, F, T),
    ``env_mask`` (N, F, T), ``alpha`` (N,).
    """
    cfg = net.cfg
    mix = np.atleast_2d(np.asarray(mix, dtype=np.float64))
    length = mix.shape[-1]
    with ad.no_grad():
        x_re, x_im = spectral.stft(mix, cfg)
    x_re, x_im = x_re.data, x_im.data
    mask = net(mask_features(x_re, x_im))
    m_re, m_im = mask[:, 0], mask[:, 1]
    s_re = m_re * x_re - m_im * x_im
    s_im = m_re * x_im + m_im * x_re
    speech = spectral.istft(s_re, s_im, cfg, length)
    residual = ad.sub(mix, speech)
    sp_re, sp_im = spectral.stft(speech, cfg)
    r_re, r_im = spectral.stft(residual, cfg)
    env_mask, alpha = env_soft_mask_tensor(spectral.magnitude(sp_re, sp_im), spectral.magnitude(r_re, r_im))
    env = spectral.istft(env_mask * r_re, env_mask * r_im, cfg, length)
    return {"speech": speech, "env": env, "mask": mask, "env_mask": env_mask, "alpha": alpha}


def mse(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(_samples(a))
    b = b if isinstance(b, Tensor) else Tensor(_samples(b))
    if a.shape != b.shape:
        raise LengthMismatch(f"shape mismatch {a.shape} vs {b.shape}")
    d = a - b
    return ad.mean(d * d)


def separation_loss(sep_speech, ref_speech, sep_env, ref_env) -> Tensor:
    """MSE(speech) + MSE(environment); accepts Waveforms, arrays or tensors."""
    return mse(sep_speech, ref_speech) + mse(sep_env, ref_env)


def _samples(x):
    return x.samples if isinstance(x, Waveform) else np.asarray(x, dtype=np.float64)
