"""Small trainable spoofing detectors and their loss primitives.

Each detector is a convolutional front-end over the log-power STFT
(mean-pooled over time to a fixed-size embedding) followed by an affine
classification head. The mixture, speech and environment detectors are
binary; the baseline detector predicts the five classes directly.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import spectral
from .autodiff import Module, Tensor
from .autodiff.module import uniform_fan_in
from .dsp import StftConfig, Waveform
from .errors import ShapeError, SignalTooShort

PROB_FLOOR = 1e-12
# log-power features sit roughly in [-14, 4]; shift/scale them to O(1)
_FEAT_SHIFT = 4.0
_FEAT_SCALE = 0.25


class Embedding(Module):
    """Log-power STFT -> 3 x (conv1d over time, ReLU) -> temporal mean, dimension ``dim``."""

    def __init__(self, cfg: StftConfig, dim: int = 64, hidden: int = 32, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.dim = dim
        rng = np.random.default_rng(seed)
        gain = np.sqrt(2.0)
        for name, cin, cout in (("conv1", cfg.n_bins, hidden), ("conv2", hidden, dim), ("conv3", dim, dim)):
            self.add_param(f"{name}.weight", uniform_fan_in(rng, (cout, cin, 3), cin * 3, gain))
            self.add_param(f"{name}.bias", np.zeros(cout))

    def features(self, wave) -> Tensor:
        wave = ad.tensor.as_tensor(wave)
        if wave.shape[-1] < self.cfg.win_len:
            raise SignalTooShort(f"{wave.shape[-1]} samples is shorter than one STFT frame")
        re, im = spectral.stft(wave, self.cfg)
        return (spectral.log_power(re, im) + _FEAT_SHIFT) * _FEAT_SCALE

    def forward(self, wave) -> Tensor:
        """wave: (N, L) -> (N, dim)."""
        h = self.features(wave)
        p = self._params
        for name in ("conv1", "conv2", "conv3"):
            h = ad.relu(ad.conv1d(h, p[f"{name}.weight"], p[f"{name}.bias"], padding=1))
        return ad.mean(h, axis=2)

    __call__ = forward


class Head(Module):
    """Affine map from the embedding to class logits."""

    def __init__(self, dim: int, n_classes: int = 2, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.n_classes = n_classes
        self.add_param("weight", uniform_fan_in(rng, (dim, n_classes), dim))
        self.add_param("bias", np.zeros(n_classes))

    def logits(self, features) -> Tensor:
        features = ad.tensor.as_tensor(features)
        if features.shape[-1] != self._params["weight"].shape[0]:
            raise ShapeError(f"head expects {self._params['weight'].shape[0]}-d features, got {features.shape}")
        return ad.linear(features, self._params["weight"], self._params["bias"])


class Detector(Module):
    """Embedding plus head; ``role`` names the component it judges."""

    def __init__(self, cfg: StftConfig, role: str, n_classes: int = 2, dim: int = 64,
                 hidden: int = 32, seed: int = 0):
        super().__init__()
        self.role = role
        self.embed = self.add_child("embed", Embedding(cfg, dim, hidden, seed))
        self.head = self.add_child("head", Head(dim, n_classes, seed + 1))

    def logits(self, wave) -> Tensor:
        return self.head.logits(self.embed(wave))

    def probs(self, wave) -> Tensor:
        return ad.softmax(self.logits(wave), axis=-1)

    def predict(self, wave: Waveform) -> np.ndarray:
        with ad.no_grad():
            return self.probs(wave.samples[None]).data[0]


def embed(w: Waveform, params: Embedding) -> Tensor:
    return params(w.samples[None])[0]


def classify(features, head: Head) -> Tensor:
    """Softmax probabilities of ``head`` on a feature vector or a (N, D) batch."""
    return ad.softmax(head.logits(features), axis=-1)


def _one_hot(labels, n: int) -> np.ndarray:
    labels = np.atleast_1d(np.asarray(labels, dtype=int))
    if labels.min() < 0 or labels.max() >= n:
        raise ValueError(f"labels must lie in [0, {n})")
    return np.eye(n)[labels]


def cross_entropy(p: Tensor, labels) -> Tensor:
    """Mean over the batch of -log p[label]; probabilities clamped at 1e-12."""
    p = ad.tensor.as_tensor(p)
    batch = p.ndim == 2
    p2 = p if batch else ad.reshape(p, (1, p.shape[0]))
    picked = ad.tsum(p2 * _one_hot(labels, p2.shape[1]), axis=1)
    return ad.mean(-ad.log(ad.clip(picked, PROB_FLOOR, 1.0)))


def kl_divergence(p_ref, p_sepa) -> Tensor:
    """KL(p_ref || p_sepa) in nats, averaged over the batch.

    ``p_ref`` may be a constant array (teacher, no gradient) or a tensor.
    """
    p_ref = ad.tensor.as_tensor(p_ref)
    p_sepa = ad.tensor.as_tensor(p_sepa)
    if p_ref.shape != p_sepa.shape:
        raise ShapeError(f"distribution shapes differ: {p_ref.shape} vs {p_sepa.shape}")
    ref_c = ad.clip(p_ref, PROB_FLOOR, 1.0)
    sep_c = ad.clip(p_sepa, PROB_FLOOR, 1.0)
    terms = p_ref * (ad.log(ref_c) - ad.log(sep_c))
    if p_ref.ndim == 1:
        return ad.tsum(terms)
    return ad.mean(ad.tsum(terms, axis=1))


def five_class_baseline(w: Waveform, params: Detector) -> np.ndarray:
    return params.predict(w)
