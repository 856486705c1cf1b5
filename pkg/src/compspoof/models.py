"""Model bundles, configuration records and checkpoint I/O."""
from __future__ import annotations

import dataclasses
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Module, checkpoint
from .detectors import Detector
from .dsp import StftConfig
from .errors import CheckpointError, ConfigError, GeometryMismatch
from .separation import MaskNet

SYSTEMS = ("sef_jl", "sef", "baseline")


@dataclass(frozen=True)
class ModelConfig:
    sample_rate: int = 16000
    win_len: int = 1024
    hop_len: int = 256
    fft_size: int = 1024
    chunk_s: float = 4.0
    chunk_hop_s: float = 2.0
    sep_channels: tuple = (16, 32)
    embed_dim: int = 64
    embed_hidden: int = 32

    @property
    def stft(self) -> StftConfig:
        return StftConfig(self.win_len, self.hop_len, self.fft_size)

    @property
    def chunk_len(self) -> int:
        return int(round(self.chunk_s * self.sample_rate))

    @property
    def chunk_hop(self) -> int:
        return int(round(self.chunk_hop_s * self.sample_rate))

    def to_vector(self) -> np.ndarray:
        return np.array([self.sample_rate, self.win_len, self.hop_len, self.fft_size, self.chunk_s,
                         self.chunk_hop_s, *self.sep_channels, self.embed_dim, self.embed_hidden], dtype=float)

    @classmethod
    def from_vector(cls, v) -> "ModelConfig":
        v = [float(x) for x in v]
        if len(v) != 10:
            raise CheckpointError("malformed model geometry record")
        return cls(int(v[0]), int(v[1]), int(v[2]), int(v[3]), v[4], v[5], (int(v[6]), int(v[7])),
                   int(v[8]), int(v[9]))


@dataclass
class TrainConfig:
    """Every key accepted in a training config file."""

    epochs_total: int = 20
    joint_start_epoch: int = 5
    kappa: float = 10.0
    lr_sepa: float = 1e-3
    lr_detect: float = 1e-5
    batch_size: int = 8
    seed: int = 0
    system: str = "sef_jl"
    # model geometry
    sample_rate: int = 16000
    win_len: int = 1024
    hop_len: int = 256
    fft_size: int = 1024
    chunk_s: float = 4.0
    chunk_hop_s: float = 2.0
    sep_channels: tuple = field(default=(16, 32))
    embed_dim: int = 64
    embed_hidden: int = 32

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.epochs_total < 1:
            raise ConfigError("epochs_total must be >= 1")
        if not 1 <= self.joint_start_epoch <= self.epochs_total:
            raise ConfigError(
                f"joint_start_epoch must lie in [1, epochs_total={self.epochs_total}], got {self.joint_start_epoch}")
        if self.kappa < 0:
            raise ConfigError("kappa must be non-negative")
        if self.lr_sepa <= 0 or self.lr_detect <= 0:
            raise ConfigError("learning rates must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.system not in SYSTEMS:
            raise ConfigError(f"system must be one of {SYSTEMS}, got {self.system!r}")
        try:
            self.model_config().stft
        except ConfigError:
            raise
        except Exception as exc:  # noqa: BLE001
            raise ConfigError(str(exc)) from exc

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.sample_rate, self.win_len, self.hop_len, self.fft_size, self.chunk_s,
                           self.chunk_hop_s, tuple(self.sep_channels), self.embed_dim, self.embed_hidden)

    def phase(self, epoch: int) -> str:
        """Training phase of a 1-based epoch."""
        if self.system == "baseline":
            return "baseline"
        if self.system == "sef" or epoch < self.joint_start_epoch:
            return "pretrain"
        return "joint"

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    # -- key=value files --------------------------------------------------
    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            lines.append(f"{f.name}={value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, **overrides) -> "TrainConfig":
        types = {f.name: f for f in dataclasses.fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            values[key] = _coerce(key, value, types[key].default)
        values.update({k: v for k, v in overrides.items() if v is not None})
        try:
            return cls(**values)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_file(cls, path, **overrides) -> "TrainConfig":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        return cls.from_text(path.read_text(encoding="utf-8"), **overrides)


def _coerce(key, value: str, default):
    try:
        if isinstance(default, bool):
            return value.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple):
            return tuple(int(v) for v in value.split(","))
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {value!r}") from exc
    return value


class CompSpoofSystem(Module):
    """Either the separation-enhanced system (separator + three binary detectors)
    or the five-class baseline detector, with shared geometry."""

    def __init__(self, cfg: ModelConfig = ModelConfig(), kind: str = "separation", seed: int = 0):
        super().__init__()
        if kind not in ("separation", "baseline"):
            raise ValueError(f"unknown system kind {kind!r}")
        self.cfg = cfg
        self.kind = kind
        stft = cfg.stft
        det = dict(dim=cfg.embed_dim, hidden=cfg.embed_hidden)
        if kind == "separation":
            self.separator = self.add_child("separator", MaskNet(stft, cfg.sep_channels, seed=seed))
            self.mixture = self.add_child("mixture", Detector(stft, "mixture", seed=seed + 100, **det))
            self.speech = self.add_child("speech", Detector(stft, "speech", seed=seed + 200, **det))
            self.environment = self.add_child("environment", Detector(stft, "environment", seed=seed + 300, **det))
        else:
            self.baseline = self.add_child("baseline", Detector(stft, "baseline", n_classes=5, seed=seed + 400, **det))

    def detector_params(self):
        return [p for name, p in self.named_parameters().items() if not name.startswith("separator.")]

    def separator_params(self):
        return [p for name, p in self.named_parameters().items() if name.startswith("separator.")]

    # -- checkpoints ------------------------------------------------------
    def checkpoint_tensors(self, extra=None) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict()
        out["meta.model"] = self.cfg.to_vector()
        out["meta.kind"] = np.array([0.0 if self.kind == "separation" else 1.0])
        for name, value in self.state_dict().items():
            out[name] = value
        if extra:
            out.update(extra)
        return out

    def save(self, path, extra=None) -> None:
        checkpoint.save(path, self.checkpoint_tensors(extra))

    @classmethod
    def load(cls, path, expect: ModelConfig | None = None):
        """Returns (system, full tensor dict)."""
        tensors = checkpoint.load(path)
        try:
            cfg = ModelConfig.from_vector(tensors["meta.model"])
            kind = "separation" if tensors["meta.kind"][0] == 0.0 else "baseline"
        except KeyError as exc:
            raise CheckpointError(f"{path}: missing metadata record {exc}") from exc
        if expect is not None and expect != cfg:
            raise GeometryMismatch(f"{path}: checkpoint geometry {cfg} differs from expected {expect}")
        system = cls(cfg, kind)
        try:
            system.load_state_dict(tensors)
        except (KeyError, ValueError) as exc:
            raise CheckpointError(f"{path}: {exc}") from exc
        return system, tensors
