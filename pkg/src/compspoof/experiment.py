"""Scaled-down comparison of the five-class baseline, the separation system
with joint learning, and the same system without joint learning.

Each seed forges its own toy corpus, trains the three systems on it and
scores the best-on-dev model of each on the eval split.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .forge import ForgeConfig, build_corpus, stratified_split, write_manifest
from .inference import classification_report, evaluate, load_entry_waves, predict_many
from .models import CompSpoofSystem, TrainConfig
from .separation import separate_batch
from .toy import make_toy_pools
from .training import Batch, chunk_items, load_items, train

log = logging.getLogger(__name__)


@dataclass
class ToyExperimentConfig:
    seeds: tuple = (0, 1, 2)
    systems: tuple = ("baseline", "sef_jl", "sef")
    n_per_class: int = 28
    ratios: tuple = (0.6, 0.1, 0.3)
    duration_s: float = 0.75
    sample_rate: int = 8000
    epochs_total: int = 20
    joint_start_epoch: int = 5
    lr_sepa: float = 1e-3
    lr_detect: float = 1e-3
    batch_size: int = 8
    win_len: int = 128
    hop_len: int = 32
    chunk_s: float = 0.5
    chunk_hop_s: float = 0.25
    sep_channels: tuple = (8, 16)

    def train_config(self, system: str, seed: int) -> TrainConfig:
        return TrainConfig(
            epochs_total=self.epochs_total, joint_start_epoch=self.joint_start_epoch, lr_sepa=self.lr_sepa,
            lr_detect=self.lr_detect, batch_size=self.batch_size, seed=seed, system=system,
            sample_rate=self.sample_rate, win_len=self.win_len, hop_len=self.hop_len, fft_size=self.win_len,
            chunk_s=self.chunk_s, chunk_hop_s=self.chunk_hop_s, sep_channels=tuple(self.sep_channels),
        )

    def forge_config(self) -> ForgeConfig:
        return ForgeConfig(sample_rate=self.sample_rate, min_duration=self.chunk_s,
                           max_duration=max(self.duration_s, self.chunk_s) * 2)


@dataclass
class RunResult:
    seed: int
    system: str
    eval_macro_f1: float
    component_f1: float | None
    best_epoch: int
    seconds: float


@dataclass
class ExperimentResult:
    runs: list = field(default_factory=list)

    def scores(self, system: str, key: str = "eval_macro_f1") -> list:
        return [getattr(r, key) for r in sorted(self.runs, key=lambda r: r.seed) if r.system == system]

    def mean(self, system: str, key: str = "eval_macro_f1") -> float:
        return float(np.mean(self.scores(system, key)))

    def to_json(self) -> str:
        return json.dumps([asdict(r) for r in self.runs], indent=2)


def component_segment_f1(system: CompSpoofSystem, entries, root) -> float:
    """Mean of the speech and environment heads' binary macro-F1 over mixed eval chunks.

    The heads judge separated components, exactly as at inference time.
    """
    cfg = system.cfg
    mixed = [e for e in entries if e.label.is_mixed]
    batch = Batch.collate(chunk_items(load_items(mixed, root, cfg.sample_rate), cfg.chunk_len, cfg.chunk_hop))
    with ad.no_grad():
        sep = separate_batch(system.separator, batch.mixture)
        p_speech = system.speech.probs(sep["speech"]).data
        p_env = system.environment.probs(sep["env"]).data
    f_speech = classification_report(batch.speech_spoofed, p_speech.argmax(axis=1), n_classes=2).macro_f1
    f_env = classification_report(batch.env_spoofed, p_env.argmax(axis=1), n_classes=2).macro_f1
    return 0.5 * (f_speech + f_env)


def prepare_corpus(work_dir, cfg: ToyExperimentConfig, seed: int):
    work_dir = Path(work_dir)
    pools = make_toy_pools(work_dir / "pools", cfg.n_per_class, cfg.sample_rate, cfg.duration_s, seed)
    root = work_dir / "corpus"
    entries = build_corpus(pools, cfg.n_per_class, seed, root, cfg.forge_config())
    entries = stratified_split(entries, cfg.ratios, seed)
    write_manifest(root / "manifest.jsonl", entries)
    return entries, root


def run_toy_experiment(work_dir, cfg: ToyExperimentConfig = ToyExperimentConfig()) -> ExperimentResult:
    work_dir = Path(work_dir)
    result = ExperimentResult()
    for seed in cfg.seeds:
        entries, root = prepare_corpus(work_dir / f"seed{seed}", cfg, seed)
        eval_entries = [e for e in entries if e.split == "eval"]
        waves = load_entry_waves(eval_entries, root)
        for system_name in cfg.systems:
            t0 = time.time()
            trained = train(entries, root, cfg.train_config(system_name, seed))
            best = trained.best_system()
            preds = predict_many(best, waves)
            f1 = evaluate({u: r[0] for u, r in preds.items()}, eval_entries, "eval").macro_f1
            comp = component_segment_f1(best, eval_entries, root) if best.kind == "separation" else None
            run = RunResult(seed, system_name, f1, comp, trained.best_epoch, time.time() - t0)
            log.info("seed=%d system=%s eval_macro_f1=%.4f component_f1=%s best_epoch=%d seconds=%.1f",
                     seed, system_name, f1, "-" if comp is None else f"{comp:.4f}", run.best_epoch, run.seconds)
            result.runs.append(run)
    return result
