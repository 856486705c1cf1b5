"""Two-phase training of the separator and detectors under the composite objective.

Epochs before ``joint_start_epoch`` train every model on its own loss
(separator on waveform MSE, detectors on reference components). From then on
all models are optimised together on

    kappa * L_sepa + CE_mixed + CE_speech + CE_env + KL_speech + KL_env

where the component CE terms and the KL consistency terms use the
*separated* components, and the KL teacher is the detector's prediction on
the reference component (computed without gradient).
"""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import dsp
from .autodiff import Adam, Tensor
from .detectors import cross_entropy, kl_divergence
from .errors import CompSpoofError, EmptyBatch, NumericError
from .forge import ClassLabel, ManifestEntry, stem_paths
from .inference import evaluate, predict_many
from .models import CompSpoofSystem, TrainConfig
from .separation import separate_batch, separation_loss
from .wavio import read_wav

log = logging.getLogger(__name__)

MODEL_NAMES = ("separator", "mixture", "speech", "environment")


class NumericAbort(CompSpoofError):
    """Every step of an epoch produced a non-finite loss."""


@dataclass
class TrainSample:
    mixture: np.ndarray
    ref_speech: np.ndarray | None
    ref_env: np.ndarray | None
    class_label: ClassLabel

    @property
    def is_mixed(self) -> bool:
        return self.class_label.is_mixed

    @property
    def speech_spoofed(self) -> bool:
        return self.class_label.speech_spoofed

    @property
    def env_spoofed(self) -> bool:
        return self.class_label.env_spoofed


@dataclass
class Batch:
    """Equal-length chunks stacked as (B, L); references are zero for class-0 rows."""

    mixture: np.ndarray
    ref_speech: np.ndarray
    ref_env: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.labels)

    @property
    def is_mixed(self) -> np.ndarray:
        return self.labels != 0

    @property
    def speech_spoofed(self) -> np.ndarray:
        return np.isin(self.labels, (2, 4)).astype(int)

    @property
    def env_spoofed(self) -> np.ndarray:
        return np.isin(self.labels, (3, 4)).astype(int)

    @classmethod
    def collate(cls, samples) -> "Batch":
        if not samples:
            raise EmptyBatch("batch is empty")
        length = len(samples[0].mixture)
        if any(len(s.mixture) != length for s in samples):
            raise ValueError("batch chunks must share one length")
        zeros = np.zeros(length)
        return cls(
            np.stack([s.mixture for s in samples]),
            np.stack([s.ref_speech if s.ref_speech is not None else zeros for s in samples]),
            np.stack([s.ref_env if s.ref_env is not None else zeros for s in samples]),
            np.array([int(s.class_label) for s in samples]),
        )

    def subset(self, idx) -> "Batch":
        return Batch(self.mixture[idx], self.ref_speech[idx], self.ref_env[idx], self.labels[idx])


@dataclass
class LossBundle:
    l_sepa: float = 0.0
    l_cls_mixed: float = 0.0
    l_cls_speech: float = 0.0
    l_cls_env: float = 0.0
    l_cons_speech: float = 0.0
    l_cons_env: float = 0.0
    l_joint: float = 0.0

    @property
    def l_cons(self) -> float:
        return self.l_cons_speech + self.l_cons_env

    def reassemble(self, kappa: float) -> float:
        return (kappa * self.l_sepa + self.l_cls_mixed + self.l_cls_speech + self.l_cls_env
                + (self.l_cons_speech + self.l_cons_env))

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def average(cls, bundles) -> "LossBundle":
        if not bundles:
            return cls()
        return cls(**{f.name: float(np.mean([getattr(b, f.name) for b in bundles])) for f in fields(cls)})


class TrainState:
    """Models plus one Adam optimiser per model."""

    def __init__(self, system: CompSpoofSystem, config: TrainConfig):
        self.system = system
        self.config = config
        self.frozen: set = set()
        self.optimizers = {}
        if system.kind == "baseline":
            self.optimizers["baseline"] = Adam(system.baseline.parameters(), config.lr_detect)
        else:
            for name in MODEL_NAMES:
                lr = config.lr_sepa if name == "separator" else config.lr_detect
                self.optimizers[name] = Adam(getattr(system, name).parameters(), lr)

    def zero_grad(self):
        self.system.zero_grad()

    def step(self) -> None:
        for name, opt in self.optimizers.items():
            touched = any(p.grad is not None for p in opt.params)
            if name in self.frozen or not touched:
                opt.zero_grad()
                continue
            opt.step()

    def optimizer_arrays(self) -> dict:
        out = {}
        for name, opt in self.optimizers.items():
            out.update(opt.state_arrays(f"optim.{name}"))
        return out

    def load_optimizer_arrays(self, arrays: dict) -> None:
        for name, opt in self.optimizers.items():
            opt.load_state_arrays(arrays, f"optim.{name}")


# ---------------------------------------------------------------------------
# objectives
# ---------------------------------------------------------------------------


def _zero() -> Tensor:
    return Tensor(0.0)


def consistency_loss(speech_pair, env_pair) -> Tensor:
    """Sum of KL(p_ref || p_sepa) over the speech and environment pairs."""
    return kl_divergence(*speech_pair) + kl_divergence(*env_pair)


def compute_losses(batch: Batch, system: CompSpoofSystem, kappa: float, phase: str, ref_probs=None,
                   frozen=()):
    """Build the loss graph for one batch.

    Returns ``(terms, l_joint)``: a dict of scalar tensors named like the
    LossBundle fields, and their weighted total. ``ref_probs`` may supply fixed
    (speech, env) teacher distributions for the mixed rows. A frozen separator
    runs without recording a graph.
    """
    if len(batch) == 0:
        raise EmptyBatch("batch is empty")
    terms = {name: _zero() for name in ("l_sepa", "l_cls_mixed", "l_cls_speech", "l_cls_env",
                                         "l_cons_speech", "l_cons_env")}
    if phase == "baseline":
        terms["l_cls_mixed"] = cross_entropy(system.baseline.probs(batch.mixture), batch.labels)
    else:
        terms["l_cls_mixed"] = cross_entropy(system.mixture.probs(batch.mixture), batch.is_mixed.astype(int))
        mixed = np.flatnonzero(batch.is_mixed)
        if len(mixed):
            sub = batch.subset(mixed)
            if "separator" in frozen:
                with ad.no_grad():
                    sep = separate_batch(system.separator, sub.mixture)
            else:
                sep = separate_batch(system.separator, sub.mixture)
            terms["l_sepa"] = separation_loss(sep["speech"], sub.ref_speech, sep["env"], sub.ref_env)
            if phase == "pretrain":
                terms["l_cls_speech"] = cross_entropy(system.speech.probs(sub.ref_speech), sub.speech_spoofed)
                terms["l_cls_env"] = cross_entropy(system.environment.probs(sub.ref_env), sub.env_spoofed)
            elif phase == "joint":
                p_speech = system.speech.probs(sep["speech"])
                p_env = system.environment.probs(sep["env"])
                terms["l_cls_speech"] = cross_entropy(p_speech, sub.speech_spoofed)
                terms["l_cls_env"] = cross_entropy(p_env, sub.env_spoofed)
                if ref_probs is None:
                    with ad.no_grad():
                        ref_probs = (system.speech.probs(sub.ref_speech).data,
                                     system.environment.probs(sub.ref_env).data)
                terms["l_cons_speech"] = kl_divergence(ref_probs[0], p_speech)
                terms["l_cons_env"] = kl_divergence(ref_probs[1], p_env)
            else:
                raise ValueError(f"unknown phase {phase!r}")
    l_joint = (kappa * terms["l_sepa"] + terms["l_cls_mixed"] + terms["l_cls_speech"] + terms["l_cls_env"]
               + (terms["l_cons_speech"] + terms["l_cons_env"]))
    return terms, l_joint


def _step(batch: Batch, state: TrainState, phase: str) -> LossBundle:
    state.zero_grad()
    try:
        terms, total = compute_losses(batch, state.system, state.config.kappa, phase, frozen=state.frozen)
        bundle = LossBundle(**{k: v.item() for k, v in terms.items()}, l_joint=total.item())
        if not np.isfinite(bundle.l_joint):
            raise NumericError("non-finite joint loss")
        total.backward()
        for p in state.system.parameters():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NumericError(f"non-finite gradient for {p.name}")
    except NumericError:
        state.zero_grad()
        raise
    state.step()
    return bundle


def joint_step(batch: Batch, state: TrainState) -> LossBundle:
    """One optimisation step on the full joint objective."""
    return _step(batch, state, "joint")


def pretrain_step(batch: Batch, state: TrainState) -> LossBundle:
    """One independent step: separator on MSE, detectors on reference components."""
    return _step(batch, state, "pretrain")


def baseline_step(batch: Batch, state: TrainState) -> LossBundle:
    return _step(batch, state, "baseline")


STEP_FOR_PHASE = {"joint": joint_step, "pretrain": pretrain_step, "baseline": baseline_step}


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


@dataclass
class FileItem:
    utt_id: str
    label: ClassLabel
    mixture: np.ndarray
    ref_speech: np.ndarray | None
    ref_env: np.ndarray | None


def load_items(entries: list[ManifestEntry], root, sample_rate: int) -> list[FileItem]:
    """Read mixtures (and stems for mixed classes), resample, peak-normalise jointly."""
    root = Path(root)
    items = []
    for e in entries:
        mix = dsp.resample(read_wav(root / e.path), sample_rate)
        ref_s = ref_e = None
        if e.label.is_mixed:
            sp, ep = stem_paths(e.utt_id)
            if (root / sp).is_file() and (root / ep).is_file():
                ref_s = dsp.resample(read_wav(root / sp), sample_rate).samples
                ref_e = dsp.resample(read_wav(root / ep), sample_rate).samples
        scale = dsp.DEFAULT_PEAK / max(np.max(np.abs(mix.samples)), 1e-12)
        items.append(FileItem(
            e.utt_id, e.label, mix.samples * scale,
            None if ref_s is None else ref_s * scale,
            None if ref_e is None else ref_e * scale,
        ))
    return items


def chunk_items(items: list[FileItem], chunk_len: int, chunk_hop: int) -> list[TrainSample]:
    samples = []
    for it in items:
        mix = dsp.chunk_array(it.mixture, chunk_len, chunk_hop)
        rs = dsp.chunk_array(it.ref_speech, chunk_len, chunk_hop) if it.ref_speech is not None else None
        re_ = dsp.chunk_array(it.ref_env, chunk_len, chunk_hop) if it.ref_env is not None else None
        for i in range(len(mix)):
            samples.append(TrainSample(mix[i], None if rs is None else rs[i], None if re_ is None else re_[i],
                                       it.label))
    return samples


def make_batches(samples: list[TrainSample], batch_size: int, rng: np.random.Generator) -> list[Batch]:
    order = rng.permutation(len(samples))
    return [Batch.collate([samples[i] for i in order[k:k + batch_size]])
            for k in range(0, len(order), batch_size)]


def dev_macro_f1(system: CompSpoofSystem, items: list[FileItem]) -> float:
    if not items:
        return float("nan")
    waves = {it.utt_id: dsp.Waveform(it.mixture, system.cfg.sample_rate) for it in items}
    results = predict_many(system, waves)
    entries = [ManifestEntry(it.utt_id, "", it.label, "dev") for it in items]
    return evaluate({u: r[0] for u, r in results.items()}, entries, "dev").macro_f1


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    system: CompSpoofSystem
    history: list
    best_epoch: int
    best_dev_f1: float
    out_dir: Path | None
    best_state: dict | None = None

    def best_system(self) -> CompSpoofSystem:
        """A copy of the system holding the best-on-dev weights."""
        best = CompSpoofSystem(self.system.cfg, self.system.kind)
        best.load_state_dict(self.best_state if self.best_state is not None else self.system.state_dict())
        return best


def format_log_line(epoch: int, phase: str, bundle: LossBundle, dev_f1: float, steps: int, skipped: int) -> str:
    parts = [f"epoch={epoch}", f"phase={phase}"]
    parts += [f"{k}={v:.12g}" for k, v in bundle.as_dict().items()]
    parts += [f"dev_macro_f1={dev_f1:.12g}", f"steps={steps}", f"skipped={skipped}"]
    return " ".join(parts)


def parse_log_line(line: str) -> dict:
    out = {}
    for token in line.split():
        key, _, value = token.partition("=")
        try:
            out[key] = int(value) if key in ("epoch", "steps", "skipped") else (
                value if key == "phase" else float(value))
        except ValueError:
            out[key] = value
    return out


_EPOCH_CKPT = re.compile(r"epoch_(\d+)\.ckpt$")


def latest_checkpoint(out_dir) -> tuple[int, Path] | None:
    out_dir = Path(out_dir)
    found = []
    for p in out_dir.glob("epoch_*.ckpt"):
        m = _EPOCH_CKPT.search(p.name)
        if m:
            found.append((int(m.group(1)), p))
    return max(found) if found else None


def train(entries: list[ManifestEntry], root, config: TrainConfig, out_dir=None, resume: bool = False,
          dev_entries: list[ManifestEntry] | None = None, on_epoch=None) -> TrainResult:
    """Train on the ``train`` split of ``entries``; select on ``dev``.

    Writes ``epoch_NNN.ckpt`` every epoch, ``best.ckpt`` on dev improvement,
    and ``train_log.txt`` (one key=value line per epoch) when ``out_dir`` is set.
    """
    train_entries = [e for e in entries if e.split == "train"]
    if dev_entries is None:
        dev_entries = [e for e in entries if e.split == "dev"]
    if not train_entries:
        raise EmptyBatch("manifest has no train entries")
    mcfg = config.model_config()
    kind = "baseline" if config.system == "baseline" else "separation"
    system = CompSpoofSystem(mcfg, kind, seed=config.seed)
    state = TrainState(system, config)

    train_samples = chunk_items(load_items(train_entries, root, mcfg.sample_rate), mcfg.chunk_len, mcfg.chunk_hop)
    dev_items = load_items(dev_entries, root, mcfg.sample_rate)

    out_dir = Path(out_dir) if out_dir is not None else None
    log_path = out_dir / "train_log.txt" if out_dir else None
    history, start, best_epoch, best_f1, best_state = [], 1, 0, -np.inf, None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        found = latest_checkpoint(out_dir) if resume else None
        if found:
            epoch_done, path = found
            _, tensors = CompSpoofSystem.load(path, expect=mcfg)
            system.load_state_dict(tensors)
            state.load_optimizer_arrays(tensors)
            best_epoch = int(tensors["meta.best_epoch"][0])
            best_f1 = float(tensors["meta.best_f1"][0])
            if (out_dir / "best.ckpt").is_file():
                best_state = CompSpoofSystem.load(out_dir / "best.ckpt", expect=mcfg)[0].state_dict()
            start = epoch_done + 1
            lines = log_path.read_text().splitlines()[:epoch_done] if log_path.is_file() else []
            history = [parse_log_line(x) for x in lines]
            log_path.write_text("".join(x + "\n" for x in lines))
        else:
            log_path.write_text("")

    for epoch in range(start, config.epochs_total + 1):
        phase = config.phase(epoch)
        step_fn = STEP_FOR_PHASE[phase]
        # the no-joint ablation keeps training the detectors but freezes the separator
        if config.system == "sef" and epoch >= config.joint_start_epoch:
            state.frozen = {"separator"}
        rng = np.random.default_rng([config.seed, epoch])
        bundles, skipped = [], 0
        batches = make_batches(train_samples, config.batch_size, rng)
        for batch in batches:
            try:
                bundles.append(step_fn(batch, state))
            except NumericError as exc:
                skipped += 1
                log.warning("epoch %d: step skipped (%s)", epoch, exc)
        if not bundles:
            raise NumericAbort(f"epoch {epoch}: all {skipped} steps produced non-finite values")
        mean = LossBundle.average(bundles)
        dev_f1 = dev_macro_f1(system, dev_items)
        improved = bool(np.isfinite(dev_f1) and dev_f1 > best_f1) or best_epoch == 0
        if improved:
            best_epoch, best_f1 = epoch, (dev_f1 if np.isfinite(dev_f1) else -np.inf)
            best_state = system.state_dict()
        line = format_log_line(epoch, phase, mean, dev_f1, len(batches), skipped)
        history.append(parse_log_line(line))
        log.info(line)
        if on_epoch is not None:
            on_epoch(line)
        if out_dir:
            extra = {"meta.epoch": np.array([float(epoch)]),
                     "meta.best_epoch": np.array([float(best_epoch)]),
                     "meta.best_f1": np.array([best_f1 if np.isfinite(best_f1) else -1.0])}
            extra.update(state.optimizer_arrays())
            system.save(out_dir / f"epoch_{epoch:03d}.ckpt", extra)
            if improved:
                system.save(out_dir / "best.ckpt", {"meta.epoch": np.array([float(epoch)])})
            with log_path.open("a") as f:
                f.write(line + "\n")
    return TrainResult(system, history, best_epoch, best_f1, out_dir, best_state)
