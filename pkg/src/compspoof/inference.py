"""Five-class decision fusion, chunk voting and P/R/F1 evaluation."""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import dsp
from .dsp import Waveform
from .errors import CoverageError, SilentSignal
from .forge import ClassLabel, ManifestEntry
from .separation import separate_batch

N_CLASSES = 5
INFER_BATCH = 16


@dataclass(frozen=True)
class ComponentDecision:
    mixture: str  # "original" | "mixed"
    speech: str  # "bonafide" | "spoof"
    env: str  # "bonafide" | "spoof"
    probabilities: tuple = ()

    @classmethod
    def from_probs(cls, p_mixture, p_speech, p_env) -> "ComponentDecision":
        p_mixture, p_speech, p_env = (np.asarray(p, dtype=float) for p in (p_mixture, p_speech, p_env))
        return cls(
            "mixed" if np.argmax(p_mixture) == 1 else "original",
            "spoof" if np.argmax(p_speech) == 1 else "bonafide",
            "spoof" if np.argmax(p_env) == 1 else "bonafide",
            (p_mixture, p_speech, p_env),
        )


def fuse_decisions(d: ComponentDecision) -> ClassLabel:
    """Map the three binary verdicts to a class; "original" overrides the component verdicts."""
    if d.mixture == "original":
        return ClassLabel.ORIGINAL
    return ClassLabel.from_components(True, d.speech == "spoof", d.env == "spoof")


@dataclass
class SegmentPrediction:
    utt_id: str
    chunk_index: int
    decision: ComponentDecision | None
    fused: ClassLabel

    def to_dict(self) -> dict:
        out = {"chunk": self.chunk_index, "class": int(self.fused)}
        if self.decision is not None:
            out.update(mixture=self.decision.mixture, speech=self.decision.speech, env=self.decision.env)
        return out


def majority_vote(labels) -> ClassLabel:
    """Most frequent label; ties go to the lowest class id."""
    counts = Counter(int(x) for x in labels)
    if not counts:
        raise ValueError("no votes")
    best = max(counts.values())
    return ClassLabel(min(k for k, v in counts.items() if v == best))


# ---------------------------------------------------------------------------
# model application
# ---------------------------------------------------------------------------


def component_probs(system, chunks: np.ndarray) -> dict:
    """Run every detector on a (M, L) batch of chunks under no_grad.

    Returns arrays keyed ``mixture``/``speech``/``env`` (M, 2) for the
    separation system or ``baseline`` (M, 5) for the baseline.
    """
    chunks = np.atleast_2d(chunks)
    out = {}
    with ad.no_grad():
        for start in range(0, len(chunks), INFER_BATCH):
            part = chunks[start:start + INFER_BATCH]
            if system.kind == "baseline":
                probs = {"baseline": system.baseline.probs(part).data}
            else:
                sep = separate_batch(system.separator, part)
                probs = {
                    "mixture": system.mixture.probs(part).data,
                    "speech": system.speech.probs(sep["speech"]).data,
                    "env": system.environment.probs(sep["env"]).data,
                }
            for k, v in probs.items():
                out.setdefault(k, []).append(v)
    return {k: np.concatenate(v) for k, v in out.items()}


def predict_chunks(system, chunks: np.ndarray, utt_id: str = "") -> list[SegmentPrediction]:
    probs = component_probs(system, chunks)
    preds = []
    for i in range(len(np.atleast_2d(chunks))):
        if system.kind == "baseline":
            preds.append(SegmentPrediction(utt_id, i, None, ClassLabel(int(np.argmax(probs["baseline"][i])))))
        else:
            d = ComponentDecision.from_probs(probs["mixture"][i], probs["speech"][i], probs["env"][i])
            preds.append(SegmentPrediction(utt_id, i, d, fuse_decisions(d)))
    return preds


def predict_segment(chunk: Waveform, system, utt_id: str = "", chunk_index: int = 0) -> SegmentPrediction:
    if len(chunk) != system.cfg.chunk_len:
        raise ValueError(f"chunk has {len(chunk)} samples, model window is {system.cfg.chunk_len}")
    pred = predict_chunks(system, chunk.samples[None], utt_id)[0]
    pred.chunk_index = chunk_index
    return pred


def prepare_input(w: Waveform, sample_rate: int) -> Waveform:
    """Resample to the model rate and peak-normalise (silent input passes through)."""
    w = dsp.resample(w, sample_rate)
    try:
        return dsp.peak_normalize(w)
    except SilentSignal:
        return w


def file_chunks(w: Waveform, cfg) -> np.ndarray:
    w = prepare_input(w, cfg.sample_rate)
    return dsp.chunk_array(w.samples, cfg.chunk_len, cfg.chunk_hop)


def predict_file(w: Waveform, system, utt_id: str = ""):
    """Returns (file label by majority vote, per-chunk predictions)."""
    segments = predict_chunks(system, file_chunks(w, system.cfg), utt_id)
    return majority_vote(s.fused for s in segments), segments


def predict_many(system, waves: dict, jobs: int = 1) -> dict:
    """utt_id -> (label, segments) for a dict of waveforms; chunks are batched across files."""
    ids = list(waves)
    chunk_sets = [file_chunks(waves[u], system.cfg) for u in ids]
    if not ids:
        return {}
    flat = np.concatenate(chunk_sets)
    preds = predict_chunks(system, flat)
    out, pos = {}, 0
    for u, c in zip(ids, chunk_sets):
        segs = preds[pos:pos + len(c)]
        for i, s in enumerate(segs):
            s.utt_id, s.chunk_index = u, i
        out[u] = (majority_vote(s.fused for s in segs), segs)
        pos += len(c)
    return out


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    precision: list
    recall: list
    f1: list
    macro_precision: float
    macro_recall: float
    macro_f1: float
    confusion: list  # rows = true class, columns = predicted class
    n_files: int
    accuracy: float = 0.0
    labels: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "labels": self.labels,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "macro": {"precision": self.macro_precision, "recall": self.macro_recall, "f1": self.macro_f1},
            "accuracy": self.accuracy,
            "confusion": self.confusion,
            "n_files": self.n_files,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def table(self) -> str:
        lines = [f"{'class':<20} {'P':>6} {'R':>6} {'F1':>6}"]
        for i, name in enumerate(self.labels):
            lines.append(f"{name:<20} {self.precision[i]:6.3f} {self.recall[i]:6.3f} {self.f1[i]:6.3f}")
        lines.append(f"{'ALL (macro)':<20} {self.macro_precision:6.3f} {self.macro_recall:6.3f} {self.macro_f1:6.3f}")
        lines.append(f"accuracy {self.accuracy:.3f} over {self.n_files} items")
        return "\n".join(lines)


def classification_report(y_true, y_pred, n_classes: int = N_CLASSES, labels=None) -> EvalReport:
    """Per-class and macro P/R/F1 from label sequences; empty denominators give 0."""
    y_true = np.asarray(y_true, dtype=int)
    y_pred = np.asarray(y_pred, dtype=int)
    if labels is None:
        labels = ([ClassLabel(i).tag for i in range(n_classes)] if n_classes == N_CLASSES
                  else [str(i) for i in range(n_classes)])
    cm = np.zeros((n_classes, n_classes), dtype=int)
    np.add.at(cm, (y_true, y_pred), 1)
    tp = np.diag(cm).astype(float)
    pred_pos = cm.sum(axis=0).astype(float)
    true_pos = cm.sum(axis=1).astype(float)
    precision = np.divide(tp, pred_pos, out=np.zeros(n_classes), where=pred_pos > 0)
    recall = np.divide(tp, true_pos, out=np.zeros(n_classes), where=true_pos > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros(n_classes), where=denom > 0)
    n = int(len(y_true))
    return EvalReport(
        precision.tolist(), recall.tolist(), f1.tolist(),
        float(precision.mean()), float(recall.mean()), float(f1.mean()),
        cm.tolist(), n, float(tp.sum() / n) if n else 0.0, labels,
    )


def evaluate(predictions: dict, entries, split: str | None = "eval") -> EvalReport:
    """File-level report for ``predictions`` (utt_id -> class) against a manifest split."""
    truth = {e.utt_id: int(e.label) for e in entries if split is None or e.split == split}
    missing = sorted(set(truth) - set(predictions))
    extra = sorted(set(predictions) - set(truth))
    if missing or extra:
        raise CoverageError(f"predictions miss {len(missing)} and add {len(extra)} utterances "
                            f"(e.g. {(missing or extra)[:3]})")
    ids = sorted(truth)
    return classification_report([truth[u] for u in ids], [int(predictions[u]) for u in ids])


# ---------------------------------------------------------------------------
# predictions file
# ---------------------------------------------------------------------------


def write_predictions(path, results: dict, with_chunks: bool = False) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for utt_id in sorted(results):
        label, segs = results[utt_id]
        record = {"utt_id": utt_id, "class": int(label)}
        if with_chunks:
            record["chunks"] = [s.to_dict() for s in segs]
        lines.append(json.dumps(record))
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def read_predictions(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"predictions file not found: {path}")
    out = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.strip():
            d = json.loads(line)
            out[d["utt_id"]] = ClassLabel(int(d["class"]))
    return out


def load_entry_waves(entries, root) -> dict:
    from .wavio import read_wav

    root = Path(root)
    return {e.utt_id: read_wav(root / e.path) for e in entries}


def entries_for(entries: list[ManifestEntry], split: str | None) -> list[ManifestEntry]:
    return [e for e in entries if split is None or e.split == split]
