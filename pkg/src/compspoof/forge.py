"""Synthesis of component-spoofing corpora from pools of WAV files.

Five classes: 0 is an authentic recording containing both speech and its own
environment; 1-4 mix a speech file with an unrelated environment file, each
either bona fide or spoofed.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from enum import IntEnum
from pathlib import Path

import numpy as np

from . import dsp
from .dsp import Waveform
from .errors import (
    CompSpoofError,
    ConfigError,
    InsufficientPool,
    SilentSignal,
    TooFewForSplit,
    TooLong,
    TooShort,
)
from .wavio import PCM_SCALE, dequantize, quantize, read_wav, write_codes

SPLITS = ("train", "dev", "eval")
DEFAULT_RATIOS = (0.70, 0.10, 0.20)
POOL_NAMES = ("bonafide_speech", "spoof_speech", "bonafide_env", "spoof_env", "original_full")


class ClassLabel(IntEnum):
    ORIGINAL = 0
    BONAFIDE_BONAFIDE = 1
    SPOOF_BONAFIDE = 2
    BONAFIDE_SPOOF = 3
    SPOOF_SPOOF = 4

    @property
    def tag(self) -> str:
        return self.name.lower()

    @property
    def is_mixed(self) -> bool:
        return self != ClassLabel.ORIGINAL

    @property
    def speech_spoofed(self) -> bool:
        return self in (ClassLabel.SPOOF_BONAFIDE, ClassLabel.SPOOF_SPOOF)

    @property
    def env_spoofed(self) -> bool:
        return self in (ClassLabel.BONAFIDE_SPOOF, ClassLabel.SPOOF_SPOOF)

    @classmethod
    def from_components(cls, mixed: bool, speech_spoofed: bool, env_spoofed: bool) -> "ClassLabel":
        if not mixed:
            return cls.ORIGINAL
        return cls(1 + int(speech_spoofed) + 2 * int(env_spoofed))

    @property
    def pools(self) -> tuple:
        """(speech pool, env pool) names feeding this class."""
        if not self.is_mixed:
            return ("original_full", None)
        return ("spoof_speech" if self.speech_spoofed else "bonafide_speech",
                "spoof_env" if self.env_spoofed else "bonafide_env")


class MissingPool(CompSpoofError):
    def __init__(self, pool: str, path):
        super().__init__(f"pool '{pool}' directory not found: {path}")
        self.pool = pool


@dataclass
class PoolSpec:
    bonafide_speech: Path
    spoof_speech: Path
    bonafide_env: Path
    spoof_env: Path
    original_full: Path

    @classmethod
    def from_file(cls, path) -> "PoolSpec":
        """Read ``name=directory`` lines; relative directories resolve against the file."""
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"pool config not found: {path}")
        dirs = {}
        for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key = key.strip()
            if not sep or key not in POOL_NAMES:
                raise ConfigError(f"{path}:{lineno}: expected one of {POOL_NAMES} as key=dir")
            d = Path(value.strip())
            dirs[key] = d if d.is_absolute() else (path.parent / d)
        missing = [k for k in POOL_NAMES if k not in dirs]
        if missing:
            raise ConfigError(f"{path}: missing pool entries {missing}")
        return cls(**dirs)

    def to_text(self) -> str:
        return "".join(f"{name}={getattr(self, name)}\n" for name in POOL_NAMES)

    def files(self, pool: str) -> list[Path]:
        d = Path(getattr(self, pool))
        if not d.is_dir():
            raise MissingPool(pool, d)
        return sorted(p for p in d.iterdir() if p.suffix.lower() == ".wav")

    def check(self) -> None:
        for name in POOL_NAMES:
            self.files(name)


@dataclass
class ForgeConfig:
    sample_rate: int = 16000
    min_duration: float = 5.0
    max_duration: float = 21.0
    snr_min: float = 0.0
    snr_max: float = 10.0
    keep_stems: bool = True
    peak: float = dsp.DEFAULT_PEAK

    def __post_init__(self):
        if self.snr_max < self.snr_min:
            raise ConfigError("snr_max must be >= snr_min")
        if not 0 < self.min_duration <= self.max_duration:
            raise ConfigError("need 0 < min_duration <= max_duration")

    def draw_snr(self, rng: np.random.Generator) -> float:
        return float(rng.uniform(self.snr_min, self.snr_max))


@dataclass
class ManifestEntry:
    utt_id: str
    path: str
    label: ClassLabel
    split: str | None = None
    snr_db: float | None = None
    speech_src: str | None = None
    env_src: str | None = None
    duration_s: float = 0.0

    def to_json(self) -> str:
        record = {
            "utt_id": self.utt_id,
            "path": self.path,
            "class": int(self.label),
            "split": self.split,
            "snr_db": self.snr_db,
            "speech_src": self.speech_src,
            "env_src": self.env_src,
            "duration_s": self.duration_s,
        }
        return json.dumps(record, ensure_ascii=False)

    @classmethod
    def from_json(cls, line: str) -> "ManifestEntry":
        d = json.loads(line)
        return cls(d["utt_id"], d["path"], ClassLabel(d["class"]), d.get("split"), d.get("snr_db"),
                   d.get("speech_src"), d.get("env_src"), float(d["duration_s"]))


def write_manifest(path, entries) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ordered = sorted(entries, key=lambda e: e.utt_id)
    path.write_text("".join(e.to_json() + "\n" for e in ordered), encoding="utf-8")


def read_manifest(path) -> list[ManifestEntry]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    return [ManifestEntry.from_json(line) for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]


def stem_paths(utt_id: str) -> tuple[str, str]:
    return f"stems/{utt_id}_speech.wav", f"stems/{utt_id}_env.wav"


# ---------------------------------------------------------------------------
# single-sample synthesis
# ---------------------------------------------------------------------------


def _load(path, cfg: ForgeConfig) -> Waveform:
    return dsp.resample(read_wav(path), cfg.sample_rate)


def _quantize_at_snr(speech: np.ndarray, env: np.ndarray, snr_db: float):
    """Quantise both stems to 16-bit so the stored stems realise ``snr_db``.

    The speech stem is rounded first; the environment gain is then refined
    against the rounded speech until its rounded RMS hits the target.
    """
    s_q = quantize(speech)
    s_rms = float(np.sqrt(np.mean(dequantize(s_q) ** 2)))
    target = s_rms * 10.0 ** (-snr_db / 20.0)
    e_rms = float(np.sqrt(np.mean(env ** 2)))
    gain = target / e_rms
    best = None
    for _ in range(30):
        e_q = quantize(env * gain)
        got = float(np.sqrt(np.mean(dequantize(e_q) ** 2)))
        if got == 0.0:
            raise SilentSignal("environment vanishes after 16-bit quantisation")
        err = abs(20.0 * math.log10(s_rms / got) - snr_db)
        if best is None or err < best[0]:
            best = (err, e_q)
        if err < 1e-9:
            break
        gain *= target / got
    return s_q, _nudge_energy(best[1], s_q, snr_db)


def _nudge_energy(e_q: np.ndarray, s_q: np.ndarray, snr_db: float, max_moves: int = 16) -> np.ndarray:
    """Move single environment codes by one LSB until the integer energy
    ratio matches ``snr_db`` as closely as the code grid allows."""
    e = e_q.astype(np.int64)
    target = float(np.sum(s_q.astype(np.int64) ** 2)) * 10.0 ** (-snr_db / 10.0)
    for _ in range(max_moves):
        d = target - float(np.sum(e ** 2))
        if abs(d) < 0.5:
            break
        step = 1 if d > 0 else -1
        gains = 2 * step * e + 1  # energy change of e -> e + step
        ok = np.abs(e + step) <= 32767
        i = int(np.argmin(np.where(ok, np.abs(d - gains), np.inf)))
        if abs(d - gains[i]) >= abs(d):
            break
        e[i] += step
    return e.astype(np.int16)


def synthesize_sample(speech_file, env_file, label: ClassLabel, snr_db: float, out_path,
                      cfg: ForgeConfig = ForgeConfig(), utt_id: str | None = None,
                      speech_src: str | None = None, env_src: str | None = None,
                      root=None) -> ManifestEntry:
    """Mix one speech and one environment file into ``out_path`` and return its entry.

    Both sources are resampled, the longer is cut to the shorter (keeping the
    leading part), the environment is scaled to ``snr_db`` below the speech,
    and the pair is peak-normalised jointly. Stems go to ``root/stems`` when
    ``cfg.keep_stems`` is set.
    """
    label = ClassLabel(label)
    if not label.is_mixed:
        raise ValueError("synthesize_sample handles mixed classes 1-4; use ingest_original for class 0")
    out_path = Path(out_path)
    root = Path(root) if root is not None else out_path.parent
    utt_id = utt_id or out_path.stem
    speech = _load(speech_file, cfg)
    env = _load(env_file, cfg)
    n = min(len(speech), len(env), int(math.floor(cfg.max_duration * cfg.sample_rate)))
    if n < cfg.min_duration * cfg.sample_rate:
        raise TooShort(f"{utt_id}: aligned duration {n / cfg.sample_rate:.2f}s < {cfg.min_duration}s")
    speech = speech.with_samples(speech.samples[:n])
    env = env.with_samples(env.samples[:n])
    mixture, scaled_env, _ = dsp.mix_at_snr(speech, env, snr_db)
    scale = cfg.peak / np.max(np.abs(mixture.samples))
    s_q, e_q = _quantize_at_snr(speech.samples * scale, scaled_env.samples * scale, snr_db)
    mix_codes = s_q.astype(np.int32) + e_q.astype(np.int32)
    if np.abs(mix_codes).max() > 32767:
        raise CompSpoofError(f"{utt_id}: mixture clips after quantisation")
    write_codes(out_path, mix_codes.astype(np.int16), cfg.sample_rate)
    if cfg.keep_stems:
        sp, ep = stem_paths(utt_id)
        write_codes(root / sp, s_q, cfg.sample_rate)
        write_codes(root / ep, e_q, cfg.sample_rate)
    rel = out_path.relative_to(root).as_posix() if out_path.is_relative_to(root) else str(out_path)
    return ManifestEntry(utt_id, rel, label, None, float(snr_db),
                         speech_src or f"{label.pools[0]}/{Path(speech_file).name}",
                         env_src or f"{label.pools[1]}/{Path(env_file).name}",
                         n / cfg.sample_rate)


def ingest_original(file, out_path, cfg: ForgeConfig = ForgeConfig(), utt_id: str | None = None,
                    root=None) -> ManifestEntry:
    """Copy an authentic recording into the corpus as a class-0 entry."""
    out_path = Path(out_path)
    root = Path(root) if root is not None else out_path.parent
    utt_id = utt_id or out_path.stem
    w = _load(file, cfg)
    dur = len(w) / cfg.sample_rate
    if dur < cfg.min_duration:
        raise TooShort(f"{file}: {dur:.2f}s < {cfg.min_duration}s")
    if dur > cfg.max_duration:
        raise TooLong(f"{file}: {dur:.2f}s > {cfg.max_duration}s")
    codes = quantize(dsp.peak_normalize(w, cfg.peak).samples)
    write_codes(out_path, codes, cfg.sample_rate)
    rel = out_path.relative_to(root).as_posix() if out_path.is_relative_to(root) else str(out_path)
    return ManifestEntry(utt_id, rel, ClassLabel.ORIGINAL, None, None, None, None, dur)


# ---------------------------------------------------------------------------
# corpus assembly
# ---------------------------------------------------------------------------


@dataclass
class _Job:
    utt_id: str
    label: ClassLabel
    speech: Path
    env: Path | None
    snr: float | None


def plan_corpus(pools: PoolSpec, n_per_class: int, seed: int, cfg: ForgeConfig = ForgeConfig()) -> list[_Job]:
    """Draw the source pairing and SNR of every entry; pure in its arguments."""
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    rng = np.random.default_rng(seed)
    files = {name: pools.files(name) for name in POOL_NAMES}
    jobs = []
    for label in ClassLabel:
        speech_pool, env_pool = label.pools
        for pool in (speech_pool, env_pool):
            if pool is not None and len(files[pool]) < n_per_class:
                raise InsufficientPool(pool, n_per_class, len(files[pool]))
        s_pick = rng.choice(len(files[speech_pool]), size=n_per_class, replace=False)
        e_pick = rng.choice(len(files[env_pool]), size=n_per_class, replace=False) if env_pool else None
        for i in range(n_per_class):
            speech = files[speech_pool][s_pick[i]]
            env = files[env_pool][e_pick[i]] if env_pool else None
            if env is not None and speech.resolve() == env.resolve():
                raise ConfigError(f"speech and environment resolve to the same file: {speech}")
            snr = cfg.draw_snr(rng) if label.is_mixed else None
            jobs.append(_Job(f"c{int(label)}_{i:05d}", label, speech, env, snr))
    return jobs


def _run_job(job: _Job, out_dir: Path, cfg: ForgeConfig) -> ManifestEntry:
    out_path = out_dir / job.label.tag / f"{job.utt_id}.wav"
    if job.label.is_mixed:
        return synthesize_sample(job.speech, job.env, job.label, job.snr, out_path, cfg, job.utt_id, root=out_dir)
    return ingest_original(job.speech, out_path, cfg, job.utt_id, root=out_dir)


def build_corpus(pools: PoolSpec, n_per_class: int, seed: int, out_dir, cfg: ForgeConfig = ForgeConfig(),
                 jobs: int = 1) -> list[ManifestEntry]:
    """Forge ``n_per_class`` entries of every class into ``out_dir`` (splits unassigned)."""
    out_dir = Path(out_dir)
    plan = plan_corpus(pools, n_per_class, seed, cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            entries = list(pool.map(lambda j: _run_job(j, out_dir, cfg), plan))
    else:
        entries = [_run_job(j, out_dir, cfg) for j in plan]
    return sorted(entries, key=lambda e: e.utt_id)


def split_counts(n: int, ratios=DEFAULT_RATIOS) -> tuple[int, ...]:
    """Largest-remainder apportionment of ``n`` items; ties go to the earlier split."""
    quotas = [n * r for r in ratios]
    base = [int(math.floor(q + 1e-9)) for q in quotas]
    rest = n - sum(base)
    order = sorted(range(len(ratios)), key=lambda i: (-(quotas[i] - base[i]), i))
    for i in order[:rest]:
        base[i] += 1
    return tuple(base)


def _check_ratios(ratios, reject_zero: bool):
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    if reject_zero and any(r == 0 for r in ratios):
        raise ConfigError(f"zero split ratio rejected: {ratios}")


def stratified_split(entries, ratios=DEFAULT_RATIOS, seed: int = 0, reject_zero: bool = False):
    """Assign train/dev/eval per class with largest-remainder counts.

    With ``reject_zero=False`` a zero ratio is allowed and yields an empty split.
    """
    _check_ratios(ratios, reject_zero)
    rng = np.random.default_rng(seed)
    by_class = {}
    for e in sorted(entries, key=lambda e: e.utt_id):
        by_class.setdefault(int(e.label), []).append(e)
    out = []
    for label in sorted(by_class):
        group = by_class[label]
        if len(group) < 3:
            raise TooFewForSplit(f"class {label} has {len(group)} entries; at least 3 are needed")
        counts = split_counts(len(group), ratios)
        order = rng.permutation(len(group))
        names = np.repeat(np.array(SPLITS), counts)
        for pos, idx in enumerate(order):
            out.append(replace(group[idx], split=str(names[pos])))
    return sorted(out, key=lambda e: e.utt_id)


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------


@dataclass
class Violation:
    utt_id: str
    kind: str
    detail: str


@dataclass
class ValidationReport:
    n_entries: int
    violations: list = field(default_factory=list)
    max_snr_error_db: float = 0.0
    snr_checked: int = 0

    @property
    def ok(self) -> bool:
        return not self.violations

    def add(self, utt_id, kind, detail):
        self.violations.append(Violation(utt_id, kind, detail))

    def to_dict(self) -> dict:
        return asdict(self)


def _pool_of(src: str | None) -> str | None:
    return src.split("/", 1)[0] if src else None


def _class_from_sources(entry: ManifestEntry):
    sp, ep = _pool_of(entry.speech_src), _pool_of(entry.env_src)
    if sp is None and ep is None:
        return ClassLabel.ORIGINAL
    if sp not in ("bonafide_speech", "spoof_speech") or ep not in ("bonafide_env", "spoof_env"):
        return None
    return ClassLabel.from_components(True, sp == "spoof_speech", ep == "spoof_env")


def validate_corpus(entries, root, cfg: ForgeConfig = ForgeConfig(), ratios=DEFAULT_RATIOS,
                    snr_tol_db: float = 0.1) -> ValidationReport:
    root = Path(root)
    report = ValidationReport(len(entries))
    seen = set()
    for e in entries:
        if e.utt_id in seen:
            report.add(e.utt_id, "duplicate", "utt_id appears more than once")
        seen.add(e.utt_id)
        derived = _class_from_sources(e)
        if derived != e.label:
            report.add(e.utt_id, "provenance", f"class {int(e.label)} but sources imply {derived}")
        if not e.label.is_mixed and e.snr_db is not None:
            report.add(e.utt_id, "provenance", "class-0 entry carries an SNR")
        if e.label.is_mixed and e.snr_db is None:
            report.add(e.utt_id, "provenance", "mixed entry lacks an SNR")
        if e.split not in SPLITS:
            report.add(e.utt_id, "split", f"unknown split {e.split!r}")
        path = root / e.path
        if not path.is_file():
            report.add(e.utt_id, "missing_file", str(path))
            continue
        try:
            w = read_wav(path)
        except CompSpoofError as exc:
            report.add(e.utt_id, "unreadable", str(exc))
            continue
        if w.sample_rate != cfg.sample_rate:
            report.add(e.utt_id, "sample_rate", f"{w.sample_rate} Hz, expected {cfg.sample_rate}")
        dur = len(w) / w.sample_rate
        if abs(dur - e.duration_s) > 1.0 / w.sample_rate:
            report.add(e.utt_id, "duration", f"file is {dur:.4f}s, manifest says {e.duration_s:.4f}s")
        if not cfg.min_duration - 1e-9 <= dur <= cfg.max_duration + 1e-9:
            report.add(e.utt_id, "duration", f"{dur:.3f}s outside [{cfg.min_duration}, {cfg.max_duration}]")
        if e.label.is_mixed and e.snr_db is not None:
            _check_stems(e, root, w, report, snr_tol_db)

    counts = {}
    for e in entries:
        counts.setdefault(int(e.label), []).append(e)
    sizes = {k: len(v) for k, v in counts.items()}
    if set(sizes) != set(int(c) for c in ClassLabel) or len(set(sizes.values())) > 1:
        report.add("*", "balance", f"per-class counts {dict(sorted(sizes.items()))}")
    for label, group in counts.items():
        expected = split_counts(len(group), ratios)
        got = tuple(sum(1 for e in group if e.split == s) for s in SPLITS)
        if got != expected:
            report.add("*", "split_ratio", f"class {label}: train/dev/eval {got}, expected {expected}")
    return report


def _check_stems(e: ManifestEntry, root: Path, mixture: Waveform, report: ValidationReport, tol: float):
    sp, ep = (root / p for p in stem_paths(e.utt_id))
    if not (sp.is_file() and ep.is_file()):
        return
    s, n = read_wav(sp), read_wav(ep)
    if len(s) != len(mixture) or len(n) != len(mixture):
        report.add(e.utt_id, "stems", "stem length differs from mixture")
        return
    if np.max(np.abs(s.samples + n.samples - mixture.samples)) > 1.5 / PCM_SCALE:
        report.add(e.utt_id, "stems", "mixture is not the sum of its stems")
    measured = dsp.snr_db(s, n)
    err = abs(measured - e.snr_db)
    report.snr_checked += 1
    report.max_snr_error_db = max(report.max_snr_error_db, err)
    if err > tol:
        report.add(e.utt_id, "snr", f"measured {measured:.4f} dB, recorded {e.snr_db:.4f} dB")
