"""Acceptance criteria 1-10. Each test carries a ``criterion`` marker; the
session summary prints one PASS/FAIL line per criterion."""
import time

import numpy as np
import pytest

from compspoof import autodiff as ad
from compspoof import dsp, spectral, training
from compspoof.autodiff import Parameter, finite_difference_check
from compspoof.detectors import cross_entropy, kl_divergence
from compspoof.dsp import StftConfig, Waveform
from compspoof.experiment import ToyExperimentConfig, run_toy_experiment
from compspoof.forge import ClassLabel, ForgeConfig, build_corpus, stratified_split, validate_corpus, write_manifest
from compspoof.inference import ComponentDecision, classification_report, fuse_decisions
from compspoof.models import CompSpoofSystem, ModelConfig, TrainConfig
from compspoof.separation import env_soft_mask, env_soft_mask_tensor, separate_batch
from compspoof.toy import make_toy_pools
from compspoof.training import Batch, compute_losses, train

from conftest import TOY_TRAIN

GRAD_TOL = 1e-4


# -- 1 ---------------------------------------------------------------------------

@pytest.mark.criterion(1, "STFT round trip on 100 random 1-5 s signals, max error < 1e-6")
def test_stft_round_trip(record_property):
    rng = np.random.default_rng(1)
    cfg = StftConfig()
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(16000, 5 * 16000 + 1))
        w = Waveform(rng.uniform(-1, 1, n), 16000)
        back = dsp.istft(dsp.stft(w, cfg), n)
        worst = max(worst, float(np.max(np.abs(back.samples - w.samples))))
    record_property("detail", f"max abs error {worst:.2e}")
    assert worst < 1e-6


# -- 2 ---------------------------------------------------------------------------

@pytest.mark.criterion(2, "soft mask in (0,1] on 1000 grids; analytic cases within 1e-9")
def test_soft_mask_law(record_property):
    rng = np.random.default_rng(2)
    lo, hi = np.inf, -np.inf
    for i in range(1000):
        shape = tuple(rng.integers(1, 12, 2))
        # magnitudes spread over 16 decades, with exact zeros sprinkled in
        s = 10.0 ** rng.uniform(-8, 8, shape) * (rng.random(shape) > 0.1)
        r = 10.0 ** rng.uniform(-8, 8, shape) * (rng.random(shape) > 0.1)
        mask, alpha = env_soft_mask(s, r)
        assert alpha >= 0
        lo, hi = min(lo, mask.min()), max(hi, mask.max())
    assert lo > 0 and hi <= 1

    ones, zeros = np.ones((4, 5)), np.zeros((4, 5))
    m0, _ = env_soft_mask(zeros, ones)
    m1, a1 = env_soft_mask(ones, zeros)
    m2, a2 = env_soft_mask(ones, ones, eps=1e-8)
    direct = 1 - np.tanh((1 / (1 + 1e-8)) * (1 / (1 + 1e-8)))
    assert np.max(np.abs(m0 - 1)) <= 1e-9
    assert a1 == 0 and np.max(np.abs(m1 - 1)) <= 1e-9
    assert np.max(np.abs(m2 - direct)) <= 1e-9 and abs(direct - 0.23841) < 1e-5
    record_property("detail", f"mask range [{lo:.3g}, {hi:.3g}]; S=R=1 gives {m2[0, 0]:.6f}")


# -- 3 ---------------------------------------------------------------------------

def _op_table(rng):
    P = lambda *shape, lo=-1.0, hi=1.0: Parameter(rng.uniform(lo, hi, shape))
    a, b, pos = P(3, 4), P(3, 4), P(3, 4, lo=0.5, hi=2.0)
    m1, m2 = P(3, 5), P(5, 4)
    lin_w, lin_b = P(4, 2), P(2)
    cx, cw, cb = P(2, 2, 6, 5), P(3, 2, 3, 3), P(3)
    lx, lw = P(2, 3, 7), P(4, 3, 3)
    idx = np.array([0, 2, 2, 3])
    wave = P(2, 6)
    tiny = StftConfig(6, 2, 8)
    s_mag, r_mag = P(2, 5, 4, lo=0.1, hi=2.0), P(2, 5, 4, lo=0.1, hi=2.0)
    teacher = rng.dirichlet([1, 1], 3)
    logits = P(3, 2)
    return {
        "add": (lambda: ad.tsum(ad.add(a, b) ** 2), [a, b]),
        "sub": (lambda: ad.tsum(ad.sub(a, b) ** 2), [a, b]),
        "mul": (lambda: ad.tsum(ad.mul(a, b)), [a, b]),
        "div": (lambda: ad.tsum(ad.div(a, pos)), [a, pos]),
        "power": (lambda: ad.tsum(ad.power(pos, 1.7)), [pos]),
        "exp": (lambda: ad.tsum(ad.exp(a)), [a]),
        "log": (lambda: ad.tsum(ad.log(pos)), [pos]),
        "sqrt": (lambda: ad.tsum(ad.sqrt(pos)), [pos]),
        "tanh": (lambda: ad.tsum(ad.tanh(a) * b), [a, b]),
        "sigmoid": (lambda: ad.tsum(ad.sigmoid(a) * b), [a]),
        "relu": (lambda: ad.tsum(ad.relu(a) * b), [a]),
        "clip": (lambda: ad.tsum(ad.clip(a, -0.5, 0.5) * b), [a]),
        "sum": (lambda: ad.tsum(ad.tsum(a, axis=1) ** 2), [a]),
        "mean": (lambda: ad.tsum(ad.mean(a, axis=0) ** 2), [a]),
        "softmax": (lambda: ad.tsum(ad.softmax(a, axis=1) * b), [a]),
        "reshape/transpose": (lambda: ad.tsum(ad.transpose(ad.reshape(a, (4, 3))) * b), [a]),
        "broadcast_to": (lambda: ad.tsum(ad.broadcast_to(ad.reshape(ad.tsum(a, axis=0), (1, 4)), (3, 4)) * b), [a]),
        "getitem": (lambda: ad.tsum(ad.getitem(a, (slice(0, 2), [0, 0, 3])) ** 2), [a]),
        "concatenate": (lambda: ad.tsum(ad.concatenate([a, b], axis=1) ** 2), [a, b]),
        "stack": (lambda: ad.tsum(ad.stack([a, b], axis=0) ** 3), [a, b]),
        "take": (lambda: ad.tsum(ad.take(a, idx, axis=1) ** 2), [a]),
        "scatter_add": (lambda: ad.tsum(ad.scatter_add(ad.take(a, idx, axis=1), idx, 4) ** 2), [a]),
        "matmul": (lambda: ad.tsum(ad.tanh(ad.matmul(m1, m2))), [m1, m2]),
        "linear": (lambda: ad.tsum(ad.linear(a, lin_w, lin_b) ** 2), [a, lin_w, lin_b]),
        "conv2d": (lambda: ad.tsum(ad.conv2d(cx, cw, cb, stride=2, padding=1) ** 2), [cx, cw, cb]),
        "conv1d": (lambda: ad.tsum(ad.conv1d(lx, lw, padding=1) ** 2), [lx, lw]),
        "stft": (lambda: ad.tsum(spectral.magnitude(*spectral.stft(wave, tiny))), [wave]),
        "istft": (lambda: ad.tsum(spectral.istft(*spectral.stft(wave, tiny), tiny, 6) ** 2 * wave), [wave]),
        "log_power": (lambda: ad.tsum(spectral.log_power(*spectral.stft(wave, tiny))), [wave]),
        "env_soft_mask": (lambda: ad.tsum(env_soft_mask_tensor(s_mag, r_mag)[0] ** 2), [s_mag, r_mag]),
        "cross_entropy": (lambda: cross_entropy(ad.softmax(logits, axis=1), [0, 1, 1]), [logits]),
        "kl_divergence": (lambda: kl_divergence(teacher, ad.softmax(logits, axis=1)), [logits]),
    }


def _joint_graph(rng):
    """Full joint objective on a 5-bin, 4-frame toy instance with a fixed teacher."""
    cfg = ModelConfig(8000, 6, 2, 8, 0.5, 0.25, (2, 3), 4, 3)
    system = CompSpoofSystem(cfg, seed=11)
    sep = system.separator
    sep._params["out.weight"].data[:] = rng.normal(0, 0.5, sep._params["out.weight"].shape)
    sep._params["out.bias"].data[:] = rng.normal(0, 0.1, 2)
    batch = Batch(rng.uniform(-1, 1, (4, 6)), rng.uniform(-1, 1, (4, 6)), rng.uniform(-1, 1, (4, 6)),
                  np.array([0, 2, 3, 4]))
    mixed = batch.subset(np.flatnonzero(batch.is_mixed))
    with ad.no_grad():
        ref = (system.speech.probs(mixed.ref_speech).data, system.environment.probs(mixed.ref_env).data)
        assert separate_batch(sep, mixed.mixture)["mask"].shape == (3, 2, 5, 4)
    return system, (lambda: compute_losses(batch, system, 10.0, "joint", ref_probs=ref)[1])


@pytest.mark.criterion(3, "finite-difference gradients of every op and the full joint loss, rel err < 1e-4")
def test_gradients(record_property):
    rng = np.random.default_rng(3)
    worst, checked = 0.0, 0
    for name, (f, params) in _op_table(rng).items():
        for p in params:
            rep = finite_difference_check(f, p, h=1e-6, tol=GRAD_TOL)
            assert rep.passed, f"{name}: {rep}"
            worst, checked = max(worst, rep.max_rel_error), checked + 1
    system, loss = _joint_graph(rng)
    joint_worst = 0.0
    for name, p in system.named_parameters().items():
        rep = finite_difference_check(loss, p, h=1e-6, tol=GRAD_TOL)
        assert rep.passed, f"joint loss wrt {name}: {rep}"
        joint_worst = max(joint_worst, rep.max_rel_error)
    record_property("detail", f"{checked} op inputs, worst {worst:.1e}; joint loss over "
                              f"{len(system.parameters())} tensors, worst {joint_worst:.1e}")


# -- 4 ---------------------------------------------------------------------------

@pytest.mark.criterion(4, "loss bundle reassembles to the joint loss within 1e-12 on every step")
def test_loss_identity(toy_corpus, monkeypatch, record_property):
    entries, root = toy_corpus
    seen = []
    for phase, fn in list(training.STEP_FOR_PHASE.items()):
        def recording(batch, state, fn=fn):
            bundle = fn(batch, state)
            seen.append((bundle, state.config.kappa))
            return bundle
        monkeypatch.setitem(training.STEP_FOR_PHASE, phase, recording)
    for system, kappa in (("sef_jl", 10.0), ("sef", 10.0), ("baseline", 10.0), ("sef_jl", 0.7)):
        train(entries, root, TrainConfig(**TOY_TRAIN, epochs_total=3, joint_start_epoch=2, kappa=kappa,
                                         system=system))
    gaps = [abs(b.l_joint - b.reassemble(k)) for b, k in seen]
    record_property("detail", f"{len(seen)} steps, max gap {max(gaps):.1e}")
    assert len(seen) > 0 and max(gaps) <= 1e-12


# -- 5 ---------------------------------------------------------------------------

@pytest.mark.criterion(5, "fusion is total, reaches all 5 classes and depends only on argmax")
def test_fusion_totality(record_property):
    expected = {(0, s, e): 0 for s in (0, 1) for e in (0, 1)}
    expected.update({(1, 0, 0): 1, (1, 1, 0): 2, (1, 0, 1): 3, (1, 1, 1): 4})
    names = (("original", "mixed"), ("bonafide", "spoof"), ("bonafide", "spoof"))
    reached = set()
    rng = np.random.default_rng(5)
    for bits, label in expected.items():
        d = ComponentDecision(*(n[b] for n, b in zip(names, bits)))
        assert fuse_decisions(d) == label
        reached.add(fuse_decisions(d))
        for _ in range(200):
            probs = []
            for b in bits:
                lo = rng.uniform(0.0, 0.4999)
                probs.append([1 - lo, lo] if b == 0 else [lo, 1 - lo])
            assert fuse_decisions(ComponentDecision.from_probs(*probs)) == label
    assert reached == set(ClassLabel)
    record_property("detail", "8 combinations, 1600 rescaled probability triples")


# -- 6 ---------------------------------------------------------------------------

@pytest.mark.criterion(6, "forged 50-per-class corpus: no violations, SNR within 1e-6 dB, 35/5/10, reproducible")
def test_forge_fidelity(tmp_path, record_property):
    pools = make_toy_pools(tmp_path / "pools", n=50, sample_rate=8000, duration=0.75, seed=6)
    cfg = ForgeConfig(sample_rate=8000, min_duration=0.5, max_duration=2.0)
    manifests = []
    for name in ("a", "b"):
        entries = stratified_split(build_corpus(pools, 50, 6, tmp_path / name, cfg), seed=6)
        write_manifest(tmp_path / name / "manifest.jsonl", entries)
        manifests.append((tmp_path / name / "manifest.jsonl").read_bytes())
    report = validate_corpus(entries, tmp_path / "b", cfg)
    assert report.ok, report.violations[:5]
    assert report.snr_checked == 200 and report.max_snr_error_db < 1e-6
    for c in ClassLabel:
        counts = [sum(1 for e in entries if e.label == c and e.split == s) for s in ("train", "dev", "eval")]
        assert counts == [35, 5, 10]
    assert manifests[0] == manifests[1]
    record_property("detail", f"250 entries, max SNR error {report.max_snr_error_db:.1e} dB")


# -- 7, 8 ------------------------------------------------------------------------

@pytest.fixture(scope="module")
def experiment(tmp_path_factory):
    t0 = time.time()
    result = run_toy_experiment(tmp_path_factory.mktemp("experiment"), ToyExperimentConfig())
    return result, time.time() - t0


@pytest.mark.slow
@pytest.mark.criterion(7, "toy experiment: separation system with joint learning beats the baseline, F1 >= 0.9")
def test_toy_reproduction(experiment, record_property):
    result, seconds = experiment
    jl, base = result.mean("sef_jl"), result.mean("baseline")
    record_property("detail", "joint " + "/".join(f"{x:.3f}" for x in result.scores("sef_jl"))
                    + f" mean {jl:.3f}; baseline " + "/".join(f"{x:.3f}" for x in result.scores("baseline"))
                    + f" mean {base:.3f}; {seconds / 60:.1f} min")
    assert jl > base
    assert jl >= 0.9


@pytest.mark.slow
@pytest.mark.criterion(8, "frozen-separator ablation has lower component F1 on >= 2 of 3 seeds")
def test_joint_learning_ablation(experiment, record_property):
    result, _ = experiment
    jl = result.scores("sef_jl", "component_f1")
    frozen = result.scores("sef", "component_f1")
    wins = sum(f < j for f, j in zip(frozen, jl))
    record_property("detail", "joint " + "/".join(f"{x:.3f}" for x in jl) + "; frozen "
                    + "/".join(f"{x:.3f}" for x in frozen) + f"; lower on {wins} of {len(jl)}")
    assert wins >= 2


# -- 9 ---------------------------------------------------------------------------

def _brute_force_macro_f1(y_true, y_pred, n=5):
    f1s, per = [], []
    for c in range(n):
        tp = fp = fn = 0
        for t, p in zip(y_true, y_pred):
            tp += t == c and p == c
            fp += t != c and p == c
            fn += t == c and p != c
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        per.append((prec, rec))
        f1s.append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
    return per, f1s, sum(f1s) / n


@pytest.mark.criterion(9, "metrics equal a brute-force P/R/F1 within 1e-12 on 1000 random sets")
def test_metrics_oracle(record_property):
    rng = np.random.default_rng(9)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 60))
        y_true = rng.integers(0, 5, n)
        # skewed predictions exercise empty-denominator classes too
        y_pred = np.where(rng.random(n) < 0.5, y_true, rng.integers(0, int(rng.integers(1, 6)), n))
        rep = classification_report(y_true, y_pred)
        per, f1s, macro = _brute_force_macro_f1(y_true.tolist(), y_pred.tolist())
        gaps = [abs(rep.macro_f1 - macro)]
        gaps += [abs(a - b) for a, b in zip(rep.f1, f1s)]
        gaps += [abs(rep.precision[c] - per[c][0]) + abs(rep.recall[c] - per[c][1]) for c in range(5)]
        worst = max(worst, max(gaps))
    record_property("detail", f"max deviation {worst:.1e}")
    assert worst <= 1e-12


# -- 10 --------------------------------------------------------------------------

@pytest.mark.criterion(10, "two identical training runs give bit-identical checkpoints and logs")
def test_determinism(toy_corpus, tmp_path, record_property):
    entries, root = toy_corpus
    cfg = TrainConfig(**TOY_TRAIN, epochs_total=3, joint_start_epoch=2)
    for name in ("a", "b"):
        train(entries, root, cfg, tmp_path / name)
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert files == sorted(p.name for p in (tmp_path / "b").iterdir())
    for name in files:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
    record_property("detail", f"{len(files)} files compared")
