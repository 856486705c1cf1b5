import numpy as np
import pytest
from hypothesis import given, strategies as st

from compspoof.dsp import Waveform
from compspoof.errors import CoverageError
from compspoof.forge import ClassLabel, ManifestEntry
from compspoof.inference import (
    ComponentDecision,
    classification_report,
    evaluate,
    fuse_decisions,
    majority_vote,
    predict_chunks,
    predict_file,
    predict_many,
    predict_segment,
    read_predictions,
    write_predictions,
)
from compspoof.models import CompSpoofSystem, ModelConfig

SMALL = ModelConfig(8000, 128, 32, 128, 0.5, 0.25, (4, 8), 16, 8)

FUSION_TABLE = {
    ("original", "bonafide", "bonafide"): 0,
    ("original", "spoof", "bonafide"): 0,
    ("original", "bonafide", "spoof"): 0,
    ("original", "spoof", "spoof"): 0,
    ("mixed", "bonafide", "bonafide"): 1,
    ("mixed", "spoof", "bonafide"): 2,
    ("mixed", "bonafide", "spoof"): 3,
    ("mixed", "spoof", "spoof"): 4,
}


def brute_force_metrics(y_true, y_pred, n=5):
    p, r, f = [], [], []
    for c in range(n):
        tp = sum(1 for t, q in zip(y_true, y_pred) if t == c and q == c)
        fp = sum(1 for t, q in zip(y_true, y_pred) if t != c and q == c)
        fn = sum(1 for t, q in zip(y_true, y_pred) if t == c and q != c)
        pc = tp / (tp + fp) if tp + fp else 0.0
        rc = tp / (tp + fn) if tp + fn else 0.0
        p.append(pc)
        r.append(rc)
        f.append(2 * pc * rc / (pc + rc) if pc + rc else 0.0)
    return p, r, f, sum(f) / n


# -- fusion ------------------------------------------------------------------

@pytest.mark.parametrize("combo,expected", FUSION_TABLE.items())
def test_fusion_table(combo, expected):
    assert fuse_decisions(ComponentDecision(*combo)) == expected


def test_fusion_reaches_every_class():
    assert {fuse_decisions(ComponentDecision(*c)) for c in FUSION_TABLE} == set(ClassLabel)


def pair(hot, p):
    return [p, 1 - p] if hot else [1 - p, p]


@given(st.tuples(st.booleans(), st.booleans(), st.booleans()),
       st.lists(st.floats(0.0, 0.49), min_size=3, max_size=3))
def test_fusion_depends_only_on_argmax(bits, lows):
    base = ComponentDecision.from_probs(*(pair(b, 0.01) for b in bits))
    other = ComponentDecision.from_probs(*(pair(b, lo) for b, lo in zip(bits, lows)))
    assert fuse_decisions(base) == fuse_decisions(other)


def test_oracle_heads_recover_mixed_classes():
    for label in list(ClassLabel)[1:]:
        d = ComponentDecision.from_probs(pair(True, 0.0), pair(label.speech_spoofed, 0.0),
                                         pair(label.env_spoofed, 0.0))
        assert fuse_decisions(d) == label


# -- voting --------------------------------------------------------------------

def test_majority_vote_examples():
    assert majority_vote([3, 3, 3]) == 3
    assert majority_vote([2, 2, 4]) == 2
    assert majority_vote([1, 4]) == 1
    assert majority_vote([4, 1]) == 1
    with pytest.raises(ValueError):
        majority_vote([])


@given(st.lists(st.integers(0, 4), min_size=1, max_size=12), st.randoms())
def test_majority_vote_is_order_free(votes, rnd):
    shuffled = list(votes)
    rnd.shuffle(shuffled)
    assert majority_vote(votes) == majority_vote(shuffled)


# -- metrics -------------------------------------------------------------------

def test_metrics_examples():
    y = [c for c in range(5) for _ in range(4)]
    perfect = classification_report(y, y)
    assert perfect.macro_f1 == perfect.macro_precision == perfect.macro_recall == 1.0
    all_zero = classification_report(y, [0] * len(y))
    assert all_zero.recall[0] == 1.0 and all_zero.precision[0] == pytest.approx(0.2)
    assert all_zero.macro_f1 == pytest.approx(2 * 0.2 / 1.2 / 5)
    assert all_zero.macro_f1 == pytest.approx(0.0667, abs=1e-4)


def test_metrics_match_brute_force(rng):
    for _ in range(1000):
        n = int(rng.integers(1, 40))
        y_true, y_pred = rng.integers(0, 5, n), rng.integers(0, 5, n)
        rep = classification_report(y_true, y_pred)
        p, r, f, macro = brute_force_metrics(y_true.tolist(), y_pred.tolist())
        assert np.allclose(rep.precision, p, atol=1e-12, rtol=0)
        assert np.allclose(rep.recall, r, atol=1e-12, rtol=0)
        assert np.allclose(rep.f1, f, atol=1e-12, rtol=0)
        assert abs(rep.macro_f1 - macro) <= 1e-12
        cm = np.array(rep.confusion)
        assert np.array_equal(cm.sum(axis=1), np.bincount(y_true, minlength=5))
        assert np.trace(cm) / n == pytest.approx(rep.accuracy)


def entries(n_per_class=2, split="eval"):
    return [ManifestEntry(f"u{c}{i}", "", ClassLabel(c), split) for c in range(5) for i in range(n_per_class)]


def test_evaluate_coverage():
    ents = entries() + [ManifestEntry("train_only", "", ClassLabel(1), "train")]
    preds = {e.utt_id: e.label for e in ents if e.split == "eval"}
    assert evaluate(preds, ents, "eval").macro_f1 == 1.0
    with pytest.raises(CoverageError):
        evaluate(dict(list(preds.items())[1:]), ents, "eval")
    with pytest.raises(CoverageError):
        evaluate({**preds, "stray": ClassLabel(0)}, ents, "eval")


def test_report_serialisation():
    rep = classification_report([0, 1, 2], [0, 1, 1])
    d = rep.to_dict()
    assert d["macro"]["f1"] == rep.macro_f1 and d["n_files"] == 3
    assert "ALL (macro)" in rep.table()


# -- model application -----------------------------------------------------------

@pytest.fixture(scope="module")
def systems():
    return CompSpoofSystem(SMALL, seed=2), CompSpoofSystem(SMALL, "baseline", seed=2)


def test_predictions_are_deterministic(systems, rng):
    sep, base = systems
    w = Waveform(rng.standard_normal(6000), 8000)
    for system in (sep, base):
        a, segs_a = predict_file(w, system)
        b, segs_b = predict_file(w, system)
        assert a == b and [s.fused for s in segs_a] == [s.fused for s in segs_b]
        assert len(segs_a) == 2


def test_segment_prediction_is_consistent(systems, rng):
    sep, _ = systems
    chunk = Waveform(rng.standard_normal(SMALL.chunk_len), 8000)
    pred = predict_segment(chunk, sep, "u", 4)
    assert pred.chunk_index == 4 and pred.fused == fuse_decisions(pred.decision)
    with pytest.raises(ValueError):
        predict_segment(Waveform(np.ones(100), 8000), sep)


def test_short_file_is_padded_to_one_chunk(systems):
    label, segs = predict_file(Waveform(np.full(1000, 0.1), 8000), systems[0])
    assert len(segs) == 1


def test_batched_and_per_file_paths_agree(systems, rng, tmp_path):
    sep, _ = systems
    waves = {f"f{i}": Waveform(rng.standard_normal(int(rng.integers(3000, 9000))), 8000) for i in range(4)}
    many = predict_many(sep, waves)
    for u, w in waves.items():
        label, segs = predict_file(w, sep, u)
        assert many[u][0] == label
        assert [s.fused for s in many[u][1]] == [s.fused for s in segs]
    write_predictions(tmp_path / "p.jsonl", many, with_chunks=True)
    assert read_predictions(tmp_path / "p.jsonl") == {u: r[0] for u, r in many.items()}


def test_chunk_batch_matches_single_chunks(systems, rng):
    sep, _ = systems
    chunks = rng.standard_normal((3, SMALL.chunk_len))
    batch = predict_chunks(sep, chunks)
    for i in range(3):
        one = predict_chunks(sep, chunks[i:i + 1])[0]
        assert one.decision.probabilities[1] == pytest.approx(batch[i].decision.probabilities[1], abs=1e-12)
