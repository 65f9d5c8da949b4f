import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import make_sentence, make_song, random_song
from oracles import naive_attributes
from lyric2melody.attributes import (
    ATTRIBUTE_NAMES, QuantizerModel, compute_attributes, dequantize, fit_bins,
    fit_quantizer, median_classes, probe_classes, quantize,
)


def test_single_note():
    a = compute_attributes(make_sentence([(0, 16, 60)], [[0]]))
    assert a == (60, 0, 0, 0, 0, 0, 16, 0, 0, 1, 1, 1)


def test_three_notes():
    a = compute_attributes(make_sentence([(0, 8, 60), (8, 8, 62), (16, 4, 61)], [[0, 1, 2]]))
    assert a.PM == 61
    assert a.PV == pytest.approx(2 / 3, rel=1e-12)
    assert a.PR == 2
    assert a.DMM == 0.5 and a.CM == 0.5 and a.AA == 0
    assert a.MCD == pytest.approx(2 / 3)
    assert a.ND == pytest.approx(3 / (20 / 16))


def test_align_ratio():
    a = compute_attributes(make_sentence([(0, 4, 60), (4, 4, 60), (8, 4, 60), (12, 4, 60)], [[0, 1], [2, 3]]))
    assert a.Align == 0.5


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=200, deadline=None)
def test_matches_naive_oracle(seed):
    song = random_song(np.random.default_rng(seed))
    for sent in song.sentences:
        got = compute_attributes(sent)._asdict()
        want = naive_attributes([(n.onset, n.duration, n.pitch) for n in sent.notes], sent.num_syllables)
        for name in ATTRIBUTE_NAMES:
            assert math.isclose(got[name], want[name], rel_tol=1e-9, abs_tol=1e-12), name


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=100, deadline=None)
def test_attribute_invariants(seed):
    for sent in random_song(np.random.default_rng(seed)).sentences:
        a = compute_attributes(sent)
        assert a.PR >= 0 and a.PV >= 0
        for v in (a.DMM, a.AA, a.CM, a.MCD):
            assert 0 <= v <= 1
        assert 0 < a.Align <= 1 and a.ND > 0


def test_uniform_ranks_one_per_bin():
    bins = fit_bins(np.arange(1, 65), 64)
    assert [bins.classify(v) for v in range(1, 65)] == list(range(64))


def test_total_tie():
    bins = fit_bins([5.0] * 100, 64)
    assert len(set(bins.edges)) == 1
    assert bins.classify(5.0) == 0


def test_classify_extremes():
    bins = fit_bins(np.arange(640.0), 64)
    assert bins.classify(-1e9) == 0
    assert bins.classify(1e9) == 63


def test_tie_free_occupancy_exact():
    values = np.random.default_rng(0).permutation(6400).astype(float) * 0.37
    bins = fit_bins(values, 64)
    counts = np.bincount(bins.classify_many(values), minlength=64)
    assert np.all(counts == 100)


@given(st.integers(64, 3000), st.integers(0, 2**32 - 1))
@settings(max_examples=50, deadline=None)
def test_occupancy_within_one(n, seed):
    values = np.random.default_rng(seed).standard_normal(n)
    bins = fit_bins(values, 64)
    counts = np.bincount(bins.classify_many(values), minlength=64)
    assert np.all(np.abs(counts - n / 64) <= 1)


def assert_tie_bounded(values, bins):
    """Each bin is within its edges' tie multiplicities of n/k."""
    k = bins.k
    counts = np.bincount(bins.classify_many(values), minlength=k)
    uniq, mult = np.unique(values, return_counts=True)
    multiplicity = dict(zip(uniq, mult))
    edges = list(bins.edges)
    worst = 0.0
    for c in range(k):
        bounding = [edges[c - 1]] if c else []
        bounding += [edges[c]] if c < k - 1 else []
        allowance = sum(multiplicity.get(e, 0) for e in bounding)
        dev = abs(counts[c] - len(values) / k)
        assert dev <= allowance + 1
        worst = max(worst, dev)
    return worst


def test_occupancy_with_ties_bounded_by_multiplicity():
    rng = np.random.default_rng(1)
    values = rng.integers(0, 300, 5000).astype(float)
    assert_tie_bounded(values, fit_bins(values, 64))


def test_quantize_dequantize_identity(small_corpus):
    q = fit_quantizer(small_corpus, k=16)
    for name in ATTRIBUTE_NAMES:
        bins = q.bins[name]
        if len(set(bins.edges)) != len(bins.edges):
            continue
        assert [bins.classify(r) for r in bins.representatives] == list(range(16))


def test_dequantize_monotone_and_lowest_bin(small_corpus):
    q = fit_quantizer(small_corpus, k=16)
    for name in ATTRIBUTE_NAMES:
        reps = q.bins[name].representatives
        assert all(a <= b for a, b in zip(reps, reps[1:]))
    values = sorted(compute_attributes(s).PM for song in small_corpus for s in song.sentences)
    lowest = [v for v in values if v <= q.bins["PM"].edges[0]]
    assert dequantize((0,) * 12, q).PM == pytest.approx(float(np.median(lowest)))


def test_quantizer_monotone(small_corpus):
    q = fit_quantizer(small_corpus, k=16)
    attrs = sorted(compute_attributes(s) for song in small_corpus for s in song.sentences)
    classes = [quantize(a, q)[0] for a in attrs]
    assert classes == sorted(classes)


def test_quantizer_file_round_trip(tmp_path, small_corpus):
    q = fit_quantizer(small_corpus, k=16)
    q.save(tmp_path / "q.json")
    assert QuantizerModel.load(tmp_path / "q.json") == q


def test_too_few_sentences():
    with pytest.raises(ValueError, match="too few"):
        fit_quantizer([make_song(make_sentence([(0, 4, 60)], [[0]]))], k=64)


def test_large_corpus_occupancy_logged():
    from lyric2melody.synth import CorpusSpec, gen_synthetic
    songs = gen_synthetic(CorpusSpec(num_songs=2500, seed=4))
    q = fit_quantizer(songs, k=64)
    table = np.array([compute_attributes(s) for song in songs for s in song.sentences])
    assert len(table) >= 10_000
    n = len(table)
    for i, name in enumerate(ATTRIBUTE_NAMES):
        worst = assert_tie_bounded(table[:, i], q.bins[name])
        print(f"{name}: max occupancy deviation {worst:.1f} of {n / 64:.1f}")


def test_probe_classes_tie_free():
    bins = fit_bins(np.arange(6400.0), 64)
    assert probe_classes(bins) == [4, 12, 20, 28, 36, 44, 52, 60]


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=50, deadline=None)
def test_probe_and_median_classes_are_occupied(seed):
    # heavy ties leave empty classes; probes and medians must avoid them
    rng = np.random.default_rng(seed)
    values = rng.integers(0, rng.integers(2, 30), size=int(rng.integers(64, 800))).astype(float)
    bins = fit_bins(values, 64)
    occupied = set(bins.classify_many(values).tolist())
    assert set(probe_classes(bins)) <= occupied
    q = QuantizerModel(64, {name: bins for name in ATTRIBUTE_NAMES})
    assert set(median_classes(q)) <= occupied
