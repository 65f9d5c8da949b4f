import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_sentence, make_song, random_song
from lyric2melody.attributes import ATTRIBUTE_NAMES, fit_quantizer
from lyric2melody.metrics import (
    CompositionRequest,
    ControllabilityMatrix,
    controllability_sweep,
    duration_distribution_similarity,
    dtw_distance,
    evaluate_pairs,
    ablation_harness,
    format_table,
    melody_distance,
    pitch_distribution_similarity,
    pitch_series,
    spearman_rho,
)
from lyric2melody.score import Note, Sentence, Song, Syllable, lyrics_of, tags_of
from oracles import hand_spearman, naive_dtw, tick_series


def _song(pitches, durs=None, gap=0):
    durs = durs or [4] * len(pitches)
    notes, t = [], 0
    for p, d in zip(pitches, durs):
        notes.append((t, d, p))
        t += d + gap
    return make_song(make_sentence(notes, [[i] for i in range(len(notes))]))


def test_pd_examples():
    a = _song([60, 62])
    assert pitch_distribution_similarity(a, a) == 100
    assert pitch_distribution_similarity(a, _song([70, 72])) == 0
    # histograms [.5, .5, 0] and [.25, .25, .5]
    g = _song([60, 61])
    r = _song([60, 61, 62, 62])
    assert pitch_distribution_similarity(g, r) == pytest.approx(50.0)


def test_dd_examples():
    a = _song([60, 60, 60], [4, 8, 8])
    assert duration_distribution_similarity(a, a) == 100
    assert duration_distribution_similarity(a, _song([60], [3])) == 0
    # [1/3 at 4, 2/3 at 8] vs [1/2 at 4, 1/2 at 16] -> 1/3
    assert duration_distribution_similarity(a, _song([60, 60], [4, 16])) == pytest.approx(100 / 3)


def test_metrics_reject_empty():
    empty = Song("e", 0, 0, 120, ())
    with pytest.raises(ValueError):
        pitch_distribution_similarity(empty, _song([60]))
    with pytest.raises(ValueError):
        melody_distance(_song([60]), empty)


def _series(song, exact=False):
    return tick_series([(n.onset, n.duration, n.pitch) for n in song.all_notes()], exact)


def test_md_matches_exact_oracle():
    rng = np.random.default_rng(1)
    for i in range(15):
        a = random_song(rng, max_sentences=2, max_syllables=3)
        b = random_song(rng, max_sentences=2, max_syllables=3)
        assert melody_distance(a, b) == float(naive_dtw(_series(a, True), _series(b, True)))


def test_pitch_series_matches_oracle():
    rng = np.random.default_rng(0)
    for i in range(20):
        song = random_song(rng, max_sentences=2, max_syllables=3)
        notes = [(n.onset, n.duration, n.pitch) for n in song.all_notes()]
        assert pitch_series(song).tolist() == tick_series(notes)


def test_md_examples():
    a = _song([60, 64, 67, 72], [4, 2, 2, 8])
    assert melody_distance(a, a) == 0
    assert melody_distance(a, _song([65, 69, 72, 77], [4, 2, 2, 8])) == 0
    b = _song([60, 62, 60, 59], [4, 4, 4, 4])
    assert melody_distance(a, b) == float(naive_dtw(_series(a, True), _series(b, True)))
    assert melody_distance(a, b) == pytest.approx(naive_dtw(_series(a), _series(b)), rel=1e-12)


def test_dtw_tie_break_prefers_short_path():
    # zero-cost alignments of different lengths exist; the shortest one is used
    assert dtw_distance([0.0, 0.0], [0.0, 0.0]) == 0.0
    assert dtw_distance([1.0, 0.0], [1.0]) == pytest.approx(1.0 / 2)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-5, 5, allow_nan=False), min_size=1, max_size=12),
       st.lists(st.floats(-5, 5, allow_nan=False), min_size=1, max_size=12))
def test_dtw_matches_quadratic_reference(a, b):
    assert dtw_distance(a, b) == naive_dtw(a, b)


def test_md_symmetric_and_transposition_invariant():
    rng = np.random.default_rng(4)
    for i in range(10):
        a = random_song(rng, max_sentences=2, max_syllables=3)
        b = random_song(rng, max_sentences=2, max_syllables=3)
        assert melody_distance(a, b) == melody_distance(b, a)
        pitches = [n.pitch for n in a.all_notes() + b.all_notes()]
        shift = int(rng.integers(-min(pitches), 128 - max(pitches)))
        a2, b2 = _transpose(a, shift), _transpose(b, shift)
        assert melody_distance(a2, b2) == melody_distance(a, b)


def _transpose(song, k):
    sents = []
    for s in song.sentences:
        notes = tuple(Note(n.onset, n.duration, n.pitch + k) for n in s.notes)
        sents.append(Sentence(s.syllables, s.words, notes, s.structure))
    return Song(song.id, song.key, song.emotion, song.bpm, tuple(sents))


def test_pd_dd_symmetric():
    rng = np.random.default_rng(5)
    a, b = random_song(rng), random_song(rng)
    assert pitch_distribution_similarity(a, b) == pytest.approx(pitch_distribution_similarity(b, a))
    assert duration_distribution_similarity(a, b) == pytest.approx(duration_distribution_similarity(b, a))


def test_spearman_examples():
    assert spearman_rho([1, 2, 3], [1, 2, 3]) == pytest.approx(1)
    assert spearman_rho([1, 2, 3], [3, 2, 1]) == pytest.approx(-1)
    assert spearman_rho([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx(0.8)
    assert math.isnan(spearman_rho([1, 1, 1], [1, 2, 3]))
    with pytest.raises(ValueError):
        spearman_rho([1], [1])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 6), st.integers(0, 6)), min_size=3, max_size=30))
def test_spearman_matches_hand_ranks(pairs):
    xs, ys = [p[0] for p in pairs], [p[1] for p in pairs]
    rho = spearman_rho(xs, ys)
    if len(set(xs)) < 2 or len(set(ys)) < 2:
        assert math.isnan(rho)
    else:
        assert rho == pytest.approx(hand_spearman(xs, ys), abs=1e-12)
        # invariant under a strictly increasing transform
        assert spearman_rho([x**3 + 2 for x in xs], [math.exp(y) for y in ys]) == pytest.approx(rho, abs=1e-12)


def _pm_oracle_composer(quantizer):
    """A perfect controller: writes flat melodies at the specified PM class representative."""
    reps = quantizer.bins["PM"].representatives

    def compose(requests):
        out = []
        for r in requests:
            sents, t = [], 0
            for lyr, row in zip(r.lyrics, r.attr_classes):
                pitch = int(round(reps[row[0]]))
                n = len(lyr.texts)
                notes = tuple(Note(t + 4 * i, 4, pitch) for i in range(n))
                sylls = tuple(Syllable(x, tn, (i,)) for i, (x, tn) in enumerate(zip(lyr.texts, lyr.tones)))
                sents.append(Sentence(sylls, lyr.words, notes, lyr.structure))
                t += 4 * n + 64
            out.append(Song(r.tags.id, r.tags.key, r.tags.emotion, r.tags.bpm, tuple(sents)))
        return out

    return compose


def test_perfect_controller_sweep(small_corpus):
    q = fit_quantizer(small_corpus)
    prompts = [(lyrics_of(s), tags_of(s)) for s in small_corpus[:5]]
    res = controllability_sweep(_pm_oracle_composer(q), prompts, q, "PM", [4, 12, 20, 28, 36, 44, 52, 60])
    assert res.rho["PM"] == pytest.approx(1.0)
    assert res.failures == 0 and res.pairs == 8 * sum(len(p[0]) for p in prompts)
    matrix = ControllabilityMatrix({"PM": res})
    assert matrix.to_csv().splitlines()[0] == "swept," + ",".join(ATTRIBUTE_NAMES)
    assert "PM" in matrix.to_text() and '"PM"' in matrix.to_json()


def test_sweep_counts_failures(small_corpus):
    q = fit_quantizer(small_corpus)
    prompts = [(lyrics_of(s), tags_of(s)) for s in small_corpus[:3]]
    inner = _pm_oracle_composer(q)

    def flaky(requests):
        songs = inner(requests)
        return [None if i % 4 == 0 else s for i, s in enumerate(songs)]

    res = controllability_sweep(flaky, prompts, q, "PM", [10, 50])
    assert res.failures == 2


def test_ablation_identical_rows(small_corpus):
    refs = small_corpus[:4]
    shuffle = lambda reqs: [refs[(i + 1) % 4] for i in range(len(reqs))]  # noqa: E731
    req = [CompositionRequest(tuple(lyrics_of(s)), tags_of(s), ()) for s in refs]
    reports = ablation_harness({"a": shuffle, "b": shuffle}, refs, {"a": req, "b": req})
    assert reports["a"] == reports["b"]
    table = format_table(reports)
    assert table.splitlines()[0].split() == ["config", "PD%", "DD%", "MD"]
    perfect = evaluate_pairs([(s, s) for s in refs])
    assert (perfect.pd, perfect.dd, perfect.md) == (100.0, 100.0, 0.0)
