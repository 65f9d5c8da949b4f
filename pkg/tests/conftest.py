import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from lyric2melody.score import Note, Sentence, Song, Syllable, WordSpan  # noqa: E402
from lyric2melody.synth import CorpusSpec, gen_synthetic  # noqa: E402


def make_sentence(notes, alignment, texts=None, tones=None, words=None, structure=0):
    """notes: (onset, dur, pitch) triples; alignment: note index lists per syllable."""
    texts = texts or ["天"] * len(alignment)
    tones = tones or [0] * len(alignment)
    words = words or [WordSpan(0, len(alignment) - 1, 0)]
    syllables = tuple(Syllable(t, tn, tuple(a)) for t, tn, a in zip(texts, tones, alignment))
    return Sentence(syllables, tuple(words), tuple(Note(*n) for n in notes), structure)


def make_song(*sentences, key=0, emotion=0, bpm=120, song_id="t"):
    return Song(song_id, key, emotion, bpm, tuple(sentences))


@pytest.fixture
def minimal_song():
    return make_song(make_sentence([(0, 4, 60)], [[0]]))


@pytest.fixture(scope="session")
def small_corpus():
    return gen_synthetic(CorpusSpec(num_songs=40, seed=3))


def random_song(rng, max_sentences=4, max_syllables=6, song_id="r"):
    """Adversarial valid song: long notes across bars, big gaps, melisma."""
    sentences = []
    t = int(rng.integers(0, 200))
    for _ in range(int(rng.integers(1, max_sentences + 1))):
        n_syl = int(rng.integers(1, max_syllables + 1))
        notes, alignment = [], []
        for _ in range(n_syl):
            group = []
            for _ in range(int(rng.integers(1, 4))):
                dur = int(rng.integers(1, 129)) if rng.random() < 0.2 else int(rng.integers(1, 17))
                notes.append((t, dur, int(rng.integers(0, 128))))
                group.append(len(notes) - 1)
                gap = int(rng.integers(0, 150)) if rng.random() < 0.1 else int(rng.integers(0, 3))
                t += dur + gap
            alignment.append(group)
        cuts = sorted(set(int(c) for c in rng.integers(1, n_syl + 1, size=2)) | {n_syl})
        words, start = [], 0
        for c in cuts:
            if c > start:
                words.append(WordSpan(start, c - 1, int(rng.integers(0, 56))))
                start = c
        tones = [int(x) for x in rng.integers(0, 5, n_syl)]
        sentences.append(make_sentence(notes, alignment, tones=tones, words=words,
                                       structure=int(rng.integers(0, 5))))
    return make_song(*sentences, key=int(rng.integers(0, 24)), emotion=int(rng.integers(0, 3)),
                     bpm=int(rng.integers(40, 200)), song_id=song_id)


_ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance_report():
    """Record one verdict line; all lines are repeated in the terminal summary."""

    def report(line):
        _ACCEPTANCE_LINES.append(line)
        print(line)

    return report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
