"""Deterministic synthetic lyric-melody corpus.

Each sentence draws independent knobs (register, contour, rhythm density,
duration mix, melisma rate) so the statistical attributes vary roughly
independently of one another. Rests fall only at word boundaries and the
first note of a syllable leans up or down with the lexical tone, giving the
lyric controls something to explain.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .attributes import ATTRIBUTE_NAMES, compute_attributes
from .lyrics import ToneTable
from .score import TICKS_PER_BAR, TICKS_PER_BEAT, Note, Sentence, Song, Syllable, WordSpan, check_song

MAJOR = (0, 2, 4, 5, 7, 9, 11)
MINOR = (0, 2, 3, 5, 7, 8, 10)
PITCH_LO, PITCH_HI = 40, 90
MAX_ATTEMPTS = 400

# attributes that are fractions in [0, 1]
_FRACTIONS = {"DMM", "AA", "CM", "MCD"}


class InfeasibleTargetError(ValueError):
    pass


@dataclass(frozen=True)
class CorpusSpec:
    num_songs: int
    seed: int = 0
    sentences: tuple[int, int] = (3, 5)
    syllables: tuple[int, int] = (4, 8)
    targets: Mapping[str, tuple[float, float]] = field(default_factory=dict)
    id_prefix: str = "syn"


def _check_targets(targets: Mapping[str, tuple[float, float]]) -> None:
    for name, (lo, hi) in targets.items():
        if name not in ATTRIBUTE_NAMES:
            raise InfeasibleTargetError(f"unknown attribute {name!r}")
        if lo > hi:
            raise InfeasibleTargetError(f"{name}: empty band [{lo}, {hi}]")
        if name in _FRACTIONS and (hi < 0 or lo > 1):
            raise InfeasibleTargetError(f"{name}: band [{lo}, {hi}] outside [0, 1]")
        if name == "Align" and (hi <= 0 or lo > 1):
            raise InfeasibleTargetError(f"Align: band [{lo}, {hi}] outside (0, 1]")
        if name in ("PV", "PR", "DV", "DR") and hi < 0:
            raise InfeasibleTargetError(f"{name}: negative band")
        if name in ("DM", "ND") and hi <= 0:
            raise InfeasibleTargetError(f"{name}: band must admit positive values")
    # a flat melody has no spread and no motion
    if "PR" in targets and targets["PR"][1] < 1:
        for other in ("PV", "DMM", "CM"):
            if other in targets and targets[other][0] > 0:
                raise InfeasibleTargetError(f"PR band {targets['PR']} forces {other} = 0")
    if "DR" in targets and targets["DR"][1] < 1:
        if "DV" in targets and targets["DV"][0] > 0:
            raise InfeasibleTargetError(f"DR band {targets['DR']} forces DV = 0")
        if "MCD" in targets and targets["MCD"][1] < 1:
            raise InfeasibleTargetError(f"DR band {targets['DR']} forces MCD = 1")


def _band(targets, name, lo, hi):
    """Intersect a knob's natural range with the user's band for it."""
    if name in targets:
        tlo, thi = targets[name]
        lo, hi = max(lo, tlo), min(hi, thi)
        if lo > hi:
            lo = hi = min(max(tlo, lo), thi)
    return lo, hi


class _SentenceMaker:
    def __init__(self, rng: np.random.Generator, table: ToneTable, targets):
        self.rng = rng
        self.targets = targets
        self.syllables = sorted(table)
        self.table = table

    def lyric(self, n_syl: int):
        rng = self.rng
        texts = [self.syllables[i] for i in rng.integers(0, len(self.syllables), n_syl)]
        tones = [self.table[t] for t in texts]
        words, i = [], 0
        while i < n_syl:
            length = int(min(rng.integers(1, 4), n_syl - i))
            words.append(WordSpan(i, i + length - 1, int(rng.integers(0, 56))))
            i += length
        return texts, tones, words

    def make(self, n_syl: int, key: int, start: int, structure: int) -> Sentence:
        rng, tg = self.rng, self.targets
        texts, tones, words = self.lyric(n_syl)

        a_lo, a_hi = _band(tg, "Align", 0.5, 1.0)
        align = rng.uniform(a_lo, a_hi)
        n = int(np.clip(round(n_syl / align), n_syl, 2 * n_syl))
        # melisma: extra notes go to random syllables
        per_syl = np.ones(n_syl, dtype=int)
        for s in rng.integers(0, n_syl, n - n_syl):
            per_syl[s] += 1
        first_of_syl = np.zeros(n, dtype=bool)
        first_of_syl[np.concatenate([[0], np.cumsum(per_syl)[:-1]])] = True
        word_starts = {w.start for w in words}
        syl_of_note = np.repeat(np.arange(n_syl), per_syl)

        # durations: a modal value plus jittered neighbours
        m_lo, m_hi = _band(tg, "DM", 3.0, 7.0)
        base = rng.uniform(m_lo, m_hi)
        width = int(rng.integers(0, 3))
        modal = rng.uniform(0.3, 0.9)
        dur = np.where(
            rng.random(n) < modal,
            round(base),
            np.rint(base + rng.integers(-width, width + 1, n)),
        )
        dur = np.clip(dur, 1, 32).astype(int)

        # rests at word boundaries fill the span implied by the density target
        nd_lo, nd_hi = _band(tg, "ND", 0.5, 1.75)
        density = rng.uniform(nd_lo, nd_hi)
        rest_total = max(0, int(round(n * TICKS_PER_BEAT / density)) - int(dur.sum()))
        gaps = [i for i in range(n - 1) if first_of_syl[i + 1] and syl_of_note[i + 1] in word_starts]
        if not gaps:
            gaps = list(range(n - 1))
        rests = np.zeros(max(n - 1, 0), dtype=int)
        if gaps and rest_total:
            share = rng.multinomial(rest_total, np.full(len(gaps), 1 / len(gaps)))
            rests[gaps] = share

        pitches = self._contour(n, key, tones, syl_of_note, first_of_syl)
        onsets = start + np.concatenate([[0], np.cumsum(dur[:-1] + rests)])
        notes = tuple(Note(int(o), int(d), int(p)) for o, d, p in zip(onsets, dur, pitches))
        syllables, k = [], 0
        for text, tone, count in zip(texts, tones, per_syl):
            syllables.append(Syllable(text, tone, tuple(range(k, k + count))))
            k += count
        return Sentence(tuple(syllables), tuple(words), notes, structure)

    def _contour(self, n, key, tones, syl_of_note, first_of_syl):
        rng, tg = self.rng, self.targets
        scale = MAJOR if key < 12 else MINOR
        tonic = key % 12
        degrees = [tonic + 12 * octave + s for octave in range(11) for s in scale]
        degrees = np.array([d for d in degrees if PITCH_LO <= d <= PITCH_HI])

        up = rng.uniform(*_band(tg, "DMM", 0.25, 0.75))
        repeat = rng.uniform(0.0, 0.3)
        leap = rng.uniform(0.0, 0.5)
        steps = np.zeros(n, dtype=int)
        for i in range(1, n):
            p_up = up
            if first_of_syl[i]:
                tone = tones[syl_of_note[i]]
                p_up += {1: 0.2, 3: -0.2}.get(tone, 0.0)
                if rng.random() < repeat:
                    continue
            size = 2 if (first_of_syl[i] and rng.random() < leap) else 1
            steps[i] = size if rng.random() < p_up else -size
        walk = np.cumsum(steps)

        c_lo, c_hi = _band(tg, "PM", 55.0, 72.0)
        center = rng.uniform(c_lo, c_hi)
        mid = int(np.argmin(np.abs(degrees - center)))
        idx = walk - int(round(walk.mean())) + mid
        # reflect off the register limits instead of clipping flat
        idx = np.where(idx < 0, -idx, idx)
        idx = np.where(idx >= len(degrees), 2 * (len(degrees) - 1) - idx, idx)
        idx = np.clip(idx, 0, len(degrees) - 1)
        pitches = degrees[idx]
        # nudge by whole scale degrees toward the requested mean
        for _ in range(len(degrees)):
            gap = center - pitches.mean()
            shift = 1 if gap > 1 else -1 if gap < -1 else 0
            if shift == 0 or not (0 <= idx.min() + shift and idx.max() + shift < len(degrees)):
                break
            idx = idx + shift
            pitches = degrees[idx]
        return pitches

    def in_band(self, sentence: Sentence) -> bool:
        if not self.targets:
            return True
        attrs = compute_attributes(sentence)._asdict()
        return all(lo <= attrs[name] <= hi for name, (lo, hi) in self.targets.items())


def _structures(count: int, rng: np.random.Generator) -> list[int]:
    verse = max(1, count // 2)
    out = [0] * verse + [1] * (count - verse)
    if count >= 4 and rng.random() < 0.3:
        out[-1] = 4
    if count >= 5 and rng.random() < 0.2:
        out[verse] = 3
    return out


def gen_synthetic(spec: CorpusSpec, table: ToneTable | None = None) -> list[Song]:
    if spec.num_songs < 1:
        raise ValueError(f"num_songs must be at least 1, got {spec.num_songs}")
    targets = dict(spec.targets)
    _check_targets(targets)
    table = table if table is not None else ToneTable.bundled()
    rng = np.random.default_rng(spec.seed)
    maker = _SentenceMaker(rng, table, targets)
    width = len(str(spec.num_songs - 1))

    songs = []
    for index in range(spec.num_songs):
        key = int(rng.integers(0, 24))
        emotion = int(rng.integers(0, 3))
        bpm = int(rng.integers(60, 121))
        count = int(rng.integers(spec.sentences[0], spec.sentences[1] + 1))
        sentences = []
        cursor = 0
        for structure in _structures(count, rng):
            n_syl = int(rng.integers(spec.syllables[0], spec.syllables[1] + 1))
            bar = -(-cursor // TICKS_PER_BAR) + int(rng.integers(0, 2))
            start = bar * TICKS_PER_BAR + 4 * int(rng.integers(0, 3))
            for _ in range(MAX_ATTEMPTS):
                sent = maker.make(n_syl, key, start, structure)
                if maker.in_band(sent):
                    break
            else:
                raise InfeasibleTargetError(
                    f"no sentence within target bands {targets} after {MAX_ATTEMPTS} attempts"
                )
            sentences.append(sent)
            cursor = sent.notes[-1].offset
        song = Song(f"{spec.id_prefix}{index:0{width}d}", key, emotion, bpm, tuple(sentences))
        songs.append(check_song(song))
    return songs
