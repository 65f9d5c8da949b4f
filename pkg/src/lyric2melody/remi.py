"""REMI-Aligned token streams: vocabulary, tokenizer, grammar and inverse.

Stream layout::

    SEQ
      ( SYL ( BAR* POS PITCH DUR )+ )+ SEP     -- once per sentence
    EOS

BAR tokens are emitted lazily, one per bar boundary crossed since the last
BAR, so absolute onsets are recoverable as ``bar * 64 + pos``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .score import (
    MAX_DURATION,
    TICKS_PER_BAR,
    LyricSentence,
    Note,
    Sentence,
    Song,
    SongTags,
    Syllable,
    check_song,
)


class Kind(enum.IntEnum):
    PAD = 0
    SEQ = 1
    EOS = 2
    SEP = 3
    SYL = 4
    BAR = 5
    POS = 6
    PITCH = 7
    DUR = 8


PAD, SEQ, EOS, SEP, SYL, BAR = range(6)
POS_BASE = 6
PITCH_BASE = POS_BASE + TICKS_PER_BAR
DUR_BASE = PITCH_BASE + 128
VOCAB_SIZE = DUR_BASE + MAX_DURATION
NUM_KINDS = len(Kind)

_SPECIAL_NAMES = ("PAD", "SEQ", "EOS", "SEP", "SYL", "BAR")


def pos_token(p: int) -> int:
    return POS_BASE + p


def pitch_token(m: int) -> int:
    return PITCH_BASE + m


def dur_token(d: int) -> int:
    return DUR_BASE + d - 1


def _build_tables():
    kinds = np.empty(VOCAB_SIZE, dtype=np.int64)
    values = np.zeros(VOCAB_SIZE, dtype=np.int64)
    names = []
    for i, name in enumerate(_SPECIAL_NAMES):
        kinds[i] = Kind[name]
        names.append(name)
    for p in range(TICKS_PER_BAR):
        kinds[pos_token(p)], values[pos_token(p)] = Kind.POS, p
        names.append(f"POS_{p}")
    for m in range(128):
        kinds[pitch_token(m)], values[pitch_token(m)] = Kind.PITCH, m
        names.append(f"PITCH_{m}")
    for d in range(1, MAX_DURATION + 1):
        kinds[dur_token(d)], values[dur_token(d)] = Kind.DUR, d
        names.append(f"DUR_{d}")
    return kinds, values, tuple(names)


KIND_OF, VALUE_OF, TOKEN_NAMES = _build_tables()
KIND_MASKS = np.stack([KIND_OF == k for k in range(NUM_KINDS)])


class Vocabulary:
    """Fixed bijection between token names and integer ids."""

    def __init__(self, names: Sequence[str] = TOKEN_NAMES):
        self.names = tuple(names)
        self._ids = {n: i for i, n in enumerate(self.names)}
        if len(self._ids) != len(self.names):
            raise ValueError("duplicate token names")

    def __len__(self) -> int:
        return len(self.names)

    def encode(self, name: str) -> int:
        try:
            return self._ids[name]
        except KeyError:
            raise ValueError(f"unknown token {name!r}") from None

    def decode(self, token: int) -> str:
        return self.names[token]


VOCAB = Vocabulary()


def kind_of(token: int) -> Kind:
    return Kind(int(KIND_OF[token]))


def tokens_to_text(tokens: Sequence[int]) -> str:
    return " ".join(TOKEN_NAMES[t] for t in tokens)


def text_to_tokens(text: str) -> list[int]:
    return [VOCAB.encode(name) for name in text.split()]


class GrammarError(ValueError):
    def __init__(self, index: int, message: str):
        self.index = index
        super().__init__(f"grammar violation at token {index}: {message}")


class CountMismatchError(ValueError):
    pass


class BudgetExhaustedError(RuntimeError):
    """Decoding ran out of tokens before every syllable received a note."""

    def __init__(self, tokens: Sequence[int], message: str):
        self.tokens = list(tokens)
        super().__init__(message)


# ---------------------------------------------------------------------------
# tokenization


def tokenize_song(song: Song) -> list[int]:
    check_song(song)
    out = [SEQ]
    bar = -1
    for sent in song.sentences:
        for syl in sent.syllables:
            out.append(SYL)
            for ni in syl.notes:
                note = sent.notes[ni]
                while bar < note.onset // TICKS_PER_BAR:
                    out.append(BAR)
                    bar += 1
                out += [pos_token(note.onset % TICKS_PER_BAR), pitch_token(note.pitch), dur_token(note.duration)]
        out.append(SEP)
    out.append(EOS)
    return out


def rebase_sentence(sentence: Sentence) -> Sentence:
    """Shift a sentence so its first note falls in bar 0."""
    shift = (sentence.notes[0].onset // TICKS_PER_BAR) * TICKS_PER_BAR
    notes = tuple(Note(n.onset - shift, n.duration, n.pitch) for n in sentence.notes)
    return replace(sentence, notes=notes)


def tokenize_sentence(sentence: Sentence) -> list[int]:
    """Stand-alone stream of one sentence, time rebased to its first bar."""
    song = Song(id="", key=0, emotion=0, bpm=120.0, sentences=(rebase_sentence(sentence),))
    return tokenize_song(song)


# ---------------------------------------------------------------------------
# grammar


@dataclass
class GrammarState:
    """Incremental parser state for one stream.

    ``syllable_counts`` fixes the lyric structure; when None, the number and
    length of sentences is left open and only local structure is checked.
    ``budget`` caps the total stream length; when set, a token is legal only
    if the stream can still be completed within the budget.
    """

    syllable_counts: tuple[int, ...] | None = None
    budget: int | None = None
    length: int = 0
    last: Kind | None = None
    sentence: int = 0
    syllables_done: int = 0  # SYL tokens seen in the current sentence
    notes_in_syllable: int = 0
    bar: int = -1
    offset: int = 0  # end of the last completed note
    onset: int = 0  # onset of the note under construction

    def copy(self) -> "GrammarState":
        return replace(self)

    # -- lyric structure helpers
    def _syllables_left(self) -> int | None:
        if self.syllable_counts is None:
            return None
        return self.syllable_counts[self.sentence] - self.syllables_done

    def _sentences_left(self) -> int | None:
        if self.syllable_counts is None:
            return None
        return len(self.syllable_counts) - self.sentence - 1

    def _pos_floor(self) -> int | None:
        """Smallest legal POS value in the current bar, or None if none fits."""
        if self.bar < 0:
            return None
        start = self.bar * TICKS_PER_BAR
        floor = max(self.offset - start, 0)
        return floor if floor < TICKS_PER_BAR else None

    # -- budget helpers
    def _tail_cost(self, earliest: int, bar: int, notes: int, extra: int) -> int:
        """Tokens needed to place ``notes`` more 1-tick notes from ``earliest``, plus ``extra``."""
        if notes == 0:
            return extra
        if bar >= 0:
            earliest = max(earliest, bar * TICKS_PER_BAR)
        bars = (earliest + notes - 1) // TICKS_PER_BAR - bar
        return 3 * notes + bars + extra

    def _remaining_plan(self) -> tuple[int, int]:
        """(notes still required, SYL/SEP/EOS tokens still required) after a completed note."""
        assert self.syllable_counts is not None
        left = self._syllables_left()
        notes = left + sum(self.syllable_counts[self.sentence + 1 :])
        later = len(self.syllable_counts) - self.sentence - 1
        return notes, notes + later + 1 + 1  # SYL each, SEP each, EOS

    def min_remaining(self) -> int:
        """Fewest tokens needed to finish the stream from this state."""
        if self.syllable_counts is None:
            raise ValueError("min_remaining needs known syllable counts")
        last = self.last
        if last is None:
            return 1 + self._start_cost(0)
        if last is Kind.EOS:
            return 0
        if last is Kind.SEP:
            return self._start_cost(self.sentence + 1)
        if last is Kind.SEQ:
            return self._start_cost(self.sentence)
        if last is Kind.POS:
            return 2 + self._after_note_cost(self.onset + 1)
        if last is Kind.PITCH:
            return 1 + self._after_note_cost(self.onset + 1)
        if last in (Kind.SYL, Kind.BAR):
            # a note must follow, even if the syllable already has one
            notes, extra = self._remaining_plan()
            return self._tail_cost(self.offset, self.bar, notes + 1, extra)
        return self._after_note_cost(self.offset)

    def _start_cost(self, sentence: int) -> int:
        counts = self.syllable_counts
        if sentence >= len(counts):
            return 1
        notes = sum(counts[sentence:])
        return self._tail_cost(self.offset, self.bar, notes, notes + len(counts) - sentence + 1)

    def _after_note_cost(self, offset: int) -> int:
        notes, extra = self._remaining_plan()
        return self._tail_cost(offset, self.bar, notes, extra)

    # -- transitions
    def _structural_kinds(self) -> set[Kind]:
        last = self.last
        if last is None:
            return {Kind.SEQ}
        if last is Kind.EOS:
            return set()
        if last is Kind.POS:
            return {Kind.PITCH}
        if last is Kind.PITCH:
            return {Kind.DUR}
        note_kinds = {Kind.BAR}
        if self._pos_floor() is not None:
            note_kinds.add(Kind.POS)
        if last is Kind.SEQ:
            return {Kind.SYL}
        if last in (Kind.SYL, Kind.BAR):
            return note_kinds
        if last is Kind.SEP:
            left = self._sentences_left()
            if left is None:
                return {Kind.SYL, Kind.EOS}
            return {Kind.SYL} if left > 0 else {Kind.EOS}
        # after DUR
        left = self._syllables_left()
        if left is None:
            return note_kinds | {Kind.SYL, Kind.SEP}
        return note_kinds | ({Kind.SYL} if left > 0 else {Kind.SEP})

    def _fits(self, token: int) -> bool:
        if self.budget is None:
            return True
        nxt = self.copy()
        nxt._advance(token)
        return nxt.length + nxt.min_remaining() <= self.budget

    def legal_kinds(self) -> frozenset[Kind]:
        kinds = self._structural_kinds()
        if self.budget is None:
            return frozenset(kinds)
        keep = set()
        for k in kinds:
            if k is Kind.POS:
                rep = pos_token(self._pos_floor())
            elif k is Kind.PITCH:
                rep = pitch_token(0)
            elif k is Kind.DUR:
                rep = dur_token(1)
            else:
                rep = int(k)
            if self._fits(rep):
                keep.add(k)
        return frozenset(keep)

    def legal_mask(self) -> np.ndarray:
        """Boolean mask over the vocabulary of tokens that may come next."""
        mask = np.zeros(VOCAB_SIZE, dtype=bool)
        for k in self.legal_kinds():
            if k is Kind.POS:
                lo = self._pos_floor()
                hi = TICKS_PER_BAR - 1
                if self.budget is not None:
                    hi = self._max_fitting(lo, hi, pos_token)
                mask[pos_token(lo) : pos_token(hi) + 1] = True
            elif k is Kind.DUR:
                hi = MAX_DURATION
                if self.budget is not None:
                    hi = self._max_fitting(1, hi, dur_token)
                mask[dur_token(1) : dur_token(hi) + 1] = True
            else:
                mask |= KIND_MASKS[k]
        return mask

    def _max_fitting(self, lo: int, hi: int, make) -> int:
        # completion cost is monotone in the value, so bisect for the largest that fits
        if self._fits(make(hi)):
            return hi
        while lo < hi:
            mid = (lo + hi + 1) // 2
            if self._fits(make(mid)):
                lo = mid
            else:
                hi = mid - 1
        return lo

    def _advance(self, token: int) -> None:
        kind = Kind(int(KIND_OF[token]))
        if kind is Kind.SYL:
            if self.last is Kind.SEP:
                self.sentence += 1
                self.syllables_done = 0
            self.syllables_done += 1
            self.notes_in_syllable = 0
        elif kind is Kind.BAR:
            self.bar += 1
        elif kind is Kind.POS:
            self.onset = self.bar * TICKS_PER_BAR + int(VALUE_OF[token])
        elif kind is Kind.DUR:
            self.offset = self.onset + int(VALUE_OF[token])
            self.notes_in_syllable += 1
        self.last = kind
        self.length += 1

    def push(self, token: int, index: int | None = None) -> None:
        """Consume one token, raising GrammarError if it is not legal here."""
        at = self.length if index is None else index
        if not 0 <= token < VOCAB_SIZE:
            raise GrammarError(at, f"token id {token} outside vocabulary")
        kind = Kind(int(KIND_OF[token]))
        legal = self._structural_kinds()
        if kind not in legal:
            expected = ", ".join(sorted(k.name for k in legal)) or "nothing"
            raise GrammarError(at, f"{TOKEN_NAMES[token]} after {self.last.name if self.last else 'start'}, expected {expected}")
        if kind is Kind.POS and int(VALUE_OF[token]) < self._pos_floor():
            raise GrammarError(at, f"{TOKEN_NAMES[token]} overlaps the previous note ending at tick {self.offset}")
        if self.budget is not None and not self._fits(token):
            raise GrammarError(at, f"{TOKEN_NAMES[token]} cannot be completed within budget {self.budget}")
        self._advance(token)

    @property
    def complete(self) -> bool:
        return self.last is Kind.EOS


def legal_next_kinds(state: GrammarState) -> frozenset[Kind]:
    return state.legal_kinds()


def check_stream(tokens: Sequence[int], syllable_counts: Sequence[int] | None = None) -> GrammarState:
    state = GrammarState(tuple(syllable_counts) if syllable_counts is not None else None)
    for i, tok in enumerate(tokens):
        state.push(int(tok), i)
    if not state.complete:
        raise GrammarError(len(tokens), "stream ends before EOS")
    return state


# ---------------------------------------------------------------------------
# inverse


def parse_stream(tokens: Sequence[int]) -> list[list[list[Note]]]:
    """Notes grouped per sentence and per syllable."""
    state = GrammarState()
    sentences: list[list[list[Note]]] = []
    current: list[list[Note]] | None = None
    pitch = 0
    for i, tok in enumerate(tokens):
        tok = int(tok)
        state.push(tok, i)
        kind = state.last
        if kind is Kind.SYL:
            if current is None:
                current = []
                sentences.append(current)
            current.append([])
        elif kind is Kind.SEP:
            current = None
        elif kind is Kind.PITCH:
            pitch = int(VALUE_OF[tok])
        elif kind is Kind.DUR:
            current[-1].append(Note(state.onset, int(VALUE_OF[tok]), pitch))
    if not state.complete:
        raise GrammarError(len(tokens), "stream ends before EOS")
    return sentences


def detokenize_song(tokens: Sequence[int], lyrics: Sequence[LyricSentence], tags: SongTags) -> Song:
    groups = parse_stream(tokens)
    if len(groups) != len(lyrics):
        raise CountMismatchError(f"stream has {len(groups)} sentences, lyrics have {len(lyrics)}")
    sentences = []
    for si, (notes_per_syl, lyric) in enumerate(zip(groups, lyrics)):
        if len(notes_per_syl) != len(lyric.texts):
            raise CountMismatchError(
                f"sentence {si}: stream has {len(notes_per_syl)} SYL tokens, lyrics have {len(lyric.texts)} syllables"
            )
        notes: list[Note] = []
        syllables = []
        for text, tone, group in zip(lyric.texts, lyric.tones, notes_per_syl):
            syllables.append(Syllable(text, tone, tuple(range(len(notes), len(notes) + len(group)))))
            notes.extend(group)
        sentences.append(Sentence(tuple(syllables), lyric.words, tuple(notes), lyric.structure))
    song = Song(tags.id, tags.key, tags.emotion, tags.bpm, tuple(sentences), tags.tonal)
    return check_song(song)


def token_syllable_map(tokens: Sequence[int]) -> list[int]:
    """Global syllable index governing each token position."""
    out = []
    current = -1
    for tok in tokens:
        if KIND_OF[tok] == Kind.SYL:
            current += 1
        out.append(max(current, 0))
    return out
