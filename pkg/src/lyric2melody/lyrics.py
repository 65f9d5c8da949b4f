"""Syllable tone classes and word-level POS tags expanded to syllables."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterator, Mapping, Sequence

from .score import NUM_POS_TAGS, NUM_TONES, Sentence, WordSpan

logger = logging.getLogger(__name__)

NEUTRAL_TONE = 4


class ToneLookupError(KeyError):
    def __init__(self, syllables: Sequence[str]):
        self.syllables = list(syllables)
        super().__init__(f"no tone for syllables: {' '.join(self.syllables)}")


class SpanError(ValueError):
    pass


def tone_class(tone_number: int) -> int:
    """Map a conventional tone number (1-4, 5 or 0 for the light tone) to a class."""
    if tone_number in (0, 5):
        return NEUTRAL_TONE
    if 1 <= tone_number <= 4:
        return tone_number - 1
    raise ValueError(f"tone number {tone_number} not in 0..5")


class ToneTable(Mapping[str, int]):
    def __init__(self, entries: Mapping[str, int]):
        for syl, cls in entries.items():
            if not 0 <= cls < NUM_TONES:
                raise ValueError(f"tone class {cls} for {syl!r} not in 0..4")
        self._entries = dict(entries)

    def __getitem__(self, key: str) -> int:
        return self._entries[key]

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    @classmethod
    def parse(cls, text: str) -> "ToneTable":
        entries = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                syl, value = line.split("\t")
                entries[syl] = int(value)
            except ValueError:
                raise ValueError(f"tone table line {lineno}: expected 'syllable<TAB>class'") from None
        return cls(entries)

    @classmethod
    def load(cls, path: str | Path) -> "ToneTable":
        return cls.parse(Path(path).read_text(encoding="utf-8"))

    @classmethod
    def bundled(cls) -> "ToneTable":
        text = resources.files(__package__).joinpath("data/tones.tsv").read_text(encoding="utf-8")
        return cls.parse(text)


def annotate_tones(
    sentences: Sequence[Sequence[str]],
    table: Mapping[str, int],
    supplied: Sequence[Sequence[int | None]] | None = None,
    tonal: bool = True,
) -> list[list[int]]:
    """Tone class per syllable.

    Corpus-supplied tones win over the table; a disagreement is only logged
    since polyphonic characters legitimately differ.
    """
    if not tonal:
        return [[NEUTRAL_TONE] * len(s) for s in sentences]
    out, missing = [], []
    for si, texts in enumerate(sentences):
        given = supplied[si] if supplied is not None else [None] * len(texts)
        row = []
        for text, tone in zip(texts, given):
            if tone is not None:
                if text in table and table[text] != tone:
                    logger.debug("corpus tone %d for %r differs from table %d", tone, text, table[text])
                row.append(tone)
            elif text in table:
                row.append(table[text])
            else:
                missing.append(text)
                row.append(NEUTRAL_TONE)
        out.append(row)
    if missing:
        raise ToneLookupError(missing)
    return out


def expand_pos_to_syllables(words: Sequence[WordSpan], num_syllables: int) -> list[int]:
    tags = [-1] * num_syllables
    for w in words:
        if not 0 <= w.pos < NUM_POS_TAGS:
            raise SpanError(f"pos tag {w.pos} outside 0..{NUM_POS_TAGS - 1}")
        if w.start < 0 or w.end >= num_syllables or w.end < w.start:
            raise SpanError(f"span {w.start}..{w.end} outside 0..{num_syllables - 1}")
        for i in range(w.start, w.end + 1):
            if tags[i] != -1:
                raise SpanError(f"overlapping word spans at syllable {i}")
            tags[i] = w.pos
    gaps = [i for i, t in enumerate(tags) if t == -1]
    if gaps:
        raise SpanError(f"word spans leave a gap at syllables {gaps}")
    return tags


@dataclass(frozen=True)
class SyllableControls:
    tone: int
    pos: int


def syllable_controls(sentence: Sentence) -> list[SyllableControls]:
    pos = expand_pos_to_syllables(sentence.words, sentence.num_syllables)
    return [SyllableControls(s.tone, p) for s, p in zip(sentence.syllables, pos)]
