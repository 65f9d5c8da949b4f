"""Song model, corpus I/O and MIDI export.

Time is measured in ticks of a 64th note: 16 ticks per quarter, 64 per 4/4
bar. Note onsets are absolute within the song.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

logger = logging.getLogger(__name__)

TICKS_PER_BEAT = 16
TICKS_PER_BAR = 64
MAX_DURATION = 128
NUM_KEYS = 24
NUM_EMOTIONS = 3
NUM_STRUCTURES = 5
NUM_TONES = 5
NUM_POS_TAGS = 56

KEY_NAMES = (
    "C", "Db", "D", "Eb", "E", "F", "F#", "G", "Ab", "A", "Bb", "B",
    "c", "c#", "d", "d#", "e", "f", "f#", "g", "g#", "a", "bb", "b",
)
EMOTION_NAMES = ("neutral", "positive", "negative")
STRUCTURE_NAMES = ("verse", "chorus", "insertion", "bridge", "outro")


class CorpusError(ValueError):
    """Raised when a corpus file cannot be parsed or fails validation."""


class SongValidationError(ValueError):
    def __init__(self, violations: Sequence[str], song_id: str = ""):
        self.violations = list(violations)
        self.song_id = song_id
        head = f"song {song_id!r}: " if song_id else ""
        super().__init__(head + "; ".join(self.violations))


@dataclass(frozen=True)
class Note:
    onset: int
    duration: int
    pitch: int

    @property
    def offset(self) -> int:
        return self.onset + self.duration


@dataclass(frozen=True)
class Syllable:
    text: str
    tone: int
    notes: tuple[int, ...]


@dataclass(frozen=True)
class WordSpan:
    """Inclusive syllable range ``start..end`` carrying one POS tag."""

    start: int
    end: int
    pos: int


@dataclass(frozen=True)
class Sentence:
    syllables: tuple[Syllable, ...]
    words: tuple[WordSpan, ...]
    notes: tuple[Note, ...]
    structure: int = 0

    @property
    def num_syllables(self) -> int:
        return len(self.syllables)

    @property
    def num_notes(self) -> int:
        return len(self.notes)


@dataclass(frozen=True)
class Song:
    id: str
    key: int
    emotion: int
    bpm: float
    sentences: tuple[Sentence, ...]
    tonal: bool = True

    @property
    def num_syllables(self) -> int:
        return sum(s.num_syllables for s in self.sentences)

    @property
    def num_notes(self) -> int:
        return sum(s.num_notes for s in self.sentences)

    def all_notes(self) -> list[Note]:
        return [n for s in self.sentences for n in s.notes]


@dataclass(frozen=True)
class LyricSentence:
    """The lyric half of a sentence: everything except its notes."""

    texts: tuple[str, ...]
    tones: tuple[int, ...]
    words: tuple[WordSpan, ...]
    structure: int = 0


@dataclass(frozen=True)
class SongTags:
    id: str = ""
    key: int = 0
    emotion: int = 0
    bpm: float = 120.0
    tonal: bool = True


def lyrics_of(song: Song) -> list[LyricSentence]:
    return [
        LyricSentence(
            texts=tuple(s.text for s in sent.syllables),
            tones=tuple(s.tone for s in sent.syllables),
            words=sent.words,
            structure=sent.structure,
        )
        for sent in song.sentences
    ]


def tags_of(song: Song) -> SongTags:
    return SongTags(id=song.id, key=song.key, emotion=song.emotion, bpm=song.bpm, tonal=song.tonal)


# ---------------------------------------------------------------------------
# validation


def _validate_sentence(si: int, sent: Sentence) -> list[str]:
    out: list[str] = []
    where = f"sentence {si}"
    if not sent.syllables:
        out.append(f"{where}: no syllables (Sentence.syllables)")
    if not sent.notes:
        out.append(f"{where}: no notes (Sentence.notes)")
    if not 0 <= sent.structure < NUM_STRUCTURES:
        out.append(f"{where}: structure {sent.structure} out of range (Sentence.structure)")
    if sent.notes and sent.syllables and sent.num_notes < sent.num_syllables:
        out.append(
            f"{where}: alignment deficit, {sent.num_notes} notes < {sent.num_syllables} syllables"
        )

    for ni, note in enumerate(sent.notes):
        if note.onset < 0:
            out.append(f"{where} note {ni}: negative onset {note.onset} (Note.onset)")
        if not 1 <= note.duration <= MAX_DURATION:
            out.append(f"{where} note {ni}: duration {note.duration} outside 1..{MAX_DURATION} (Note.duration)")
        if not 0 <= note.pitch <= 127:
            out.append(f"{where} note {ni}: pitch {note.pitch} outside 0..127 (Note.pitch)")
        if ni:
            prev = sent.notes[ni - 1]
            if note.onset < prev.onset:
                out.append(f"{where} notes {ni - 1}-{ni}: unsorted onsets (Note.onset)")
            elif note.onset < prev.offset:
                out.append(
                    f"{where} notes {ni - 1}-{ni}: overlap, onset {note.onset} < previous offset {prev.offset}"
                )

    expected = 0
    for yi, syl in enumerate(sent.syllables):
        w = f"{where} syllable {yi}"
        if not 0 <= syl.tone < NUM_TONES:
            out.append(f"{w}: tone {syl.tone} outside 0..4 (Syllable.tone)")
        if not syl.notes:
            out.append(f"{w}: empty alignment (Syllable.notes)")
            continue
        idx = list(syl.notes)
        if idx != list(range(idx[0], idx[0] + len(idx))):
            out.append(f"{w}: non-contiguous alignment {idx} (Syllable.notes)")
        if idx[0] != expected:
            out.append(f"{w}: alignment starts at note {idx[0]}, expected {expected} (Syllable.notes)")
        expected = idx[-1] + 1
    if sent.syllables and sent.notes and expected != sent.num_notes:
        out.append(f"{where}: alignment covers {expected} of {sent.num_notes} notes (Syllable.notes)")

    cursor = 0
    for wi, word in enumerate(sorted(sent.words, key=lambda w: w.start)):
        w = f"{where} word {wi}"
        if not 0 <= word.pos < NUM_POS_TAGS:
            out.append(f"{w}: pos tag {word.pos} outside 0..55 (WordSpan.pos)")
        if word.end < word.start:
            out.append(f"{w}: empty span {word.start}..{word.end} (WordSpan)")
        if word.start > cursor:
            out.append(f"{w}: word span gap before syllable {word.start} (WordSpan)")
        elif word.start < cursor:
            out.append(f"{w}: word span overlap at syllable {word.start} (WordSpan)")
        cursor = max(cursor, word.end + 1)
    if cursor != sent.num_syllables:
        out.append(f"{where}: word spans cover {cursor} of {sent.num_syllables} syllables (WordSpan)")
    return out


def validate_song(song: Song) -> list[str]:
    """Return a description of every invariant the song violates."""
    out: list[str] = []
    if not song.sentences:
        out.append("song: no sentences (Song.sentences)")
    if not 0 <= song.key < NUM_KEYS:
        out.append(f"song: key {song.key} outside 0..23 (Song.key)")
    if not 0 <= song.emotion < NUM_EMOTIONS:
        out.append(f"song: emotion {song.emotion} outside 0..2 (Song.emotion)")
    if not song.bpm > 0:
        out.append(f"song: bpm {song.bpm} not positive (Song.bpm)")
    prev_end = 0
    for si, sent in enumerate(song.sentences):
        out.extend(_validate_sentence(si, sent))
        if sent.notes:
            if sent.notes[0].onset < prev_end:
                out.append(
                    f"sentence {si}: sentence order, first onset {sent.notes[0].onset} < previous sentence end {prev_end}"
                )
            prev_end = max(prev_end, sent.notes[-1].offset)
    return out


def check_song(song: Song) -> Song:
    problems = validate_song(song)
    if problems:
        raise SongValidationError(problems, song.id)
    return song


# ---------------------------------------------------------------------------
# JSONL corpus


def song_to_dict(song: Song) -> dict:
    d = {
        "id": song.id,
        "key": song.key,
        "emotion": song.emotion,
        "bpm": song.bpm,
        "sentences": [
            {
                "structure": s.structure,
                "syllables": [{"text": y.text, "tone": y.tone, "notes": list(y.notes)} for y in s.syllables],
                "words": [{"start": w.start, "end": w.end, "pos": w.pos} for w in s.words],
                "notes": [[n.onset, n.duration, n.pitch] for n in s.notes],
            }
            for s in song.sentences
        ],
    }
    if not song.tonal:
        d["tonal"] = False
    return d


def _int(value, what: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise CorpusError(f"{what}: expected integer, got {value!r}")
    return value


def song_from_dict(d: dict) -> Song:
    try:
        sentences = []
        for si, s in enumerate(d["sentences"]):
            syllables = tuple(
                Syllable(
                    text=str(y["text"]),
                    tone=_int(y["tone"], f"sentence {si} tone"),
                    notes=tuple(_int(i, f"sentence {si} alignment") for i in y["notes"]),
                )
                for y in s["syllables"]
            )
            words = tuple(
                WordSpan(_int(w["start"], "word start"), _int(w["end"], "word end"), _int(w["pos"], "pos"))
                for w in s["words"]
            )
            notes = []
            for n in s["notes"]:
                if len(n) != 3:
                    raise CorpusError(f"sentence {si}: note {n!r} is not [onset, duration, pitch]")
                notes.append(Note(*(_int(v, f"sentence {si} note") for v in n)))
            sentences.append(
                Sentence(syllables, words, tuple(notes), _int(s.get("structure", 0), "structure"))
            )
        bpm = d["bpm"]
        if isinstance(bpm, bool) or not isinstance(bpm, (int, float)):
            raise CorpusError(f"bpm: expected number, got {bpm!r}")
        return Song(
            id=str(d.get("id", "")),
            key=_int(d["key"], "key"),
            emotion=_int(d["emotion"], "emotion"),
            bpm=bpm,
            sentences=tuple(sentences),
            tonal=bool(d.get("tonal", True)),
        )
    except KeyError as exc:
        raise CorpusError(f"missing field {exc.args[0]!r}") from None
    except TypeError as exc:
        raise CorpusError(f"malformed record: {exc}") from None


def load_corpus(path: str | Path) -> list[Song]:
    """Read and validate a JSONL corpus, one song per line."""
    songs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"line {lineno}: parse error: {exc.msg}") from None
            try:
                song = song_from_dict(raw)
            except CorpusError as exc:
                raise CorpusError(f"line {lineno}: {exc}") from None
            problems = validate_song(song)
            if problems:
                raise CorpusError(f"line {lineno}: song {song.id!r}: {problems[0]}")
            songs.append(song)
    return songs


def dumps_song(song: Song) -> str:
    return json.dumps(song_to_dict(song), ensure_ascii=False, separators=(",", ":"))


def write_corpus(songs: Iterable[Song], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for song in songs:
            fh.write(dumps_song(song) + "\n")


# ---------------------------------------------------------------------------
# MIDI

MIDI_TICKS_PER_BEAT = 480
_MIDI_SCALE = MIDI_TICKS_PER_BEAT // TICKS_PER_BEAT


def export_midi(song: Song, path: str | Path, velocity: int = 100) -> None:
    """Write the melody as a format-0 SMF with one track."""
    import mido

    check_song(song)
    events = []
    for note in song.all_notes():
        # note-offs sort before note-ons at the same tick
        events.append((note.onset * _MIDI_SCALE, 1, note.pitch))
        events.append((note.offset * _MIDI_SCALE, 0, note.pitch))
    events.sort()

    track = mido.MidiTrack()
    track.append(mido.MetaMessage("set_tempo", tempo=mido.bpm2tempo(song.bpm), time=0))
    track.append(mido.MetaMessage("time_signature", numerator=4, denominator=4, time=0))
    now = 0
    for tick, is_on, pitch in events:
        kind = "note_on" if is_on else "note_off"
        track.append(mido.Message(kind, note=pitch, velocity=velocity if is_on else 0, time=tick - now))
        now = tick
    track.append(mido.MetaMessage("end_of_track", time=0))

    mid = mido.MidiFile(type=0, ticks_per_beat=MIDI_TICKS_PER_BEAT)
    mid.tracks.append(track)
    mid.save(str(path))
