"""Sentence-level statistical melody attributes and equal-frequency binning."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .score import TICKS_PER_BEAT, Sentence, Song

ATTRIBUTE_NAMES = ("PM", "PV", "PR", "DMM", "AA", "CM", "DM", "DV", "DR", "MCD", "ND", "Align")
NUM_ATTRIBUTES = len(ATTRIBUTE_NAMES)
DEFAULT_K = 64

# unison, minor/major thirds, fifth, minor/major sevenths, octave, minor/major tenths
ARPEGGIO_INTERVALS = (0, 3, 4, 7, 10, 11, 12, 15, 16)


class Attributes(NamedTuple):
    PM: float
    PV: float
    PR: float
    DMM: float
    AA: float
    CM: float
    DM: float
    DV: float
    DR: float
    MCD: float
    ND: float
    Align: float


def compute_attributes(sentence: Sentence) -> Attributes:
    if not sentence.notes:
        raise ValueError("cannot compute attributes of a sentence without notes")
    n = len(sentence.notes)
    pitch = np.array([x.pitch for x in sentence.notes], dtype=np.float64)
    dur = np.array([x.duration for x in sentence.notes], dtype=np.int64)

    if n > 1:
        step = np.diff(pitch)
        leap = np.abs(step)
        dmm = float(np.mean(step > 0))
        cm = float(np.mean(leap == 1))
        aa = float(np.mean(np.isin(leap, ARPEGGIO_INTERVALS)))
    else:
        dmm = aa = cm = 0.0

    _, counts = np.unique(dur, return_counts=True)
    span = max(sentence.notes[-1].offset - sentence.notes[0].onset, 1)
    durf = dur.astype(np.float64)
    return Attributes(
        PM=float(pitch.mean()),
        PV=float(pitch.var()),
        PR=float(pitch.max() - pitch.min()),
        DMM=dmm,
        AA=aa,
        CM=cm,
        DM=float(durf.mean()),
        DV=float(durf.var()),
        DR=float(dur.max() - dur.min()),
        MCD=float(counts.max() / n),
        ND=n / (span / TICKS_PER_BEAT),
        Align=sentence.num_syllables / n,
    )


def song_attributes(song: Song) -> list[Attributes]:
    return [compute_attributes(s) for s in song.sentences]


@dataclass(frozen=True)
class Bins:
    """Thresholds for one attribute: ``k - 1`` edges and ``k`` bin medians."""

    edges: tuple[float, ...]
    representatives: tuple[float, ...]

    @property
    def k(self) -> int:
        return len(self.representatives)

    def classify(self, value: float) -> int:
        # number of edges strictly below the value; ties fall to the lower class
        return int(np.searchsorted(self.edges, value, side="left"))

    def classify_many(self, values) -> np.ndarray:
        return np.searchsorted(np.asarray(self.edges), np.asarray(values, dtype=np.float64), side="left")


def fit_bins(values: Sequence[float], k: int) -> Bins:
    data = np.sort(np.asarray(values, dtype=np.float64))
    n = len(data)
    if n < k:
        raise ValueError(f"too few samples to fit {k} classes: {n}")
    # edge i sits at sorted index ceil(i*n/k) - 1
    idx = [-(-i * n // k) - 1 for i in range(1, k)]
    edges = data[idx]
    classes = np.searchsorted(edges, data, side="left")
    reps = []
    for c in range(k):
        members = data[classes == c]
        if len(members):
            reps.append(float(np.median(members)))
        else:
            reps.append(float(edges[max(c - 1, 0)]))
    return Bins(tuple(float(e) for e in edges), tuple(reps))


@dataclass(frozen=True)
class QuantizerModel:
    k: int
    bins: dict[str, Bins]

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "attributes": [
                {
                    "name": name,
                    "edges": list(self.bins[name].edges),
                    "representatives": list(self.bins[name].representatives),
                }
                for name in ATTRIBUTE_NAMES
            ],
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "QuantizerModel":
        bins = {a["name"]: Bins(tuple(a["edges"]), tuple(a["representatives"])) for a in payload["attributes"]}
        missing = set(ATTRIBUTE_NAMES) - set(bins)
        if missing:
            raise ValueError(f"quantizer lacks attributes {sorted(missing)}")
        return cls(int(payload["k"]), bins)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "QuantizerModel":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def fit_quantizer(corpus: Iterable[Song], k: int = DEFAULT_K) -> QuantizerModel:
    table = np.array([compute_attributes(s) for song in corpus for s in song.sentences], dtype=np.float64)
    if len(table) < k:
        raise ValueError(f"too few sentences to fit {k} classes: {len(table)}")
    return QuantizerModel(k, {name: fit_bins(table[:, i], k) for i, name in enumerate(ATTRIBUTE_NAMES)})


def quantize(values: Attributes | Sequence[float], q: QuantizerModel) -> tuple[int, ...]:
    return tuple(q.bins[name].classify(v) for name, v in zip(ATTRIBUTE_NAMES, values))


def dequantize(classes: Sequence[int], q: QuantizerModel) -> Attributes:
    return Attributes(*(q.bins[name].representatives[c] for name, c in zip(ATTRIBUTE_NAMES, classes)))


def quantile_class(bins: Bins, fraction: float) -> int:
    """Class of the training value at ``fraction`` of the fitted distribution.

    Ties leave some classes without any training sentence; the result is
    always one that training data occupies, because every edge is a training
    value. On tie-free data it is ``round(fraction * k)``.
    """
    m = min(max(int(round(fraction * bins.k)), 0), bins.k - 2)
    return bins.classify(bins.edges[m])


def median_classes(q: QuantizerModel) -> tuple[int, ...]:
    return tuple(quantile_class(q.bins[name], 0.5) for name in ATTRIBUTE_NAMES)


def probe_classes(bins: Bins, count: int = 8) -> list[int]:
    """Distinct occupied classes at the centres of ``count`` equal-mass strata."""
    return sorted({quantile_class(bins, (2 * i + 1) / (2 * count)) for i in range(count)})
