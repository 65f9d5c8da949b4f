"""Objective melody metrics and the controllability / ablation harnesses."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numba
import numpy as np
from scipy.stats import spearmanr

from .attributes import ATTRIBUTE_NAMES, NUM_ATTRIBUTES, QuantizerModel, compute_attributes, median_classes, quantize
from .score import MAX_DURATION, LyricSentence, Note, Song, SongTags

log = logging.getLogger(__name__)


def _notes(song: Song | Sequence[Note]) -> list[Note]:
    notes = song.all_notes() if isinstance(song, Song) else list(song)
    if not notes:
        raise ValueError("metric undefined for a song without notes")
    return notes


def _intersection(a: np.ndarray, b: np.ndarray) -> float:
    """100 * sum(min(a/|a|, b/|b|)) for count histograms, in exact integer arithmetic."""
    total_a, total_b = int(a.sum()), int(b.sum())
    overlap = int(np.minimum(a.astype(object) * total_b, b.astype(object) * total_a).sum())
    return 100 * overlap / (total_a * total_b)


def pitch_histogram(song) -> np.ndarray:
    return np.bincount([n.pitch for n in _notes(song)], minlength=128)


def duration_histogram(song) -> np.ndarray:
    durs = [n.duration for n in _notes(song)]
    if max(durs) > MAX_DURATION:
        raise ValueError(f"duration {max(durs)} exceeds {MAX_DURATION}")
    return np.bincount(durs, minlength=MAX_DURATION + 1)[1:]


def pitch_distribution_similarity(generated, reference) -> float:
    return _intersection(pitch_histogram(generated), pitch_histogram(reference))


def duration_distribution_similarity(generated, reference) -> float:
    return _intersection(duration_histogram(generated), duration_histogram(reference))


def _held_pitches(song) -> np.ndarray:
    """Pitch at every tick from the first onset to the last offset, held through rests."""
    notes = sorted(_notes(song), key=lambda n: n.onset)
    start = notes[0].onset
    end = max(n.offset for n in notes)
    series = np.empty(end - start, dtype=np.int64)
    for i, n in enumerate(notes):
        stop = notes[i + 1].onset if i + 1 < len(notes) else end
        series[n.onset - start : stop - start] = n.pitch
    return series


def pitch_series(song) -> np.ndarray:
    """Held per-tick pitch series minus its own mean."""
    series = _held_pitches(song)
    return series - int(series.sum()) / len(series)


@numba.njit(cache=True)
def _dtw(a, b):
    n, m = len(a), len(b)
    inf = np.inf
    prev_c = np.full(m + 1, inf)
    prev_l = np.zeros(m + 1, dtype=np.int64)
    cur_c = np.full(m + 1, inf)
    cur_l = np.zeros(m + 1, dtype=np.int64)
    prev_c[0] = 0.0
    for i in range(1, n + 1):
        cur_c[0] = inf
        cur_l[0] = 0
        for j in range(1, m + 1):
            # candidates in order: diagonal, from above, from the left
            bc, bl = prev_c[j - 1], prev_l[j - 1]
            c, l = prev_c[j], prev_l[j]
            if c < bc or (c == bc and l < bl):
                bc, bl = c, l
            c, l = cur_c[j - 1], cur_l[j - 1]
            if c < bc or (c == bc and l < bl):
                bc, bl = c, l
            cur_c[j] = abs(a[i - 1] - b[j - 1]) + bc
            cur_l[j] = bl + 1
        prev_c, cur_c = cur_c, prev_c
        prev_l, cur_l = cur_l, prev_l
    return prev_c[m], prev_l[m]


@numba.njit(cache=True)
def _dtw_int(a, b):
    """Integer twin of ``_dtw``; the sentinel stands in for infinity."""
    n, m = len(a), len(b)
    big = np.int64(1) << 62
    prev_c = np.full(m + 1, big)
    prev_l = np.zeros(m + 1, dtype=np.int64)
    cur_c = np.full(m + 1, big)
    cur_l = np.zeros(m + 1, dtype=np.int64)
    prev_c[0] = 0
    for i in range(1, n + 1):
        cur_c[0] = big
        cur_l[0] = 0
        for j in range(1, m + 1):
            bc, bl = prev_c[j - 1], prev_l[j - 1]
            c, l = prev_c[j], prev_l[j]
            if c < bc or (c == bc and l < bl):
                bc, bl = c, l
            c, l = cur_c[j - 1], cur_l[j - 1]
            if c < bc or (c == bc and l < bl):
                bc, bl = c, l
            cur_c[j] = abs(a[i - 1] - b[j - 1]) + bc
            cur_l[j] = bl + 1
        prev_c, cur_c = cur_c, prev_c
        prev_l, cur_l = cur_l, prev_l
    return prev_c[m], prev_l[m]


def dtw_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Minimal absolute-difference alignment cost over its path length.

    Among equal-cost paths the shortest is used.
    """
    cost, length = _dtw(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64))
    return float(cost) / int(length)


def melody_distance(generated, reference) -> float:
    """DTW distance of the mean-centred per-tick pitch series.

    Both series are scaled by n*m so every local cost is an integer; the
    alignment is then exact and the single final division is correctly
    rounded, which makes the value exactly transposition invariant.
    """
    p, q = _held_pitches(generated), _held_pitches(reference)
    n, m = len(p), len(q)
    if 254 * n * m * (n + m) >= 1 << 62:
        log.warning("series of %d and %d ticks exceed exact range; using floating point", n, m)
        return dtw_distance(pitch_series(generated), pitch_series(reference))
    a = m * (n * p - int(p.sum()))
    b = n * (m * q - int(q.sum()))
    cost, length = _dtw_int(a, b)
    return int(cost) / (n * m * int(length))


def spearman_rho(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Rank correlation with average ranks for ties; NaN when either side is constant."""
    if len(xs) != len(ys):
        raise ValueError(f"length mismatch: {len(xs)} vs {len(ys)}")
    if len(xs) < 2:
        raise ValueError("spearman_rho needs at least two pairs")
    x, y = np.asarray(xs, dtype=np.float64), np.asarray(ys, dtype=np.float64)
    if np.all(x == x[0]) or np.all(y == y[0]):
        return math.nan
    return float(spearmanr(x, y).statistic)


# ---------------------------------------------------------------------------
# harnesses


@dataclass(frozen=True)
class CompositionRequest:
    lyrics: tuple[LyricSentence, ...]
    tags: SongTags
    attr_classes: tuple[tuple[int, ...], ...]
    learned: tuple[tuple[float, ...], ...] | None = None


Composer = Callable[[Sequence[CompositionRequest]], Sequence[Song | None]]


@dataclass
class SweepResult:
    swept: str
    rho: dict[str, float]
    pairs: int
    failures: int
    specified: list[int] = field(default_factory=list)
    measured: list[tuple[int, ...]] = field(default_factory=list)


def controllability_sweep(
    compose: Composer,
    prompts: Sequence[tuple[Sequence[LyricSentence], SongTags]],
    quantizer: QuantizerModel,
    swept: str,
    classes: Sequence[int],
    fixed: Sequence[int] | None = None,
) -> SweepResult:
    """Specify ``classes`` for one attribute, regenerate, and correlate the
    specified class with every re-measured attribute class."""
    if swept not in ATTRIBUTE_NAMES:
        raise ValueError(f"unknown attribute {swept!r}")
    col = ATTRIBUTE_NAMES.index(swept)
    fixed = tuple(fixed) if fixed is not None else median_classes(quantizer)
    requests, spec = [], []
    for c in classes:
        row = fixed[:col] + (int(c),) + fixed[col + 1 :]
        for lyrics, tags in prompts:
            requests.append(CompositionRequest(tuple(lyrics), tags, (row,) * len(lyrics)))
            spec.append(int(c))
    songs = compose(requests)
    specified, measured, failures = [], [], 0
    for c, song in zip(spec, songs):
        if song is None:
            failures += 1
            continue
        for sent in song.sentences:
            specified.append(c)
            measured.append(quantize(compute_attributes(sent), quantizer))
    if failures:
        log.warning("%d of %d generations failed and were excluded", failures, len(requests))
    table = np.array(measured).reshape(-1, NUM_ATTRIBUTES)
    rho = {}
    for j, name in enumerate(ATTRIBUTE_NAMES):
        rho[name] = spearman_rho(specified, table[:, j]) if len(specified) >= 2 else math.nan
    return SweepResult(swept, rho, len(specified), failures, specified, measured)


@dataclass
class ControllabilityMatrix:
    rows: dict[str, SweepResult]

    def values(self) -> np.ndarray:
        return np.array([[r.rho[c] for c in ATTRIBUTE_NAMES] for r in self.rows.values()])

    def diagonal(self) -> dict[str, float]:
        return {name: r.rho[name] for name, r in self.rows.items()}

    def to_text(self) -> str:
        head = "swept  " + " ".join(f"{c:>6}" for c in ATTRIBUTE_NAMES)
        lines = [head]
        for name, r in self.rows.items():
            lines.append(f"{name:<6} " + " ".join(f"{r.rho[c]:6.2f}" for c in ATTRIBUTE_NAMES))
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["swept", *ATTRIBUTE_NAMES])
        for name, r in self.rows.items():
            writer.writerow([name, *(f"{r.rho[c]:.6f}" for c in ATTRIBUTE_NAMES)])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps(
            {name: {"rho": r.rho, "pairs": r.pairs, "failures": r.failures} for name, r in self.rows.items()},
            indent=1,
        )


@dataclass
class MetricReport:
    pd: float
    dd: float
    md: float
    per_song: list[dict] = field(default_factory=list)
    failures: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate_pairs(pairs: Sequence[tuple[Song | None, Song]]) -> MetricReport:
    """Mean PD/DD/MD over (generated, reference) pairs; failed generations are counted and skipped."""
    rows, failures = [], 0
    for gen, ref in pairs:
        if gen is None:
            failures += 1
            continue
        rows.append(
            {
                "song": ref.id,
                "pd": pitch_distribution_similarity(gen, ref),
                "dd": duration_distribution_similarity(gen, ref),
                "md": melody_distance(gen, ref),
            }
        )
    if not rows:
        raise ValueError("no successful generations to evaluate")
    mean = {k: float(np.mean([r[k] for r in rows])) for k in ("pd", "dd", "md")}
    return MetricReport(mean["pd"], mean["dd"], mean["md"], rows, failures)


def ablation_harness(
    composers: Mapping[str, Composer],
    references: Sequence[Song],
    requests: Mapping[str, Sequence[CompositionRequest]],
) -> dict[str, MetricReport]:
    """Run each configuration's composer on its requests (one per reference song)."""
    out = {}
    for name, compose in composers.items():
        if name not in requests:
            raise KeyError(f"no requests for configuration {name!r}")
        songs = compose(requests[name])
        out[name] = evaluate_pairs(list(zip(songs, references)))
    return out


def format_table(reports: Mapping[str, MetricReport]) -> str:
    width = max(len("config"), *(len(k) for k in reports))
    lines = [f"{'config':<{width}}  {'PD%':>7}  {'DD%':>7}  {'MD':>7}"]
    for name, r in reports.items():
        lines.append(f"{name:<{width}}  {r.pd:7.2f}  {r.dd:7.2f}  {r.md:7.3f}")
    return "\n".join(lines)
