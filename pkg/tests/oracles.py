"""Deliberately naive reference implementations used as test oracles.

Nothing here imports the code under test.
"""

from __future__ import annotations

import math
from fractions import Fraction
import struct

import numpy as np


def naive_attributes(notes, num_syllables):
    """notes: list of (onset, duration, pitch). Returns the 12 values as a dict."""
    n = len(notes)
    pitches = [p for _, _, p in notes]
    durs = [d for _, d, _ in notes]

    def mean(xs):
        return sum(xs) / len(xs)

    def pvar(xs):
        m = mean(xs)
        return sum((x - m) ** 2 for x in xs) / len(xs)

    pairs = list(zip(pitches[:-1], pitches[1:]))
    up = chromatic = arpeggio = 0
    for a, b in pairs:
        if b > a:
            up += 1
        if abs(b - a) == 1:
            chromatic += 1
        if abs(b - a) in (0, 3, 4, 7, 10, 11, 12, 15, 16):
            arpeggio += 1
    frac = (lambda c: c / len(pairs)) if pairs else (lambda c: 0.0)

    best = 0
    for d in set(durs):
        best = max(best, durs.count(d))
    last_off = notes[-1][0] + notes[-1][1]
    span_ticks = max(last_off - notes[0][0], 1)
    return {
        "PM": mean(pitches),
        "PV": pvar(pitches),
        "PR": max(pitches) - min(pitches),
        "DMM": frac(up),
        "AA": frac(arpeggio),
        "CM": frac(chromatic),
        "DM": mean(durs),
        "DV": pvar(durs),
        "DR": max(durs) - min(durs),
        "MCD": best / n,
        "ND": n * 16 / span_ticks,
        "Align": num_syllables / n,
    }


def naive_dtw(a, b):
    """Quadratic DP; minimal cost, ties broken toward the shorter path. Returns cost / length."""
    inf = float("inf")
    n, m = len(a), len(b)
    cost = [[inf] * (m + 1) for _ in range(n + 1)]
    length = [[0] * (m + 1) for _ in range(n + 1)]
    cost[0][0] = 0
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            best = None
            for pi, pj in ((i - 1, j - 1), (i - 1, j), (i, j - 1)):
                cand = (cost[pi][pj], length[pi][pj])
                if cand[0] == inf:
                    continue
                if best is None or cand < best:
                    best = cand
            cost[i][j] = abs(a[i - 1] - b[j - 1]) + best[0]
            length[i][j] = best[1] + 1
    return cost[n][m] / length[n][m]


def tick_series(notes, exact=False):
    """Per-tick pitch, holding the last pitch through rests, mean-centred.

    With ``exact`` the values are Fractions.
    """
    start = notes[0][0]
    end = max(o + d for o, d, _ in notes)
    out = []
    for t in range(start, end):
        current = None
        for o, d, p in notes:
            if o <= t:
                current = p
        out.append(current)
    avg = Fraction(sum(out), len(out)) if exact else sum(out) / len(out)
    return [x - avg for x in out]


def hand_ranks(xs):
    order = sorted(range(len(xs)), key=lambda i: xs[i])
    ranks = [0.0] * len(xs)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and xs[order[j + 1]] == xs[order[i]]:
            j += 1
        avg = (i + j) / 2 + 1
        for k in range(i, j + 1):
            ranks[order[k]] = avg
        i = j + 1
    return ranks


def hand_spearman(xs, ys):
    rx, ry = hand_ranks(xs), hand_ranks(ys)
    mx, my = sum(rx) / len(rx), sum(ry) / len(ry)
    num = sum((a - mx) * (b - my) for a, b in zip(rx, ry))
    den = math.sqrt(sum((a - mx) ** 2 for a in rx) * sum((b - my) ** 2 for b in ry))
    return num / den


def nearest_code(group, codebook):
    best, best_d = -1, float("inf")
    for c, code in enumerate(codebook):
        d = 0.0
        for x, y in zip(group, code):
            d += (x - y) * (x - y)
        if d < best_d:
            best, best_d = c, d
    return best


# ---------------------------------------------------------------------------
# minimal standard MIDI file reader


def _varlen(data, i):
    value = 0
    while True:
        byte = data[i]
        i += 1
        value = (value << 7) | (byte & 0x7F)
        if not byte & 0x80:
            return value, i


def read_smf(path):
    """Returns (format, division, tracks) with tracks as lists of (abs_tick, kind, payload)."""
    data = open(path, "rb").read()
    assert data[:4] == b"MThd"
    hlen, fmt, ntracks, division = struct.unpack(">IHHH", data[4:14])
    i = 8 + hlen
    tracks = []
    for _ in range(ntracks):
        assert data[i : i + 4] == b"MTrk"
        (tlen,) = struct.unpack(">I", data[i + 4 : i + 8])
        j, end = i + 8, i + 8 + tlen
        tick, status, events = 0, 0, []
        while j < end:
            delta, j = _varlen(data, j)
            tick += delta
            if data[j] & 0x80:
                status = data[j]
                j += 1
            if status == 0xFF:
                mtype = data[j]
                mlen, j = _varlen(data, j + 1)
                events.append((tick, "meta", (mtype, bytes(data[j : j + mlen]))))
                j += mlen
            elif status in (0xF0, 0xF7):
                slen, j = _varlen(data, j)
                j += slen
            else:
                kind = status & 0xF0
                if kind in (0xC0, 0xD0):
                    args = (data[j],)
                    j += 1
                else:
                    args = (data[j], data[j + 1])
                    j += 2
                events.append((tick, kind, args))
        tracks.append(events)
        i = end
    return fmt, division, tracks


def smf_notes(path):
    """(onset, duration, pitch) in file ticks, pairing note-ons with the next off."""
    fmt, division, tracks = read_smf(path)
    notes, open_notes = [], {}
    for events in tracks:
        for tick, kind, args in events:
            if kind == 0x90 and args[1] > 0:
                open_notes[args[0]] = tick
            elif kind == 0x80 or (kind == 0x90 and args[1] == 0):
                start = open_notes.pop(args[0])
                notes.append((start, tick - start, args[0]))
    notes.sort()
    return fmt, division, notes


def brute_force_codes(latents, codebook, groups):
    """Exhaustive nearest code per group with numpy float64 arithmetic."""
    lat = np.asarray(latents, dtype=np.float64)
    book = np.asarray(codebook, dtype=np.float64)
    parts = lat.reshape(lat.shape[0] * groups, -1)
    out = np.empty(parts.shape[0], dtype=np.int64)
    for start in range(0, parts.shape[0], 256):
        chunk = parts[start : start + 256]
        dist = np.zeros((chunk.shape[0], book.shape[0]))
        for j in range(book.shape[1]):
            dist += (chunk[:, j : j + 1] - book[None, :, j]) ** 2
        out[start : start + 256] = dist.argmin(1)
    return out.reshape(lat.shape[0], groups)
