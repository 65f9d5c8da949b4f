"""Nucleus sampling and grammar-constrained batched melody generation."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import Tensor

from .attributes import ATTRIBUTE_NAMES, NUM_ATTRIBUTES, QuantizerModel, median_classes
from .metrics import CompositionRequest
from .model import CSLModel, LyricVocab, SongConditions, collate_conditions, song_conditions
from .remi import EOS, SEQ, SYL, BudgetExhaustedError, GrammarState, detokenize_song
from .score import LyricSentence, Song, SongTags, WordSpan


@dataclass(frozen=True)
class Sampling:
    temperature: float = 1.2
    top_p: float = 0.9
    seed: int = 0
    grammar_mask: bool = True


def nucleus_probs(logits: Tensor, temperature: float, top_p: float, mask: Tensor | None = None) -> Tensor:
    """Row-wise sampling distribution after temperature, masking and top-p truncation.

    Tokens are kept in descending-probability order until the mass of the
    tokens before them reaches ``top_p``; ``top_p >= 1`` keeps every token.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive; use greedy decoding for the zero limit")
    scaled = logits.double() / temperature
    if mask is not None:
        scaled = scaled.masked_fill(~mask, float("-inf"))
    probs = torch.softmax(scaled, dim=-1)
    if top_p >= 1:
        return probs
    sorted_p, order = probs.sort(dim=-1, descending=True, stable=True)
    before = sorted_p.cumsum(-1) - sorted_p
    keep_sorted = before < top_p
    keep = torch.zeros_like(keep_sorted).scatter(-1, order, keep_sorted)
    kept = probs * keep
    return kept / kept.sum(-1, keepdim=True)


def nucleus_sample(
    logits: Tensor,
    temperature: float,
    top_p: float,
    generator: torch.Generator,
    mask: Tensor | None = None,
) -> Tensor:
    """One token per row; ``temperature == 0`` is greedy."""
    if temperature == 0:
        if mask is not None:
            logits = logits.masked_fill(~mask, float("-inf"))
        return logits.argmax(-1)
    probs = nucleus_probs(logits, temperature, top_p, mask)
    return torch.multinomial(probs, 1, generator=generator)[:, 0]


def nucleus_set(probs: Tensor, top_p: float) -> Tensor:
    """Boolean mask of the minimal descending-probability prefix whose mass reaches ``top_p``."""
    return nucleus_probs(torch.log(probs), 1.0, top_p) > 0


@dataclass
class GenerationResult:
    tokens: list[int]
    song: Song | None
    error: Exception | None

    @property
    def ok(self) -> bool:
        return self.error is None


@torch.no_grad()
def generate_batch(
    model: CSLModel,
    conditions: Sequence[SongConditions],
    lyrics: Sequence[Sequence[LyricSentence]],
    tags: Sequence[SongTags],
    sampling: Sampling = Sampling(),
    budget: int | None = None,
) -> list[GenerationResult]:
    """Sample one melody per request, all sequences advancing in lock step."""
    model.eval()
    budget = model.cfg.budget if budget is None else min(budget, model.cfg.budget)
    b = len(conditions)
    counts = [tuple(len(s.texts) for s in song) for song in lyrics]
    batch = collate_conditions(conditions, model.cfg.learned_dim)
    rows = model.decoder.project(model.condition_matrix(batch))  # (B, S, d)
    last_row = torch.tensor([c.num_syllables - 1 for c in conditions])

    gen = torch.Generator().manual_seed(sampling.seed)
    states = [GrammarState(c, budget) for c in counts]
    if sampling.grammar_mask:
        for st in states:
            need = st.min_remaining()
            if need > budget:
                raise BudgetExhaustedError([], f"a budget of {budget} tokens cannot hold this lyric; at least {need} are needed")
            st.push(SEQ)
    streams = [[SEQ] for _ in range(b)]
    syl_seen = torch.zeros(b, dtype=torch.long)
    done = np.zeros(b, dtype=bool)
    current = torch.full((b,), SEQ, dtype=torch.long)
    caches = model.decoder.start(b)

    for position in range(budget - 1):
        syl_row = torch.minimum((syl_seen - 1).clamp(min=0), last_row)
        logits = model.decoder.step(current, position, caches, rows[torch.arange(b), syl_row])
        mask = None
        if sampling.grammar_mask:
            mask_np = np.zeros(logits.shape, dtype=bool)
            for i in range(b):
                if done[i]:
                    mask_np[i, EOS] = True
                else:
                    mask_np[i] = states[i].legal_mask()
            mask = torch.from_numpy(mask_np)
        nxt = nucleus_sample(logits, sampling.temperature, sampling.top_p, gen, mask)
        for i in np.flatnonzero(~done):
            tok = int(nxt[i])
            streams[i].append(tok)
            if sampling.grammar_mask:
                states[i].push(tok)
            if tok == SYL:
                syl_seen[i] += 1
            if tok == EOS:
                done[i] = True
        current = nxt
        if done.all():
            break

    results = []
    for i in range(b):
        tokens = streams[i]
        if not done[i]:
            err: Exception = BudgetExhaustedError(
                tokens,
                f"budget of {budget} tokens exhausted after {int(syl_seen[i])} of {sum(counts[i])} syllables",
            )
            results.append(GenerationResult(tokens, None, err))
            continue
        try:
            song = detokenize_song(tokens, lyrics[i], tags[i])
        except ValueError as exc:
            results.append(GenerationResult(tokens, None, exc))
        else:
            results.append(GenerationResult(tokens, song, None))
    return results


# ---------------------------------------------------------------------------
# request files


@dataclass(frozen=True)
class GenerationRequest:
    lyrics: tuple[LyricSentence, ...]
    tags: SongTags
    attr_classes: tuple[tuple[int, ...], ...] | None  # None means median classes
    sampling: Sampling
    learned_file: str | None = None


def _attr_row(value, default: tuple[int, ...], k: int) -> tuple[int, ...]:
    if value == "auto":
        return default
    if isinstance(value, dict):
        unknown = set(value) - set(ATTRIBUTE_NAMES)
        if unknown:
            raise ValueError(f"unknown attributes {sorted(unknown)}")
        row = tuple(value.get(name, "auto") for name in ATTRIBUTE_NAMES)
        row = tuple(d if v == "auto" else v for v, d in zip(row, default))
    else:
        row = tuple(value)
    if len(row) != NUM_ATTRIBUTES or not all(isinstance(c, int) and 0 <= c < k for c in row):
        raise ValueError(f"attribute classes must be {NUM_ATTRIBUTES} integers in 0..{k - 1}, got {value!r}")
    return row


def load_request(path: str | Path, quantizer: QuantizerModel) -> GenerationRequest:
    """Parse a JSON generation request.

    ``attributes`` is "auto", or one entry per sentence that is "auto", a list
    of 12 classes, or a mapping from attribute name to class. "auto" stands
    for the median class of each attribute.
    """
    k = quantizer.k
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    try:
        sentences = []
        for s in raw["sentences"]:
            words = tuple(WordSpan(int(w["start"]), int(w["end"]), int(w["pos"])) for w in s["words"])
            sentences.append(LyricSentence(tuple(s["syllables"]), tuple(int(t) for t in s["tones"]), words, int(s.get("structure", 0))))
        tags = SongTags(
            id=str(raw.get("id", "generated")),
            key=int(raw.get("key", 0)),
            emotion=int(raw.get("emotion", 0)),
            bpm=raw.get("bpm", 120),
        )
        default = median_classes(quantizer)
        attrs = raw.get("attributes", "auto")
        if attrs == "auto":
            rows = None
        else:
            if len(attrs) != len(sentences):
                raise ValueError(f"{len(attrs)} attribute entries for {len(sentences)} sentences")
            rows = tuple(_attr_row(a, default, k) for a in attrs)
        samp = raw.get("sampling", {})
        sampling = Sampling(
            temperature=float(samp.get("temperature", 1.2)),
            top_p=float(samp.get("top_p", 0.9)),
            seed=int(samp.get("seed", raw.get("seed", 0))),
            grammar_mask=bool(samp.get("grammar_mask", True)),
        )
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed generation request: {exc!r}") from exc
    for s in sentences:
        if len(s.tones) != len(s.texts):
            raise ValueError("each sentence needs one tone per syllable")
    return GenerationRequest(tuple(sentences), tags, rows, sampling, raw.get("learned_features"))


def generate_song(
    model: CSLModel,
    vocab: LyricVocab,
    lyrics: Sequence[LyricSentence],
    tags: SongTags,
    attr_classes: Sequence[Sequence[int]] | None = None,
    learned: Sequence[Sequence[float]] | None = None,
    sampling: Sampling = Sampling(),
    quantizer: QuantizerModel | None = None,
) -> Song:
    """Generate one song, raising the failure if there is one.

    Without ``attr_classes`` every sentence gets the median classes of ``quantizer``.
    """
    cond = song_conditions(lyrics, tags, vocab, attr_classes, quantizer=quantizer, learned=learned)
    result = generate_batch(model, [cond], [lyrics], [tags], sampling)[0]
    if result.error is not None:
        raise result.error
    return result.song



def model_composer(
    model: CSLModel,
    vocab: LyricVocab,
    sampling: Sampling = Sampling(),
    batch_size: int = 32,
):
    """Adapt a trained model to the harness interface: requests in, songs (or None) out.

    Every batch uses a seed derived from ``sampling.seed`` and its position, so
    results do not depend on how many requests came before in other calls.
    """
    def compose(requests: Sequence[CompositionRequest]) -> list[Song | None]:
        out: list[Song | None] = []
        for start in range(0, len(requests), batch_size):
            chunk = requests[start : start + batch_size]
            conds = [song_conditions(r.lyrics, r.tags, vocab, r.attr_classes, learned=r.learned) for r in chunk]
            samp = Sampling(sampling.temperature, sampling.top_p, sampling.seed + start, sampling.grammar_mask)
            results = generate_batch(model, conds, [r.lyrics for r in chunk], [r.tags for r in chunk], samp)
            out.extend(r.song for r in results)
        return out

    return compose
