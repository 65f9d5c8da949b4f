"""Lyric encoder, condition assembly and the in-attention melody decoder."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, fields, replace
from typing import Sequence

import torch
from torch import Tensor, nn

from .attributes import ATTRIBUTE_NAMES, NUM_ATTRIBUTES, QuantizerModel, median_classes
from .lyrics import expand_pos_to_syllables
from .neural import TransformerStack, embedding_lookup, init_weights, sinusoidal_positions
from .remi import VOCAB_SIZE
from .score import NUM_EMOTIONS, NUM_KEYS, NUM_POS_TAGS, NUM_STRUCTURES, NUM_TONES, LyricSentence, SongTags

log = logging.getLogger(__name__)

# order of the condition blocks after the lyric block
TAG_BLOCKS = ("key", "emotion", "structure")
NUM_CONTROL_BLOCKS = len(TAG_BLOCKS) + NUM_ATTRIBUTES


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 12
    heads: int = 8
    d: int = 512
    d_ff: int = 2048
    d_l: int = 128
    d_a: int = 32
    k: int = 64
    vocab_size: int = VOCAB_SIZE
    lyric_vocab_size: int = 3
    budget: int = 2048
    lyric_budget: int = 64
    learned_dim: int = 512
    use_musical: bool = True
    use_learned: bool = False
    dropout: float = 0.0

    def __post_init__(self):
        if self.d % self.heads:
            raise ValueError(f"d={self.d} is not divisible by heads={self.heads}")
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, int) and not isinstance(v, bool) and v <= 0:
                raise ValueError(f"{f.name} must be positive, got {v}")

    @property
    def d_c(self) -> int:
        return self.d_l + NUM_CONTROL_BLOCKS * self.d_a + self.d_l

    @classmethod
    def paper(cls, **overrides) -> "ModelConfig":
        return replace(cls(), **overrides)

    @classmethod
    def toy(cls, **overrides) -> "ModelConfig":
        base = cls(layers=2, heads=2, d=64, d_ff=256, d_l=32, d_a=16, budget=512, learned_dim=64)
        return replace(base, **overrides)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(payload) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**payload)


class LyricVocab:
    """Character vocabulary for the sentence encoder."""

    PAD, UNK, SEQ = 0, 1, 2

    def __init__(self, chars: Sequence[str]):
        self.chars = tuple(chars)
        self.index = {c: i + 3 for i, c in enumerate(self.chars)}
        if len(self.index) != len(self.chars):
            raise ValueError("duplicate characters in lyric vocabulary")
        self._warned: set[str] = set()

    @classmethod
    def build(cls, sentences: Sequence[LyricSentence]) -> "LyricVocab":
        return cls(sorted({t for s in sentences for t in s.texts}))

    def __len__(self) -> int:
        return len(self.chars) + 3

    def encode(self, texts: Sequence[str]) -> list[int]:
        ids = [self.index.get(t, self.UNK) for t in texts]
        unknown = {t for t, i in zip(texts, ids) if i == self.UNK} - self._warned
        if unknown:
            self._warned |= unknown
            log.warning("unknown lyric characters mapped to UNK: %s", "".join(sorted(unknown)))
        return [self.SEQ] + ids


class SentenceEncoder(nn.Module):
    """Bidirectional encoder over SEQ + characters; first position projected to ``d_l``."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.embed = nn.Embedding(cfg.lyric_vocab_size, cfg.d)
        self.stack = TransformerStack(cfg.layers, cfg.d, cfg.heads, cfg.d_ff, cfg.dropout)
        self.proj = nn.Linear(cfg.d, cfg.d_l, bias=False)
        self.register_buffer("pe", sinusoidal_positions(cfg.lyric_budget, cfg.d), persistent=False)

    def forward(self, ids: Tensor, pad: Tensor | None = None) -> Tensor:
        if ids.shape[1] > self.pe.shape[0]:
            raise ValueError(f"lyric sentence of {ids.shape[1]} tokens exceeds budget {self.pe.shape[0]}")
        h = embedding_lookup(self.embed.weight, ids) + self.pe[: ids.shape[1]].to(self.embed.weight.dtype)
        h = self.stack(h, causal=False, key_padding=pad)
        return self.proj(h[:, 0])


@dataclass
class ConditionBatch:
    """Per-song condition inputs, padded to the longest song in the batch.

    Sentences are numbered globally across the batch; ``syl_sentence`` maps
    each syllable slot to its global sentence.
    """

    lyric_ids: Tensor  # (N, Lmax) lyric tokens per sentence
    lyric_pad: Tensor  # (N, Lmax) True at padding
    sentence_song: Tensor  # (N,)
    structure: Tensor  # (N,)
    attrs: Tensor  # (N, 12) attribute classes
    learned: Tensor | None  # (N, learned_dim)
    key: Tensor  # (B,)
    emotion: Tensor  # (B,)
    tones: Tensor  # (B, Smax)
    pos: Tensor  # (B, Smax)
    syl_sentence: Tensor  # (B, Smax)
    syl_mask: Tensor  # (B, Smax) True at real syllables


@dataclass(frozen=True)
class SongConditions:
    """Everything that conditions one song, before batching."""

    lyric_ids: tuple[tuple[int, ...], ...]
    structure: tuple[int, ...]
    attrs: tuple[tuple[int, ...], ...]
    key: int
    emotion: int
    tones: tuple[int, ...]
    pos: tuple[int, ...]
    syl_sentence: tuple[int, ...]
    learned: tuple[tuple[float, ...], ...] | None = None

    @property
    def num_syllables(self) -> int:
        return len(self.tones)


def song_conditions(
    lyrics: Sequence[LyricSentence],
    tags: SongTags,
    vocab: LyricVocab,
    attr_classes: Sequence[Sequence[int]] | None = None,
    quantizer: QuantizerModel | None = None,
    learned: Sequence[Sequence[float]] | None = None,
) -> SongConditions:
    """Gather condition inputs; missing attribute classes default to the median class."""
    if attr_classes is None:
        if quantizer is None:
            raise ValueError("attribute classes or a quantizer for median defaults are required")
        attr_classes = [median_classes(quantizer)] * len(lyrics)
    if len(attr_classes) != len(lyrics):
        raise ValueError(f"{len(attr_classes)} attribute rows for {len(lyrics)} sentences")
    if learned is not None and len(learned) != len(lyrics):
        raise ValueError(f"{len(learned)} learned feature rows for {len(lyrics)} sentences")
    tones, pos, syl_sentence = [], [], []
    for si, sent in enumerate(lyrics):
        tones.extend(sent.tones)
        pos.extend(expand_pos_to_syllables(sent.words, len(sent.texts)))
        syl_sentence.extend([si] * len(sent.texts))
    for row in attr_classes:
        if len(row) != NUM_ATTRIBUTES:
            raise ValueError(f"attribute row has {len(row)} classes, expected {NUM_ATTRIBUTES}")
    return SongConditions(
        lyric_ids=tuple(tuple(vocab.encode(s.texts)) for s in lyrics),
        structure=tuple(s.structure for s in lyrics),
        attrs=tuple(tuple(int(c) for c in row) for row in attr_classes),
        key=tags.key,
        emotion=tags.emotion,
        tones=tuple(tones),
        pos=tuple(pos),
        syl_sentence=tuple(syl_sentence),
        learned=None if learned is None else tuple(tuple(float(x) for x in row) for row in learned),
    )


def collate_conditions(songs: Sequence[SongConditions], learned_dim: int | None = None) -> ConditionBatch:
    sentences = [ids for s in songs for ids in s.lyric_ids]
    lmax = max(len(x) for x in sentences)
    lyric_ids = torch.zeros(len(sentences), lmax, dtype=torch.long)
    for i, ids in enumerate(sentences):
        lyric_ids[i, : len(ids)] = torch.tensor(ids)
    smax = max(s.num_syllables for s in songs)
    b = len(songs)
    tones = torch.zeros(b, smax, dtype=torch.long)
    pos = torch.zeros(b, smax, dtype=torch.long)
    syl_sentence = torch.zeros(b, smax, dtype=torch.long)
    syl_mask = torch.zeros(b, smax, dtype=torch.bool)
    sentence_song, offset = [], 0
    for i, s in enumerate(songs):
        n = s.num_syllables
        tones[i, :n] = torch.tensor(s.tones)
        pos[i, :n] = torch.tensor(s.pos)
        syl_sentence[i, :n] = torch.tensor(s.syl_sentence) + offset
        syl_mask[i, :n] = True
        sentence_song.extend([i] * len(s.lyric_ids))
        offset += len(s.lyric_ids)
    learned = None
    if any(s.learned is not None for s in songs):
        if not all(s.learned is not None for s in songs):
            raise ValueError("learned features must be present for every song in a batch or none")
        learned = torch.tensor([row for s in songs for row in s.learned], dtype=torch.float32)
        if learned_dim is not None and learned.shape[1] != learned_dim:
            raise ValueError(f"learned features have width {learned.shape[1]}, model expects {learned_dim}")
    return ConditionBatch(
        lyric_ids=lyric_ids,
        lyric_pad=lyric_ids == LyricVocab.PAD,
        sentence_song=torch.tensor(sentence_song),
        structure=torch.tensor([x for s in songs for x in s.structure]),
        attrs=torch.tensor([row for s in songs for row in s.attrs], dtype=torch.long),
        learned=learned,
        key=torch.tensor([s.key for s in songs]),
        emotion=torch.tensor([s.emotion for s in songs]),
        tones=tones,
        pos=pos,
        syl_sentence=syl_sentence,
        syl_mask=syl_mask,
    )


class ConditionEmbedder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.tone = nn.Embedding(NUM_TONES, cfg.d_l)
        self.pos = nn.Embedding(NUM_POS_TAGS, cfg.d_l)
        self.key = nn.Embedding(NUM_KEYS, cfg.d_a)
        self.emotion = nn.Embedding(NUM_EMOTIONS, cfg.d_a)
        self.structure = nn.Embedding(NUM_STRUCTURES, cfg.d_a)
        self.attrs = nn.ModuleList(nn.Embedding(cfg.k, cfg.d_a) for _ in range(NUM_ATTRIBUTES))
        self.learned = nn.Linear(cfg.learned_dim, cfg.d_l, bias=False)

    def block_offsets(self) -> dict[str, tuple[int, int]]:
        """Column range of each block inside a condition row."""
        names = ("lyric",) + TAG_BLOCKS + ATTRIBUTE_NAMES + ("learned",)
        widths = (self.cfg.d_l,) + (self.cfg.d_a,) * NUM_CONTROL_BLOCKS + (self.cfg.d_l,)
        out, start = {}, 0
        for name, w in zip(names, widths):
            out[name] = (start, start + w)
            start += w
        return out

    def forward(self, batch: ConditionBatch, semantics: Tensor) -> Tensor:
        """Condition matrix of shape (B, Smax, d_c); padded rows are zero."""
        cfg = self.cfg
        sent = batch.syl_sentence
        lyric = self.tone(batch.tones) + self.pos(batch.pos) + semantics[sent]
        b, smax = batch.tones.shape
        if cfg.use_musical:
            blocks = [
                self.key(batch.key)[:, None].expand(b, smax, -1),
                self.emotion(batch.emotion)[:, None].expand(b, smax, -1),
                self.structure(batch.structure)[sent],
            ]
            blocks += [emb(batch.attrs[:, i])[sent] for i, emb in enumerate(self.attrs)]
            musical = torch.cat(blocks, dim=-1)
        else:
            musical = lyric.new_zeros(b, smax, NUM_CONTROL_BLOCKS * cfg.d_a)
        if cfg.use_learned and batch.learned is not None:
            learned = self.learned(batch.learned.to(lyric.dtype))[sent]
        else:
            learned = lyric.new_zeros(b, smax, cfg.d_l)
        cond = torch.cat([lyric, musical, learned], dim=-1)
        return cond * batch.syl_mask[..., None].to(cond.dtype)


class InAttentionDecoder(nn.Module):
    """Causal decoder; the projected condition row of each token's syllable is
    added to the hidden state entering every layer."""

    def __init__(self, cfg: ModelConfig, d_c: int | None = None):
        super().__init__()
        self.embed = nn.Embedding(cfg.vocab_size, cfg.d)
        self.w_in = nn.Linear(cfg.d_c if d_c is None else d_c, cfg.d, bias=False)
        self.stack = TransformerStack(cfg.layers, cfg.d, cfg.heads, cfg.d_ff, cfg.dropout)
        self.head = nn.Linear(cfg.d, cfg.vocab_size)
        self.register_buffer("pe", sinusoidal_positions(cfg.budget, cfg.d), persistent=False)

    def _inputs(self, tokens: Tensor, start: int = 0) -> Tensor:
        t = tokens.shape[1]
        if start + t > self.pe.shape[0]:
            raise ValueError(f"sequence of {start + t} tokens exceeds budget {self.pe.shape[0]}")
        pe = self.pe[start : start + t].to(self.embed.weight.dtype)
        return embedding_lookup(self.embed.weight, tokens) + pe

    def project(self, cond: Tensor) -> Tensor:
        return self.w_in(cond)

    def forward(
        self,
        tokens: Tensor,
        cond: Tensor | None = None,
        syllables: Tensor | None = None,
        pad: Tensor | None = None,
    ) -> Tensor:
        """Next-token logits. ``cond`` is (B, S, d_c); ``syllables`` maps each
        position to its condition row. Without ``cond`` this is a plain decoder."""
        layer_input = None
        if cond is not None:
            if syllables is None:
                raise ValueError("a condition matrix needs a token-to-syllable map")
            if syllables.shape != tokens.shape:
                raise ValueError(f"syllable map {tuple(syllables.shape)} vs tokens {tuple(tokens.shape)}")
            if int(syllables.max()) >= cond.shape[1]:
                raise IndexError(f"token mapped to syllable {int(syllables.max())}, only {cond.shape[1]} rows")
            e = self.project(cond)
            layer_input = torch.gather(e, 1, syllables[..., None].expand(-1, -1, e.shape[-1]))
        h = self.stack(self._inputs(tokens), causal=True, key_padding=pad, layer_input=layer_input)
        return self.head(h)

    def start(self, batch_size: int) -> list[dict]:
        return [{} for _ in self.stack.blocks]

    def step(self, token: Tensor, position: int, caches: list[dict], e_row: Tensor | None) -> Tensor:
        """Logits after feeding one token per sequence; ``e_row`` is (B, d) or None."""
        x = self._inputs(token[:, None], position)
        layer_input = None if e_row is None else e_row[:, None]
        return self.head(self.stack.step(x, caches, layer_input))[:, 0]


class CSLModel(nn.Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.encoder = SentenceEncoder(cfg)
        self.conditions = ConditionEmbedder(cfg)
        self.decoder = InAttentionDecoder(cfg)
        init_weights(self, seed)

    def condition_matrix(self, batch: ConditionBatch) -> Tensor:
        semantics = self.encoder(batch.lyric_ids, batch.lyric_pad)
        return self.conditions(batch, semantics)

    def forward(self, tokens: Tensor, syllables: Tensor, batch: ConditionBatch, pad: Tensor | None = None) -> Tensor:
        return self.decoder(tokens, self.condition_matrix(batch), syllables, pad)
