"""Grouped-codebook VQ-VAE over sentence melodies and learned feature extraction."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Mapping, Sequence

import torch
from torch import Tensor, nn

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .model import InAttentionDecoder, ModelConfig
from .neural import TransformerStack, cross_entropy, embedding_lookup, init_weights, make_adam, sinusoidal_positions
from .remi import PAD, VOCAB, tokenize_sentence, tokenize_song, token_syllable_map
from .score import Song
from .training import TrainConfig, TrainResult, run_training, token_accuracy


@dataclass(frozen=True)
class VQConfig:
    layers: int = 12
    heads: int = 8
    d: int = 512
    d_ff: int = 2048
    groups: int = 64
    codebook_size: int = 2048
    beta: float = 0.25
    dead_after: int = 500
    budget: int = 2048
    sentence_budget: int = 512
    dropout: float = 0.0

    def __post_init__(self):
        if self.d % self.heads:
            raise ValueError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.d % self.groups:
            raise ValueError(f"d={self.d} is not divisible by groups={self.groups}")

    @property
    def group_dim(self) -> int:
        return self.d // self.groups

    @classmethod
    def paper(cls, **overrides) -> "VQConfig":
        return replace(cls(), **overrides)

    @classmethod
    def toy(cls, **overrides) -> "VQConfig":
        base = cls(layers=2, heads=2, d=64, d_ff=256, groups=8, codebook_size=128, budget=512, sentence_budget=256)
        return replace(base, **overrides)

    def decoder_config(self) -> ModelConfig:
        return ModelConfig(
            layers=self.layers, heads=self.heads, d=self.d, d_ff=self.d_ff, budget=self.budget, dropout=self.dropout
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: Mapping) -> "VQConfig":
        unknown = set(payload) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown VQ config keys: {sorted(unknown)}")
        return cls(**payload)


class MelodyEncoder(nn.Module):
    """Bidirectional encoder; the first position's output is the sentence latent."""

    def __init__(self, cfg: VQConfig):
        super().__init__()
        self.embed = nn.Embedding(len(VOCAB), cfg.d)
        self.stack = TransformerStack(cfg.layers, cfg.d, cfg.heads, cfg.d_ff, cfg.dropout)
        self.register_buffer("pe", sinusoidal_positions(cfg.sentence_budget, cfg.d), persistent=False)

    def forward(self, tokens: Tensor) -> Tensor:
        if tokens.shape[1] > self.pe.shape[0]:
            raise ValueError(f"sentence of {tokens.shape[1]} tokens exceeds budget {self.pe.shape[0]}")
        h = embedding_lookup(self.embed.weight, tokens) + self.pe[: tokens.shape[1]].to(self.embed.weight.dtype)
        return self.stack(h, causal=False, key_padding=tokens == PAD)[:, 0]


def nearest_codes(groups: Tensor, codebook: Tensor, chunk: int = 512) -> Tensor:
    """Index of the nearest code (squared Euclidean) for each row; ties go to the lower index."""
    out = []
    for start in range(0, groups.shape[0], chunk):
        part = groups[start : start + chunk]
        dist = ((part[:, None, :] - codebook[None]) ** 2).sum(-1)
        out.append(dist.argmin(-1))
    return torch.cat(out) if out else torch.zeros(0, dtype=torch.long)


@dataclass
class QuantizeOutput:
    quantized: Tensor  # straight-through, same shape as the input
    codes: Tensor  # (N, G)
    codebook_loss: Tensor
    commitment_loss: Tensor


class GroupedQuantizer(nn.Module):
    """Splits a latent into ``groups`` slices, each snapped to one shared codebook."""

    def __init__(self, cfg: VQConfig):
        super().__init__()
        self.groups = cfg.groups
        self.dead_after = cfg.dead_after
        self.codebook = nn.Parameter(torch.zeros(cfg.codebook_size, cfg.group_dim))
        self.register_buffer("initialized", torch.zeros((), dtype=torch.bool))
        self.register_buffer("last_used", torch.zeros(cfg.codebook_size, dtype=torch.long))
        self.register_buffer("usage", torch.zeros(cfg.codebook_size, dtype=torch.long))

    def split(self, z: Tensor) -> Tensor:
        return z.reshape(z.shape[0] * self.groups, -1)

    def codes(self, z: Tensor) -> Tensor:
        with torch.no_grad():
            return nearest_codes(self.split(z), self.codebook).view(z.shape[0], self.groups)

    def lookup(self, codes: Tensor) -> Tensor:
        return self.codebook[codes].reshape(codes.shape[0], -1)

    def initialize(self, z: Tensor, generator: torch.Generator) -> None:
        """Fill the codebook with group vectors drawn uniformly from ``z``."""
        pool = self.split(z.detach())
        pick = torch.randint(0, pool.shape[0], (self.codebook.shape[0],), generator=generator)
        with torch.no_grad():
            self.codebook.copy_(pool[pick])
        self.initialized.fill_(True)

    def forward(self, z: Tensor) -> QuantizeOutput:
        codes = self.codes(z)
        e = self.lookup(codes)
        codebook_loss = ((z.detach() - e) ** 2).mean()
        commitment = ((z - e.detach()) ** 2).mean()
        quantized = z + (e - z).detach()
        return QuantizeOutput(quantized, codes, codebook_loss, commitment)

    def record_usage(self, codes: Tensor, step: int) -> None:
        used = torch.unique(codes)
        self.last_used[used] = step
        self.usage.index_add_(0, codes.flatten(), torch.ones(codes.numel(), dtype=torch.long))

    def reseed_dead(self, z: Tensor, step: int, generator: torch.Generator) -> int:
        dead = torch.nonzero(step - self.last_used >= self.dead_after).flatten()
        if len(dead) == 0:
            return 0
        pool = self.split(z.detach())
        pick = torch.randint(0, pool.shape[0], (len(dead),), generator=generator)
        with torch.no_grad():
            self.codebook[dead] = pool[pick]
        self.last_used[dead] = step
        return len(dead)


@dataclass(frozen=True)
class VQExample:
    song_tokens: tuple[int, ...]
    syllables: tuple[int, ...]
    sentence_tokens: tuple[tuple[int, ...], ...]
    syl_sentence: tuple[int, ...]


def prepare_vq_examples(songs: Sequence[Song], cfg: VQConfig) -> list[VQExample]:
    out = []
    for song in songs:
        tokens = tokenize_song(song)
        if len(tokens) > cfg.budget:
            raise ValueError(f"song {song.id!r}: {len(tokens)} tokens exceed the budget of {cfg.budget}")
        sentences = tuple(tuple(tokenize_sentence(s)) for s in song.sentences)
        syl_sentence = tuple(i for i, s in enumerate(song.sentences) for _ in range(s.num_syllables))
        out.append(VQExample(tuple(tokens), tuple(token_syllable_map(tokens)), sentences, syl_sentence))
    return out


@dataclass
class VQBatch:
    tokens: Tensor  # (B, T)
    syllables: Tensor  # (B, T)
    sentences: Tensor  # (N, Lmax)
    syl_sentence: Tensor  # (B, Smax) global sentence index
    syl_mask: Tensor  # (B, Smax)


def collate_vq(examples: Sequence[VQExample]) -> VQBatch:
    b = len(examples)
    t = max(len(e.song_tokens) for e in examples)
    tokens = torch.full((b, t), PAD, dtype=torch.long)
    syllables = torch.zeros(b, t, dtype=torch.long)
    sents = [s for e in examples for s in e.sentence_tokens]
    sentences = torch.full((len(sents), max(len(s) for s in sents)), PAD, dtype=torch.long)
    for i, s in enumerate(sents):
        sentences[i, : len(s)] = torch.tensor(s)
    smax = max(len(e.syl_sentence) for e in examples)
    syl_sentence = torch.zeros(b, smax, dtype=torch.long)
    syl_mask = torch.zeros(b, smax, dtype=torch.bool)
    offset = 0
    for i, e in enumerate(examples):
        tokens[i, : len(e.song_tokens)] = torch.tensor(e.song_tokens)
        syllables[i, : len(e.syllables)] = torch.tensor(e.syllables)
        syl_sentence[i, : len(e.syl_sentence)] = torch.tensor(e.syl_sentence) + offset
        syl_mask[i, : len(e.syl_sentence)] = True
        offset += len(e.sentence_tokens)
    return VQBatch(tokens, syllables, sentences, syl_sentence, syl_mask)


@dataclass
class VQLoss:
    total: Tensor
    nll: Tensor
    codebook: Tensor
    commitment: Tensor
    logits: Tensor
    codes: Tensor
    latents: Tensor


class VQVAE(nn.Module):
    def __init__(self, cfg: VQConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.encoder = MelodyEncoder(cfg)
        self.quantizer = GroupedQuantizer(cfg)
        self.decoder = InAttentionDecoder(cfg.decoder_config(), d_c=cfg.d)
        init_weights(self, seed)
        self.init_gen = torch.Generator().manual_seed(seed)

    def encode(self, sentences: Tensor) -> Tensor:
        return self.encoder(sentences)

    def decode(self, batch: VQBatch, quantized: Tensor) -> Tensor:
        cond = quantized[batch.syl_sentence] * batch.syl_mask[..., None].to(quantized.dtype)
        return self.decoder(batch.tokens[:, :-1], cond, batch.syllables[:, :-1])

    def forward(self, batch: VQBatch) -> VQLoss:
        z = self.encode(batch.sentences)
        if not bool(self.quantizer.initialized):
            self.quantizer.initialize(z, self.init_gen)
        q = self.quantizer(z)
        logits = self.decode(batch, q.quantized)
        nll = cross_entropy(logits, batch.tokens[:, 1:], PAD)
        total = nll + q.codebook_loss + self.cfg.beta * q.commitment_loss
        return VQLoss(total, nll, q.codebook_loss, q.commitment_loss, logits, q.codes, z)


def straight_through_surrogate(model: VQVAE, batch: VQBatch):
    """Loss closure whose exact gradient is what the straight-through estimator claims.

    Code indices, the quantization offset (e - z) and the stop-gradient
    operands are frozen at the current point, which leaves a smooth function
    that finite differences can check.
    """
    with torch.no_grad():
        z0 = model.encode(batch.sentences)
        codes = model.quantizer.codes(z0)
        e0 = model.quantizer.lookup(codes)
        offset = e0 - z0
    beta = model.cfg.beta

    def loss() -> Tensor:
        z = model.encode(batch.sentences)
        e = model.quantizer.lookup(codes)
        logits = model.decode(batch, z + offset)
        nll = cross_entropy(logits, batch.tokens[:, 1:], PAD)
        return nll + ((z0 - e) ** 2).mean() + beta * ((z - e0) ** 2).mean()

    return loss


@dataclass
class VQTrainer:
    model: VQVAE
    examples: list[VQExample]
    optimizer: torch.optim.Optimizer | None = None
    step: int = 0
    valid: list[VQExample] = field(default_factory=list)

    @classmethod
    def create(cls, songs: Sequence[Song], cfg: VQConfig, seed: int = 0, valid_songs: Sequence[Song] = ()) -> "VQTrainer":
        valid = prepare_vq_examples(valid_songs, cfg) if valid_songs else []
        return cls(VQVAE(cfg, seed), prepare_vq_examples(songs, cfg), valid=valid)

    def valid_loss(self, model: VQVAE, chunk: int = 32) -> float:
        """Per-token reconstruction NLL over the validation songs."""
        total = count = 0
        for start in range(0, len(self.valid), chunk):
            batch = collate_vq(self.valid[start : start + chunk])
            n = int((batch.tokens[:, 1:] != PAD).sum())
            total += float(model(batch).nll) * n
            count += n
        return total / count

    def train(self, cfg: TrainConfig, log_path=None, checkpoint_path=None) -> TrainResult:
        self.optimizer = self.optimizer or make_adam(self.model.parameters())
        reseed_gen = torch.Generator().manual_seed(cfg.seed + 1)
        state = {}

        def loss_fn(model, idx):
            out = model(collate_vq([self.examples[i] for i in idx]))
            state["out"] = out
            return out.total

        def after_step(step):
            out = state["out"]
            self.model.quantizer.record_usage(out.codes, step)
            self.model.quantizer.reseed_dead(out.latents, step, reseed_gen)

        def on_checkpoint(step, opt):
            self.step = step
            self.save(checkpoint_path, cfg)

        result = run_training(
            self.model,
            loss_fn,
            len(self.examples),
            cfg,
            self.optimizer,
            self.step,
            log_path,
            on_checkpoint if checkpoint_path else None,
            after_step,
            validate=self.valid_loss if self.valid else None,
        )
        self.step = result.step
        if checkpoint_path:
            self.save(checkpoint_path, cfg)
        return result

    @torch.no_grad()
    def reconstruction_accuracy(self, songs: Sequence[Song] | None = None) -> float:
        self.model.eval()
        examples = self.examples if songs is None else prepare_vq_examples(songs, self.model.cfg)
        correct = total = 0
        for start in range(0, len(examples), 8):
            batch = collate_vq(examples[start : start + 8])
            out = self.model(batch)
            targets = batch.tokens[:, 1:]
            n = int((targets != PAD).sum())
            correct += token_accuracy(out.logits, targets) * n
            total += n
        return correct / total

    def save(self, path, train_cfg: TrainConfig | None = None) -> str:
        return save_checkpoint(
            path,
            "vqvae",
            config=self.model.cfg.to_dict(),
            train_config=None if train_cfg is None else train_cfg.to_dict(),
            vocab=list(VOCAB.names),
            state_dict=self.model.state_dict(),
            optimizer=None if self.optimizer is None else self.optimizer.state_dict(),
            rng_state=torch.get_rng_state(),
            step=self.step,
        )


def load_vqvae(path) -> tuple[VQVAE, str]:
    body = load_checkpoint(path, "vqvae")
    if list(body["vocab"]) != list(VOCAB.names):
        raise CheckpointError(f"{path}: token vocabulary differs from this build")
    model = VQVAE(VQConfig.from_dict(body["config"]))
    model.load_state_dict(body["state_dict"])
    model.eval()
    return model, body["hash"]


@dataclass(frozen=True)
class SentenceFeature:
    codes: tuple[int, ...]
    vector: tuple[float, ...]


@torch.no_grad()
def extract_features(model: VQVAE, songs: Sequence[Song]) -> dict[str, list[SentenceFeature]]:
    model.eval()
    out = {}
    for song in songs:
        sents = [tokenize_sentence(s) for s in song.sentences]
        batch = torch.full((len(sents), max(map(len, sents))), PAD, dtype=torch.long)
        for i, s in enumerate(sents):
            batch[i, : len(s)] = torch.tensor(s)
        codes = model.quantizer.codes(model.encode(batch))
        vectors = model.quantizer.lookup(codes)
        out[song.id] = [
            SentenceFeature(tuple(c.tolist()), tuple(v.tolist())) for c, v in zip(codes, vectors)
        ]
    return out


def write_features(path, features: Mapping[str, Sequence[SentenceFeature]], checkpoint_hash: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for song_id, rows in features.items():
            record = {
                "song": song_id,
                "checkpoint": checkpoint_hash,
                "sentences": [{"codes": list(r.codes), "vector": list(r.vector)} for r in rows],
            }
            fh.write(json.dumps(record, separators=(",", ":")) + "\n")


def read_features(path, expected_hash: str | None = None) -> dict[str, list[list[float]]]:
    """Per-song lists of sentence vectors."""
    out = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        record = json.loads(line)
        if expected_hash is not None and record["checkpoint"] != expected_hash:
            raise CheckpointError(f"line {n}: features come from checkpoint {record['checkpoint'][:12]}, expected {expected_hash[:12]}")
        out[record["song"]] = [s["vector"] for s in record["sentences"]]
    return out
