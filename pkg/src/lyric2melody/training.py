"""Teacher-forced training of the conditioned decoder and its encoder."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import torch
from torch import Tensor

from .attributes import QuantizerModel, compute_attributes, quantize
from .checkpoint import load_checkpoint, save_checkpoint
from .model import CSLModel, ConditionBatch, LyricVocab, ModelConfig, SongConditions, collate_conditions, song_conditions
from .neural import Schedule, adam_step, cross_entropy, lr_schedule, make_adam
from .remi import PAD, VOCAB, tokenize_song, token_syllable_map
from .score import Song, lyrics_of, tags_of

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 3000
    batch_size: int = 4
    seed: int = 0
    schedule: Schedule = field(default_factory=Schedule)
    grad_clip: float | None = None
    log_every: int = 100
    checkpoint_every: int = 0
    eval_every: int = 0  # validate every N steps and keep the best weights; 0 disables

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: Mapping) -> "TrainConfig":
        payload = dict(payload)
        sched = payload.pop("schedule", {})
        return cls(schedule=Schedule(**sched), **payload)


@dataclass(frozen=True)
class Example:
    tokens: tuple[int, ...]
    syllables: tuple[int, ...]
    conditions: SongConditions


@dataclass
class Batch:
    tokens: Tensor
    syllables: Tensor
    conditions: ConditionBatch


def song_attribute_classes(song: Song, quantizer: QuantizerModel) -> list[tuple[int, ...]]:
    return [quantize(compute_attributes(s), quantizer) for s in song.sentences]


def prepare_examples(
    songs: Sequence[Song],
    vocab: LyricVocab,
    quantizer: QuantizerModel,
    budget: int,
    learned: Mapping[str, Sequence[Sequence[float]]] | None = None,
) -> list[Example]:
    out = []
    for song in songs:
        tokens = tokenize_song(song)
        if len(tokens) > budget:
            raise ValueError(f"song {song.id!r}: {len(tokens)} tokens exceed the budget of {budget}")
        rows = None
        if learned is not None:
            if song.id not in learned:
                raise KeyError(f"no learned features for song {song.id!r}")
            rows = learned[song.id]
        cond = song_conditions(lyrics_of(song), tags_of(song), vocab, song_attribute_classes(song, quantizer), learned=rows)
        out.append(Example(tuple(tokens), tuple(token_syllable_map(tokens)), cond))
    return out


def collate(examples: Sequence[Example], learned_dim: int | None = None) -> Batch:
    t = max(len(e.tokens) for e in examples)
    tokens = torch.full((len(examples), t), PAD, dtype=torch.long)
    syllables = torch.zeros(len(examples), t, dtype=torch.long)
    for i, e in enumerate(examples):
        tokens[i, : len(e.tokens)] = torch.tensor(e.tokens)
        syllables[i, : len(e.syllables)] = torch.tensor(e.syllables)
    return Batch(tokens, syllables, collate_conditions([e.conditions for e in examples], learned_dim))


def batch_logits(model: CSLModel, batch: Batch) -> Tensor:
    # right padding never reaches real positions under the causal mask
    return model(batch.tokens[:, :-1], batch.syllables[:, :-1], batch.conditions)


def batch_loss(model: CSLModel, batch: Batch) -> Tensor:
    return cross_entropy(batch_logits(model, batch), batch.tokens[:, 1:], PAD)


def token_accuracy(logits: Tensor, targets: Tensor) -> float:
    keep = targets != PAD
    return float((logits.argmax(-1)[keep] == targets[keep]).double().mean())


class BatchSampler:
    """Reshuffled epochs from a seeded generator."""

    def __init__(self, n: int, batch_size: int, seed: int):
        self.n, self.batch_size = n, min(batch_size, n)
        self.gen = torch.Generator().manual_seed(seed)
        self.order: list[int] = []

    def __call__(self) -> list[int]:
        if len(self.order) < self.batch_size:
            self.order = torch.randperm(self.n, generator=self.gen).tolist()
        out, self.order = self.order[: self.batch_size], self.order[self.batch_size :]
        return out


@dataclass
class TrainResult:
    losses: list[float]
    step: int
    valid_losses: list[tuple[int, float]] = field(default_factory=list)
    best_step: int | None = None


def run_training(
    model: torch.nn.Module,
    loss_fn: Callable[[torch.nn.Module, Sequence[int]], Tensor],
    n_examples: int,
    cfg: TrainConfig,
    optimizer: torch.optim.Optimizer | None = None,
    start_step: int = 0,
    log_path: str | Path | None = None,
    on_checkpoint: Callable[[int, torch.optim.Optimizer], None] | None = None,
    after_step: Callable[[int], None] | None = None,
    validate: Callable[[torch.nn.Module], float] | None = None,
) -> TrainResult:
    """Generic loop: ``loss_fn(model, indices)`` gives the loss of one batch.

    With ``validate`` and ``cfg.eval_every``, the held-out loss is measured
    every ``eval_every`` steps and the weights with the lowest one are
    restored at the end.
    """
    torch.set_num_threads(1)
    torch.manual_seed(cfg.seed)
    sampler = BatchSampler(n_examples, cfg.batch_size, cfg.seed)
    optimizer = optimizer or make_adam(model.parameters())
    model.train()
    losses, valid = [], []
    best: tuple[float, int, dict] | None = None
    log_file = open(log_path, "a" if start_step else "w", encoding="utf-8") if log_path else None
    try:
        for step in range(start_step + 1, start_step + cfg.steps + 1):
            idx = sampler()
            lr = lr_schedule(step, cfg.schedule)
            optimizer.zero_grad(set_to_none=True)
            loss = loss_fn(model, idx)
            value = loss.item()
            if not math.isfinite(value):
                recent = ", ".join(f"{x:.4f}" for x in losses[-5:])
                raise TrainingDiverged(f"loss is {value} at step {step} (lr {lr:.3g}, batch {idx}, recent [{recent}])")
            loss.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            adam_step(optimizer, lr)
            if after_step is not None:
                after_step(step)
            losses.append(value)
            if log_file:
                log_file.write(json.dumps({"step": step, "loss": value, "lr": lr}) + "\n")
            if cfg.log_every and step % cfg.log_every == 0:
                log.info("step %d loss %.4f lr %.3g", step, value, lr)
            if validate is not None and cfg.eval_every and step % cfg.eval_every == 0:
                model.eval()
                with torch.no_grad():
                    held_out = float(validate(model))
                model.train()
                valid.append((step, held_out))
                log.info("step %d valid %.4f", step, held_out)
                if log_file:
                    log_file.write(json.dumps({"step": step, "valid": held_out}) + "\n")
                if best is None or held_out < best[0]:
                    best = (held_out, step, {k: v.detach().clone() for k, v in model.state_dict().items()})
            if on_checkpoint and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                on_checkpoint(step, optimizer)
    finally:
        if log_file:
            log_file.close()
    if best is not None:
        model.load_state_dict(best[2])
        log.info("restored weights from step %d (valid %.4f)", best[1], best[0])
    return TrainResult(losses, start_step + cfg.steps, valid, None if best is None else best[1])


@dataclass
class CSLTrainer:
    """Bundles a model with the data-dependent pieces a checkpoint needs."""

    model: CSLModel
    vocab: LyricVocab
    quantizer: QuantizerModel
    examples: list[Example]
    optimizer: torch.optim.Optimizer | None = None
    step: int = 0
    valid: list[Example] = field(default_factory=list)

    @classmethod
    def create(
        cls,
        songs: Sequence[Song],
        quantizer: QuantizerModel,
        cfg: ModelConfig,
        seed: int = 0,
        learned: Mapping[str, Sequence[Sequence[float]]] | None = None,
        valid_songs: Sequence[Song] = (),
    ) -> "CSLTrainer":
        vocab = LyricVocab.build([s for song in songs for s in lyrics_of(song)])
        cfg = replace(cfg, lyric_vocab_size=len(vocab), k=quantizer.k)
        if cfg.use_learned and learned is None:
            raise ValueError("use_learned needs learned features for the training songs")
        feats = learned if cfg.use_learned else None
        examples = prepare_examples(songs, vocab, quantizer, cfg.budget, feats)
        valid = prepare_examples(valid_songs, vocab, quantizer, cfg.budget, feats) if valid_songs else []
        return cls(CSLModel(cfg, seed), vocab, quantizer, examples, valid=valid)

    def loss(self, model: CSLModel, idx: Sequence[int]) -> Tensor:
        return batch_loss(model, collate([self.examples[i] for i in idx], model.cfg.learned_dim))

    def valid_loss(self, model: CSLModel, chunk: int = 32) -> float:
        """Per-token NLL over the validation songs."""
        total = count = 0
        for start in range(0, len(self.valid), chunk):
            batch = collate(self.valid[start : start + chunk], model.cfg.learned_dim)
            n = int((batch.tokens[:, 1:] != PAD).sum())
            total += float(batch_loss(model, batch)) * n
            count += n
        return total / count

    def train(self, cfg: TrainConfig, log_path=None, checkpoint_path=None) -> TrainResult:
        self.optimizer = self.optimizer or make_adam(self.model.parameters())

        def on_checkpoint(step, opt):
            self.step = step
            self.save(checkpoint_path, cfg)

        result = run_training(
            self.model,
            self.loss,
            len(self.examples),
            cfg,
            self.optimizer,
            self.step,
            log_path,
            on_checkpoint if checkpoint_path else None,
            validate=self.valid_loss if self.valid else None,
        )
        self.step = result.step
        if checkpoint_path:
            self.save(checkpoint_path, cfg)
        return result

    def save(self, path, train_cfg: TrainConfig | None = None) -> str:
        return save_checkpoint(
            path,
            "csl",
            config=self.model.cfg.to_dict(),
            train_config=None if train_cfg is None else train_cfg.to_dict(),
            vocab=list(VOCAB.names),
            lyric_vocab=list(self.vocab.chars),
            quantizer=self.quantizer.to_dict(),
            state_dict=self.model.state_dict(),
            optimizer=None if self.optimizer is None else self.optimizer.state_dict(),
            rng_state=torch.get_rng_state(),
            step=self.step,
        )


@dataclass
class LoadedModel:
    model: CSLModel
    vocab: LyricVocab
    quantizer: QuantizerModel
    step: int
    hash: str


def load_csl(path) -> LoadedModel:
    body = load_checkpoint(path, "csl")
    if list(body["vocab"]) != list(VOCAB.names):
        raise ValueError(f"{path}: token vocabulary differs from this build")
    cfg = ModelConfig.from_dict(body["config"])
    model = CSLModel(cfg)
    model.load_state_dict(body["state_dict"])
    model.eval()
    return LoadedModel(model, LyricVocab(body["lyric_vocab"]), QuantizerModel.from_dict(body["quantizer"]), body["step"], body["hash"])
