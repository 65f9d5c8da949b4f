"""End-to-end toy pipeline behind the controllability and ablation studies.

Every stage writes its artifact into a cache directory named after the hash
of the settings that shape the trained models, so a second run reuses the
checkpoints. Study results record the sweep and sampling settings they were
made with and are recomputed when those change. Set ``L2M_RERUN=1`` to ignore
the cache.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Mapping

from .attributes import ATTRIBUTE_NAMES, QuantizerModel, fit_quantizer, median_classes, probe_classes
from .checkpoint import file_hash
from .generate import Sampling, model_composer
from .metrics import (
    CompositionRequest,
    ControllabilityMatrix,
    MetricReport,
    SweepResult,
    ablation_harness,
    controllability_sweep,
)
from .model import ModelConfig
from .neural import Schedule
from .score import Song, load_corpus, lyrics_of, tags_of, write_corpus
from .synth import CorpusSpec, gen_synthetic
from .training import CSLTrainer, TrainConfig, load_csl, song_attribute_classes
from .vq import VQConfig, VQTrainer, extract_features, load_vqvae, read_features, write_features

log = logging.getLogger(__name__)

CACHE_ENV = "L2M_CACHE"
RERUN_ENV = "L2M_RERUN"
# fields that change trained artifacts; the rest only affect the studies
TRAINING_FIELDS = ("num_songs", "seed", "split", "model", "train", "vq", "vq_train")


def _toy_model() -> ModelConfig:
    return replace(ModelConfig.toy(), dropout=0.2)


def _toy_vq() -> VQConfig:
    return replace(VQConfig.toy(), dropout=0.1)


def _toy_train() -> TrainConfig:
    return TrainConfig(
        steps=12_000,
        batch_size=16,
        schedule=Schedule(peak=1e-3, decay_steps=12_000, floor=1e-5),
        log_every=500,
        eval_every=500,
    )


def _toy_vq_train() -> TrainConfig:
    return TrainConfig(
        steps=6_000,
        batch_size=32,
        schedule=Schedule(peak=1e-3, decay_steps=6_000, floor=1e-5),
        log_every=500,
        eval_every=500,
    )


@dataclass(frozen=True)
class ExperimentConfig:
    num_songs: int = 2000
    seed: int = 0
    split: tuple[int, int, int] = (1800, 100, 100)
    model: ModelConfig = field(default_factory=_toy_model)
    train: TrainConfig = field(default_factory=_toy_train)
    vq: VQConfig = field(default_factory=_toy_vq)
    vq_train: TrainConfig = field(default_factory=_toy_vq_train)
    swept: tuple[str, ...] = ("PM", "DM", "ND", "Align")
    probes: int = 8
    sweep_prompts: int = 50
    sampling: Sampling = field(default_factory=Sampling)

    def __post_init__(self):
        if sum(self.split) != self.num_songs:
            raise ValueError(f"split {self.split} does not add up to {self.num_songs} songs")
        unknown = set(self.swept) - set(ATTRIBUTE_NAMES)
        if unknown:
            raise ValueError(f"unknown swept attributes {sorted(unknown)}")
        if self.vq.d != self.model.learned_dim:
            raise ValueError(f"VQ width {self.vq.d} must equal learned_dim {self.model.learned_dim}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: Mapping) -> "ExperimentConfig":
        payload = dict(payload)
        unknown = set(payload) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown experiment keys: {sorted(unknown)}")
        out = {}
        for f in fields(cls):
            if f.name not in payload:
                continue
            value = payload[f.name]
            if f.name == "model":
                value = ModelConfig.from_dict({**_toy_model().to_dict(), **value})
            elif f.name == "vq":
                value = VQConfig.from_dict({**_toy_vq().to_dict(), **value})
            elif f.name in ("train", "vq_train"):
                default = _toy_train() if f.name == "train" else _toy_vq_train()
                merged = {**default.to_dict(), **value}
                merged["schedule"] = {**default.to_dict()["schedule"], **value.get("schedule", {})}
                value = TrainConfig.from_dict(merged)
            elif f.name == "sampling":
                value = Sampling(**{**asdict(Sampling()), **value})
            elif f.name in ("split", "swept"):
                value = tuple(value)
            out[f.name] = value
        return cls(**out)

    def study_settings(self) -> dict:
        return {k: v for k, v in self.to_dict().items() if k not in TRAINING_FIELDS}

    def digest(self) -> str:
        text = json.dumps({k: v for k, v in self.to_dict().items() if k in TRAINING_FIELDS}, sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def cache_dir(cfg: ExperimentConfig, root: str | Path | None = None) -> Path:
    root = Path(root or os.environ.get(CACHE_ENV) or Path.home() / ".cache" / "lyric2melody")
    return root / f"toy-{cfg.digest()}"


@dataclass
class Splits:
    train: list[Song]
    valid: list[Song]
    test: list[Song]


class Experiment:
    """Lazily built, cached toy pipeline."""

    def __init__(self, cfg: ExperimentConfig = ExperimentConfig(), root: str | Path | None = None, rerun: bool | None = None):
        self.cfg = cfg
        self.dir = cache_dir(cfg, root)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.rerun = os.environ.get(RERUN_ENV, "") not in ("", "0") if rerun is None else rerun
        self._done: set[str] = set()
        (self.dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True), encoding="utf-8")

    def _fresh(self, path: Path) -> bool:
        """True when ``path`` must be (re)built in this process."""
        if path.name in self._done:
            return False
        self._done.add(path.name)
        return self.rerun or not path.exists()

    def _cached_study(self, path: Path):
        """Stored study results, or None when they must be recomputed."""
        if self.rerun and path.name not in self._done or not path.exists():
            return None
        raw = json.loads(path.read_text(encoding="utf-8"))
        return raw["results"] if raw.get("settings") == self.cfg.study_settings() else None

    def _store_study(self, path: Path, results: dict) -> None:
        self._done.add(path.name)
        payload = {"settings": self.cfg.study_settings(), "results": results}
        path.write_text(json.dumps(payload), encoding="utf-8")

    def _timed(self, what: str, fn):
        start = time.perf_counter()
        out = fn()
        elapsed = time.perf_counter() - start
        log.info("%s took %.1f s", what, elapsed)
        timings = self.dir / "timings.json"
        data = json.loads(timings.read_text()) if timings.exists() else {}
        data[what] = elapsed
        timings.write_text(json.dumps(data, indent=1, sort_keys=True))
        return out

    # -- data ---------------------------------------------------------------

    def splits(self) -> Splits:
        path = self.dir / "corpus.jsonl"
        if self._fresh(path):
            write_corpus(gen_synthetic(CorpusSpec(self.cfg.num_songs, seed=self.cfg.seed)), path)
            self._splits = None
        if getattr(self, "_splits", None) is None:
            songs = load_corpus(path)
            a, b, _ = self.cfg.split
            self._splits = Splits(songs[:a], songs[a : a + b], songs[a + b :])
        return self._splits

    def quantizer(self) -> QuantizerModel:
        path = self.dir / "quantizer.json"
        if self._fresh(path):
            fit_quantizer(self.splits().train, self.cfg.model.k).save(path)
        return QuantizerModel.load(path)

    # -- models -------------------------------------------------------------

    def _train_csl(self, name: str, model_cfg: ModelConfig, learned=None) -> Path:
        path = self.dir / f"{name}.pt"
        if self._fresh(path):
            s = self.splits()
            trainer = CSLTrainer.create(s.train, self.quantizer(), model_cfg, self.cfg.seed, learned, s.valid)
            self._timed(f"train {name}", lambda: trainer.train(self.cfg.train, self.dir / f"{name}.loss.jsonl", path))
        return path

    def full_model(self) -> Path:
        return self._train_csl("full", replace(self.cfg.model, use_musical=True, use_learned=False))

    def lyric_only_model(self) -> Path:
        return self._train_csl("lyric_only", replace(self.cfg.model, use_musical=False, use_learned=False))

    def vq_model(self) -> Path:
        path = self.dir / "vqvae.pt"
        if self._fresh(path):
            s = self.splits()
            trainer = VQTrainer.create(s.train, self.cfg.vq, self.cfg.seed, s.valid)
            self._timed("train vqvae", lambda: trainer.train(self.cfg.vq_train, self.dir / "vqvae.loss.jsonl", path))
        return path

    def features(self) -> tuple[Path, str]:
        """Learned per-sentence features of every song, tagged with the VQ checkpoint hash."""
        ckpt = self.vq_model()
        path = self.dir / "features.jsonl"
        digest = file_hash(ckpt)
        if self._fresh(path):
            model, digest = load_vqvae(ckpt)
            s = self.splits()
            write_features(path, extract_features(model, s.train + s.valid + s.test), digest)
        return path, digest

    def learned_model(self) -> Path:
        learned = None
        if self.rerun or not (self.dir / "with_learned.pt").exists():
            feats, digest = self.features()
            learned = read_features(feats, digest)
        return self._train_csl("with_learned", replace(self.cfg.model, use_learned=True), learned)

    # -- studies ------------------------------------------------------------

    def controllability(self) -> ControllabilityMatrix:
        path = self.dir / "controllability.json"
        ckpt = self.full_model()
        cached = self._cached_study(path)
        if cached is not None:
            return ControllabilityMatrix({n: SweepResult(**r) for n, r in cached.items()})
        loaded = load_csl(ckpt)
        q = loaded.quantizer
        compose = model_composer(loaded.model, loaded.vocab, self.cfg.sampling)
        prompts = [(lyrics_of(s), tags_of(s)) for s in self.splits().test[: self.cfg.sweep_prompts]]
        fixed = median_classes(q)
        rows = {}
        for name in self.cfg.swept:
            classes = probe_classes(q.bins[name], self.cfg.probes)
            rows[name] = self._timed(
                f"sweep {name}", lambda: controllability_sweep(compose, prompts, q, name, classes, fixed)
            )
        matrix = ControllabilityMatrix(rows)
        self._store_study(path, {n: asdict(r) for n, r in rows.items()})
        (self.dir / "controllability.csv").write_text(matrix.to_csv(), encoding="utf-8")
        return matrix

    def ablation(self) -> dict[str, MetricReport]:
        path = self.dir / "ablation.json"
        ckpts = {"with learned": self.learned_model(), "full": self.full_model(), "lyric only": self.lyric_only_model()}
        cached = self._cached_study(path)
        if cached is not None:
            return {n: MetricReport(**r) for n, r in cached.items()}
        test = self.splits().test
        feats, digest = self.features()
        learned = read_features(feats, digest)
        composers, requests = {}, {}
        for name, ckpt in ckpts.items():
            loaded = load_csl(ckpt)
            composers[name] = model_composer(loaded.model, loaded.vocab, self.cfg.sampling)
            requests[name] = [
                CompositionRequest(
                    tuple(lyrics_of(s)),
                    tags_of(s),
                    tuple(song_attribute_classes(s, loaded.quantizer)),
                    tuple(map(tuple, learned[s.id])) if loaded.model.cfg.use_learned else None,
                )
                for s in test
            ]
        reports = self._timed("ablation", lambda: ablation_harness(composers, test, requests))
        self._store_study(path, {n: r.to_dict() for n, r in reports.items()})
        return reports


def controllability_passes(matrix: ControllabilityMatrix, threshold: float = 0.8, margin: float = 0.3) -> list[str]:
    """Human-readable violations of the strength and independence targets; empty when all hold."""
    problems = []
    for name, row in matrix.rows.items():
        diag = row.rho[name]
        if not diag >= threshold:
            problems.append(f"rho[{name},{name}] = {diag:.3f} < {threshold}")
        for other, value in row.rho.items():
            # an undefined off-diagonal (constant measured attribute) shows no coupling
            if other != name and not math.isnan(value) and not abs(value) <= diag - margin:
                problems.append(f"|rho[{name},{other}]| = {abs(value):.3f} exceeds {diag:.3f} - {margin}")
    return problems


def ablation_ordering(reports: Mapping[str, MetricReport]) -> list[str]:
    """Violations of with-learned >= full >= lyric-only on PD/DD and the reverse on MD."""
    order = ["with learned", "full", "lyric only"]
    problems = []
    for hi, lo in zip(order, order[1:]):
        a, b = reports[hi], reports[lo]
        if not a.pd >= b.pd:
            problems.append(f"PD: {hi} {a.pd:.2f} < {lo} {b.pd:.2f}")
        if not a.dd >= b.dd:
            problems.append(f"DD: {hi} {a.dd:.2f} < {lo} {b.dd:.2f}")
        if not a.md <= b.md:
            problems.append(f"MD: {hi} {a.md:.3f} > {lo} {b.md:.3f}")
    return problems

