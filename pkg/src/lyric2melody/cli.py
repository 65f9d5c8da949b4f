"""Command-line entry point: one subcommand per pipeline stage.

Every run writes its artifacts plus ``config.yaml`` (the effective config)
and ``run.json`` (command, seed, input checkpoint hashes) into ``--out``.
Failures print one JSON line on stderr and exit with 2 (config), 3 (data)
or 4 (runtime).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path
from typing import Sequence

from .attributes import ATTRIBUTE_NAMES, QuantizerModel, fit_quantizer, probe_classes
from .checkpoint import CheckpointError, file_hash
from .config import ConfigError, RunConfig
from .lyrics import ToneLookupError, ToneTable, annotate_tones
from .metrics import ControllabilityMatrix, controllability_sweep, evaluate_pairs, format_table
from .remi import GrammarError, check_stream, detokenize_song, tokenize_song, tokens_to_text
from .score import CorpusError, Song, SongValidationError, dumps_song, export_midi, load_corpus, lyrics_of, song_from_dict, tags_of, validate_song, write_corpus

log = logging.getLogger("lyric2melody")

EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 2, 3, 4


class CLIError(Exception):
    def __init__(self, code: int, message: str, key: str | None = None):
        super().__init__(message)
        self.code = code
        self.key = key


DATA_ERRORS = (CorpusError, SongValidationError, ToneLookupError, CheckpointError, GrammarError, FileNotFoundError, json.JSONDecodeError)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CLIError(EXIT_CONFIG, f"{self.prog}: {message}")


def _version() -> str:
    from importlib.metadata import PackageNotFoundError, version

    try:
        return version("artifact")
    except PackageNotFoundError:
        return "unknown"


# ---------------------------------------------------------------------------
# run directory


class Run:
    def __init__(self, command: str, cfg: RunConfig, argv: Sequence[str]):
        self.cfg = cfg
        self.dir = Path(cfg.out)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.meta = {"command": command, "argv": list(argv), "seed": cfg.seed, "version": _version(), "inputs": {}, "outputs": {}}
        (self.dir / "config.yaml").write_text(cfg.dump(), encoding="utf-8")
        self._flush()

    def _flush(self) -> None:
        (self.dir / "run.json").write_text(json.dumps(self.meta, indent=1, sort_keys=True) + "\n", encoding="utf-8")

    def input(self, name: str, path: str | Path) -> None:
        self.meta["inputs"][name] = {"path": str(path), "sha256": file_hash(path)}
        self._flush()

    def output(self, name: str, path: Path) -> Path:
        self.meta["outputs"][name] = {"path": str(path)}
        if path.is_file():
            self.meta["outputs"][name]["sha256"] = file_hash(path)
        self._flush()
        return path

    def path(self, name: str) -> Path:
        return self.dir / name


def _require(cfg: RunConfig, key: str, flag: str) -> str:
    value = cfg.paths.get(key)
    if not value:
        raise CLIError(EXIT_CONFIG, f"missing required setting paths.{key} (flag {flag})", key=f"paths.{key}")
    return value


def _corpus(run: Run, key: str = "corpus", flag: str = "--in") -> list[Song]:
    path = _require(run.cfg, key, flag)
    songs = load_corpus(path)
    run.input(key, path)
    return songs


def _valid_songs(run: Run) -> list[Song]:
    return _corpus(run, "valid", "--valid") if run.cfg.paths.get("valid") else []


def _report(obj) -> None:
    print(json.dumps(obj, ensure_ascii=False, sort_keys=True))


# ---------------------------------------------------------------------------
# subcommands


def ingest_records(lines: Sequence[str], table: ToneTable) -> tuple[list[Song], int]:
    """Parse raw JSONL song records, filling absent tones from ``table``."""
    songs, filled = [], 0
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            raw = json.loads(line)
            sentences = raw["sentences"]
            texts = [[y["text"] for y in s["syllables"]] for s in sentences]
            given = [[y.get("tone") for y in s["syllables"]] for s in sentences]
            missing = sum(t is None for row in given for t in row)
            if missing:
                tones = annotate_tones(texts, table, given, tonal=raw.get("tonal", True))
                for s, row in zip(sentences, tones):
                    for y, tone in zip(s["syllables"], row):
                        y["tone"] = tone
                filled += missing
            song = song_from_dict(raw)
        except json.JSONDecodeError as exc:
            raise CorpusError(f"line {lineno}: parse error: {exc.msg}") from None
        except (KeyError, TypeError) as exc:
            raise CorpusError(f"line {lineno}: malformed record: {exc!r}") from None
        except (CorpusError, ToneLookupError) as exc:
            raise CorpusError(f"line {lineno}: {exc}") from None
        problems = validate_song(song)
        if problems:
            raise CorpusError(f"line {lineno}: song {song.id!r}: {problems[0]}")
        songs.append(song)
    return songs, filled


def cmd_ingest(args, run: Run) -> None:
    path = _require(run.cfg, "corpus", "--in")
    run.input("raw", path)
    table = ToneTable.load(args.tones) if args.tones else ToneTable.bundled()
    songs, filled = ingest_records(Path(path).read_text(encoding="utf-8").splitlines(), table)
    out = run.path("corpus.jsonl")
    write_corpus(songs, out)
    run.output("corpus", out)
    _report({"songs": len(songs), "sentences": sum(len(s.sentences) for s in songs), "tones_filled": filled, "corpus": str(out)})


def cmd_synth(args, run: Run) -> None:
    from .synth import CorpusSpec, gen_synthetic

    spec = CorpusSpec(args.songs, seed=run.cfg.seed, sentences=tuple(args.sentences), syllables=tuple(args.syllables))
    songs = gen_synthetic(spec)
    out = run.path("corpus.jsonl")
    write_corpus(songs, out)
    run.output("corpus", out)
    _report({"songs": len(songs), "corpus": str(out)})


def cmd_tokenize(args, run: Run) -> None:
    songs = _corpus(run)
    out = run.path("tokens.txt")
    ok = 0
    with open(out, "w", encoding="utf-8", newline="\n") as fh:
        for song in songs:
            tokens = tokenize_song(song)
            fh.write(f"{song.id}\t{tokens_to_text(tokens)}\n")
            if args.check_roundtrip:
                check_stream(tokens, [s.num_syllables for s in song.sentences])
                if detokenize_song(tokens, lyrics_of(song), tags_of(song)) == song:
                    ok += 1
                else:
                    log.warning("song %s does not round-trip", song.id)
    run.output("tokens", out)
    report = {"songs": len(songs), "tokens": str(out)}
    if args.check_roundtrip:
        report["roundtrip"] = ok / len(songs) if songs else 1.0
    _report(report)
    if args.check_roundtrip and ok != len(songs):
        raise CLIError(EXIT_DATA, f"{len(songs) - ok} of {len(songs)} songs failed the round trip")


def cmd_fit_quantizer(args, run: Run) -> None:
    songs = _corpus(run)
    q = fit_quantizer(songs, run.cfg.k)
    out = run.path("quantizer.json")
    q.save(out)
    run.output("quantizer", out)
    _report({"k": q.k, "sentences": sum(len(s.sentences) for s in songs), "quantizer": str(out)})


def _learned_features(run: Run):
    from .vq import read_features

    path = _require(run.cfg, "features", "--features")
    expected = None
    if run.cfg.paths.get("vq_checkpoint"):
        expected = file_hash(run.cfg.paths["vq_checkpoint"])
    run.input("features", path)
    return read_features(path, expected)


def cmd_train(args, run: Run) -> None:
    from .training import CSLTrainer

    songs = _corpus(run)
    qpath = _require(run.cfg, "quantizer", "--quantizer")
    quantizer = QuantizerModel.load(qpath)
    run.input("quantizer", qpath)
    model_cfg = replace(run.cfg.model_config(), use_musical=not args.lyric_only, use_learned=args.learned)
    learned = _learned_features(run) if args.learned else None
    trainer = CSLTrainer.create(songs, quantizer, model_cfg, run.cfg.seed, learned, _valid_songs(run))
    ckpt = run.path("model.pt")
    result = trainer.train(run.cfg.train_config(), run.path("loss.jsonl"), ckpt)
    run.output("checkpoint", ckpt)
    run.output("loss_log", run.path("loss.jsonl"))
    _report({
        "steps": result.step,
        "final_loss": result.losses[-1] if result.losses else None,
        "best_step": result.best_step,
        "valid_loss": min((v for _, v in result.valid_losses), default=None),
        "checkpoint": str(ckpt),
        "sha256": file_hash(ckpt),
    })


def cmd_train_vq(args, run: Run) -> None:
    from .vq import VQTrainer

    songs = _corpus(run)
    trainer = VQTrainer.create(songs, run.cfg.vq_config(), run.cfg.seed, _valid_songs(run))
    ckpt = run.path("vqvae.pt")
    result = trainer.train(run.cfg.vq_train_config(), run.path("loss.jsonl"), ckpt)
    run.output("checkpoint", ckpt)
    _report({
        "steps": result.step,
        "best_step": result.best_step,
        "reconstruction_accuracy": trainer.reconstruction_accuracy(),
        "checkpoint": str(ckpt),
        "sha256": file_hash(ckpt),
    })


def cmd_extract_features(args, run: Run) -> None:
    from .vq import extract_features, load_vqvae, write_features

    songs = _corpus(run)
    vq_path = _require(run.cfg, "vq_checkpoint", "--vq-checkpoint")
    model, digest = load_vqvae(vq_path)
    run.input("vq_checkpoint", vq_path)
    out = run.path("features.jsonl")
    write_features(out, extract_features(model, songs), digest)
    run.output("features", out)
    _report({"songs": len(songs), "features": str(out), "checkpoint_sha256": digest})


def _load_model(run: Run):
    from .training import load_csl

    path = _require(run.cfg, "checkpoint", "--checkpoint")
    loaded = load_csl(path)
    run.input("checkpoint", path)
    return loaded


def cmd_generate(args, run: Run) -> None:
    from .generate import generate_song, load_request
    from .vq import read_features

    loaded = _load_model(run)
    req_path = _require(run.cfg, "request", "--request")
    request = load_request(req_path, loaded.quantizer)
    run.input("request", req_path)
    sampling = replace(request.sampling, **{k: v for k, v in run.cfg.sampling.items()})
    if "seed" not in run.cfg.sampling and args.seed is not None:
        sampling = replace(sampling, seed=run.cfg.seed)
    learned = None
    if isinstance(request.learned_file, list):
        learned = request.learned_file
    elif isinstance(request.learned_file, str):
        learned = read_features(request.learned_file).get(request.tags.id)
        if learned is None:
            raise CLIError(EXIT_DATA, f"no learned features for song {request.tags.id!r} in {request.learned_file}")
    song = generate_song(loaded.model, loaded.vocab, request.lyrics, request.tags, request.attr_classes, learned, sampling, loaded.quantizer)
    stem = song.id or "generated"
    out = run.path(f"{stem}.jsonl")
    out.write_text(dumps_song(song) + "\n", encoding="utf-8")
    export_midi(song, run.path(f"{stem}.mid"))
    run.path(f"{stem}.tokens.txt").write_text(tokens_to_text(tokenize_song(song)) + "\n", encoding="utf-8")
    run.meta["sampling"] = asdict(sampling)
    run.output("song", out)
    run.output("midi", run.path(f"{stem}.mid"))
    _report({"song": str(out), "notes": song.num_notes, "sentences": len(song.sentences), "sampling": asdict(sampling)})


def cmd_evaluate(args, run: Run) -> None:
    generated = _corpus(run, "generated", "--generated")
    reference = {s.id: s for s in _corpus(run, "reference", "--reference")}
    missing = [g.id for g in generated if g.id not in reference]
    if missing:
        raise CLIError(EXIT_DATA, f"no reference for generated songs {missing[:5]}")
    report = evaluate_pairs([(g, reference[g.id]) for g in generated])
    run.path("metrics.json").write_text(json.dumps(report.to_dict(), indent=1) + "\n", encoding="utf-8")
    run.path("metrics.txt").write_text(format_table({"generated": report}) + "\n", encoding="utf-8")
    run.output("metrics", run.path("metrics.json"))
    print(format_table({"generated": report}))


def cmd_controllability(args, run: Run) -> None:
    from .generate import model_composer

    loaded = _load_model(run)
    songs = _corpus(run)[: args.prompts]
    attributes = args.attributes or list(ATTRIBUTE_NAMES)
    unknown = set(attributes) - set(ATTRIBUTE_NAMES)
    if unknown:
        raise CLIError(EXIT_CONFIG, f"unknown attributes {sorted(unknown)}", key="--attributes")
    compose = model_composer(loaded.model, loaded.vocab, run.cfg.sampling_config())
    prompts = [(lyrics_of(s), tags_of(s)) for s in songs]
    q = loaded.quantizer
    rows = {a: controllability_sweep(compose, prompts, q, a, args.classes or probe_classes(q.bins[a])) for a in attributes}
    matrix = ControllabilityMatrix(rows)
    for name, text in (("txt", matrix.to_text()), ("csv", matrix.to_csv()), ("json", matrix.to_json())):
        path = run.path(f"controllability.{name}")
        path.write_text(text if text.endswith("\n") else text + "\n", encoding="utf-8")
        run.output(f"controllability_{name}", path)
    print(matrix.to_text())


def cmd_ablate(args, run: Run) -> None:
    from .generate import model_composer
    from .metrics import CompositionRequest, ablation_harness
    from .training import load_csl, song_attribute_classes

    if not args.run:
        raise CLIError(EXIT_CONFIG, "ablate needs at least one --run NAME=CHECKPOINT", key="--run")
    reference = _corpus(run, "reference", "--reference")
    learned = None
    composers, requests = {}, {}
    for spec in args.run:
        name, sep, path = spec.partition("=")
        if not sep or not name or not path:
            raise CLIError(EXIT_CONFIG, f"--run expects NAME=CHECKPOINT, got {spec!r}", key="--run")
        loaded = load_csl(path)
        run.input(f"checkpoint:{name}", path)
        if loaded.model.cfg.use_learned and learned is None:
            learned = _learned_features(run)
        composers[name] = model_composer(loaded.model, loaded.vocab, run.cfg.sampling_config())
        requests[name] = [
            CompositionRequest(
                tuple(lyrics_of(s)),
                tags_of(s),
                tuple(song_attribute_classes(s, loaded.quantizer)),
                tuple(map(tuple, learned[s.id])) if loaded.model.cfg.use_learned else None,
            )
            for s in reference
        ]
    reports = ablation_harness(composers, reference, requests)
    table = format_table(reports)
    run.path("ablation.txt").write_text(table + "\n", encoding="utf-8")
    run.path("ablation.json").write_text(json.dumps({k: r.to_dict() for k, r in reports.items()}, indent=1) + "\n", encoding="utf-8")
    run.output("ablation", run.path("ablation.json"))
    print(table)


def cmd_export_midi(args, run: Run) -> None:
    songs = _corpus(run)
    wanted = set(args.song or [])
    if wanted:
        missing = wanted - {s.id for s in songs}
        if missing:
            raise CLIError(EXIT_DATA, f"songs not in corpus: {sorted(missing)}")
        songs = [s for s in songs if s.id in wanted]
    folder = run.path("midi")
    folder.mkdir(exist_ok=True)
    for song in songs:
        export_midi(song, folder / f"{song.id}.mid")
    run.output("midi", folder)
    _report({"songs": len(songs), "midi": str(folder)})


def cmd_gradcheck(args, run: Run) -> None:
    from .diagnostics import gradcheck_suite

    reports = gradcheck_suite(run.cfg.seed, tolerance=args.tolerance)
    out = {name: {"passed": r.passed, "worst": r.worst, "errors": r.errors} for name, r in reports.items()}
    run.path("gradcheck.json").write_text(json.dumps(out, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    run.output("gradcheck", run.path("gradcheck.json"))
    for name, r in reports.items():
        print(f"{'PASS' if r.passed else 'FAIL'}  {name:<24} worst relative error {r.worst:.2e}")
    failed = [n for n, r in reports.items() if not r.passed]
    if failed:
        raise CLIError(EXIT_RUNTIME, f"gradient check failed for {failed}")


# ---------------------------------------------------------------------------
# parser


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML run config (default: $L2M_CONFIG)")
    p.add_argument("--seed", type=int, help="overrides seed")
    p.add_argument("--out", help="run directory (overrides out)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lyric2melody", description="Controllable lyric-to-melody generation pipeline.")
    parser.add_argument("--version", action="version", version=_version())
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help_text, **paths):
        p = sub.add_parser(name, help=help_text)
        _common(p)
        for flag, (key, text) in paths.items():
            p.add_argument(flag, dest=f"paths.{key}", metavar="PATH", help=text)
        p.set_defaults(func=func)
        return p

    p = add("ingest", cmd_ingest, "validate a raw JSONL corpus and fill missing tones", **{"--in": ("corpus", "raw JSONL songs")})
    p.add_argument("--tones", help="tone table TSV (default: bundled)")

    p = add("synth", cmd_synth, "write a deterministic synthetic corpus")
    p.add_argument("--songs", type=int, required=True)
    p.add_argument("--sentences", type=int, nargs=2, default=(3, 5), metavar=("MIN", "MAX"))
    p.add_argument("--syllables", type=int, nargs=2, default=(4, 8), metavar=("MIN", "MAX"))

    p = add("tokenize", cmd_tokenize, "write token streams", **{"--in": ("corpus", "corpus JSONL")})
    p.add_argument("--check-roundtrip", action="store_true", help="detokenize and compare every song")

    p = add("fit-quantizer", cmd_fit_quantizer, "fit attribute class boundaries", **{"--in": ("corpus", "corpus JSONL")})
    p.add_argument("--k", type=int, help="classes per attribute (overrides k)")

    p = add(
        "train", cmd_train, "train the conditioned melody model",
        **{
            "--in": ("corpus", "training corpus"),
            "--valid": ("valid", "validation corpus; the best weights on it are kept"),
            "--quantizer": ("quantizer", "quantizer JSON"),
            "--features": ("features", "learned features JSONL"),
            "--vq-checkpoint": ("vq_checkpoint", "VQ-VAE the features came from"),
        },
    )
    p.add_argument("--steps", type=int, dest="train.steps")
    p.add_argument("--batch-size", type=int, dest="train.batch_size")
    p.add_argument("--eval-every", type=int, dest="train.eval_every", help="validation interval in steps")
    p.add_argument("--lyric-only", action="store_true", help="zero all musical control blocks")
    p.add_argument("--learned", action="store_true", help="condition on learned sentence features")

    p = add(
        "train-vq", cmd_train_vq, "train the sentence VQ-VAE",
        **{"--in": ("corpus", "training corpus"), "--valid": ("valid", "validation corpus; the best weights on it are kept")},
    )
    p.add_argument("--steps", type=int, dest="vq_train.steps")
    p.add_argument("--batch-size", type=int, dest="vq_train.batch_size")
    p.add_argument("--eval-every", type=int, dest="vq_train.eval_every", help="validation interval in steps")

    add(
        "extract-features", cmd_extract_features, "quantized sentence features from a VQ-VAE",
        **{"--in": ("corpus", "corpus JSONL"), "--vq-checkpoint": ("vq_checkpoint", "VQ-VAE checkpoint")},
    )

    p = add(
        "generate", cmd_generate, "generate one melody from a JSON request",
        **{"--checkpoint": ("checkpoint", "model checkpoint"), "--request": ("request", "request JSON")},
    )
    p.add_argument("--temperature", type=float, dest="sampling.temperature")
    p.add_argument("--top-p", type=float, dest="sampling.top_p")
    p.add_argument("--no-grammar-mask", action="store_const", const=False, dest="sampling.grammar_mask")

    add(
        "evaluate", cmd_evaluate, "PD/DD/MD of generated songs against references with the same ids",
        **{"--generated": ("generated", "generated JSONL"), "--reference": ("reference", "reference JSONL")},
    )

    p = add(
        "controllability", cmd_controllability, "Spearman matrix of specified vs measured attribute classes",
        **{"--checkpoint": ("checkpoint", "model checkpoint"), "--in": ("corpus", "songs whose lyrics are prompts")},
    )
    p.add_argument("--attributes", nargs="+", metavar="NAME", help="attributes to sweep (default: all)")
    p.add_argument("--classes", type=int, nargs="+", metavar="C", help="probe classes (default: classes at 8 equal-mass quantiles of each attribute)")
    p.add_argument("--prompts", type=int, default=50, help="number of lyric prompts")

    p = add(
        "ablate", cmd_ablate, "compare checkpoints on held-out songs",
        **{
            "--reference": ("reference", "held-out songs"),
            "--features": ("features", "learned features for models that use them"),
            "--vq-checkpoint": ("vq_checkpoint", "VQ-VAE the features came from"),
        },
    )
    p.add_argument("--run", action="append", metavar="NAME=CHECKPOINT", help="one row of the table; repeatable")

    p = add("export-midi", cmd_export_midi, "write standard MIDI files", **{"--in": ("corpus", "corpus JSONL")})
    p.add_argument("--song", action="append", metavar="ID", help="only these songs; repeatable")

    p = add("gradcheck", cmd_gradcheck, "finite-difference checks of operators and tiny models")
    p.add_argument("--tolerance", type=float, default=1e-5)
    return parser


def _fail(exc: CLIError) -> int:
    kind = {EXIT_CONFIG: "config", EXIT_DATA: "data", EXIT_RUNTIME: "runtime"}[exc.code]
    payload = {"error": kind, "code": exc.code, "message": str(exc).replace("\n", " ")}
    if exc.key:
        payload["key"] = exc.key
    print(json.dumps(payload, ensure_ascii=False), file=sys.stderr)
    return exc.code


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        try:
            args = build_parser().parse_args(argv)
            logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
            overrides = {k: v for k, v in vars(args).items() if "." in k}
            if getattr(args, "k", None) is not None:
                overrides["k"] = args.k
            cfg = RunConfig.load(args.config).with_overrides(seed=args.seed, out=args.out, **overrides)
        except ConfigError as exc:
            raise CLIError(EXIT_CONFIG, str(exc)) from None
        try:
            run = Run(args.command, cfg, argv)
            args.func(args, run)
        except CLIError:
            raise
        except ConfigError as exc:
            raise CLIError(EXIT_CONFIG, str(exc)) from None
        except DATA_ERRORS as exc:
            raise CLIError(EXIT_DATA, f"{type(exc).__name__}: {exc}") from None
        except (ValueError, KeyError) as exc:
            raise CLIError(EXIT_DATA, f"{type(exc).__name__}: {exc}") from None
        except Exception as exc:  # anything else is a runtime failure
            log.debug("runtime failure", exc_info=True)
            raise CLIError(EXIT_RUNTIME, f"{type(exc).__name__}: {exc}") from None
    except CLIError as exc:
        return _fail(exc)
    return 0


if __name__ == "__main__":
    sys.exit(main())
