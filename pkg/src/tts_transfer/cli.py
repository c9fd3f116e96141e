"""Command-line entry point.

Exit codes: 0 success, 2 usage error, 3 data error, 4 training failure.
Progress and diagnostics go to standard error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import audio as A
from .archive import ArchiveFormatError, ParameterArchive
from .corpus import (
    CorpusError,
    HttpClient,
    Manifest,
    StubClient,
    SynthesisError,
    build_demo_corpora,
    generate_synthetic,
    ingest,
    validate,
)
from .flow import FlowConfig
from .inference import synthesize_text
from .report import RatingError, RatingSet, aggregate_mos, mos_table, plot_alignment, plot_spectrogram
from .text import Vocabulary, build_vocabulary, encode
from .training import (
    STRATEGIES,
    OptimizerSettings,
    PlanError,
    StagePlan,
    acoustic_from_archive,
    check_chain,
    run_recipe,
    run_stage,
    strategy_plans,
    surgery_reset_embedding,
    train_vocoder,
    vocoder_archive,
    vocoder_from_archive,
)

log = logging.getLogger("tts_transfer")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_TRAINING = 0, 2, 3, 4


class UsageError(Exception):
    pass


class TrainingFailure(Exception):
    pass


DATA_ERRORS = (
    ArchiveFormatError,
    CorpusError,
    PlanError,
    RatingError,
    SynthesisError,
    A.WavFormatError,
    FileNotFoundError,
    IsADirectoryError,
    UnicodeDecodeError,
    json.JSONDecodeError,
)


# -- subcommands -------------------------------------------------------------------------


def cmd_prepare(args) -> int:
    m = ingest(args.raw, args.transcripts, args.out, corpus=args.corpus, script=args.script)
    path = Path(args.out) / f"{args.corpus}.jsonl"
    m.save(path)
    print(f"{path}: {len(m)} utterances, {len(m.skipped)} skipped")
    return EXIT_OK


def _client(spec: str, voice: str):
    if spec == "stub":
        return StubClient(voice)
    if spec.startswith(("http://", "https://")):
        return HttpClient(spec, voice)
    raise UsageError(f"--client must be 'stub' or an http(s) URL, got {spec!r}")


def cmd_synth_corpus(args) -> int:
    texts = [t for t in Path(args.texts).read_text(encoding="utf-8").splitlines() if t.strip()]
    m = generate_synthetic(texts, _client(args.client, args.voice), args.out, corpus=args.corpus, workers=args.workers)
    path = Path(args.out) / f"{args.corpus}.jsonl"
    m.save(path)
    print(f"{path}: {len(m)} utterances, {len(m.failures)} failed")
    return EXIT_OK


def cmd_demo_corpora(args) -> int:
    c = build_demo_corpora(args.out, args.english, args.synthetic, args.target, seed=0 if args.seed is None else args.seed)
    for p in (c.english, c.synthetic, c.target):
        print(p)
    return EXIT_OK


def cmd_validate(args) -> int:
    m = Manifest.load(args.manifest)
    vocab = Vocabulary.load(args.vocab) if args.vocab else None
    report = validate(m, vocab)
    print(report.summary())
    return EXIT_OK if report.ok else EXIT_DATA


def _with_seed(plan: StagePlan, seed: int | None) -> StagePlan:
    return plan if seed is None else replace(plan, seed=seed)


def _run_training(fn):
    try:
        return fn()
    except DATA_ERRORS:
        raise
    except (FloatingPointError, RuntimeError, np.linalg.LinAlgError) as exc:
        raise TrainingFailure(str(exc)) from exc


def cmd_train(args) -> int:
    plan = _with_seed(StagePlan.load(args.plan), args.seed)
    check_chain([plan])
    _, report = _run_training(lambda: run_stage(plan))
    print(f"{plan.output}: {report.steps} steps, halt {report.halt_reason}, loss {report.final_loss:.4f}")
    if report.rejected_steps == report.steps:
        raise TrainingFailure("every optimizer step was rejected")
    return EXIT_OK


def cmd_recipe(args) -> int:
    plans = [_with_seed(StagePlan.load(p), args.seed) for p in args.plans]
    _, reports = _run_training(lambda: run_recipe(plans))
    for plan, r in zip(plans, reports):
        print(f"{plan.stage}: {plan.output} ({r.steps} steps, loss {r.final_loss:.4f}, halt {r.halt_reason})")
    return EXIT_OK


def cmd_plan(args) -> int:
    manifests = {"A": args.english, "B": args.synthetic, "C": args.target}
    needed = set(args.strategy.split("-")[0].split(","))
    missing = sorted(k for k in needed if manifests[k] is None)
    if missing:
        raise UsageError(f"strategy {args.strategy} needs manifest(s) for {', '.join(missing)}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    steps = {"A": args.steps, "B": args.steps, "C": args.steps}
    plans = strategy_plans(
        args.strategy,
        {k: Path(v).resolve() for k, v in manifests.items() if v is not None},
        out.resolve(),
        steps,
        seed=0 if args.seed is None else args.seed,
        model={"preset": args.preset},
        batch_size=args.batch_size,
    )
    for i, plan in enumerate(plans, 1):
        path = out / f"plan{i}_{plan.stage}.json"
        plan.save(path)
        print(path)
    return EXIT_OK


def _load_vocab(path: str) -> Vocabulary:
    if path.endswith(".jsonl"):
        m = Manifest.load(path)
        return build_vocabulary(m.texts, m.script)
    return Vocabulary.load(path)


def cmd_surgery(args) -> int:
    a = ParameterArchive.load(args.inp)
    out = surgery_reset_embedding(a, _load_vocab(args.vocab), 0 if args.seed is None else args.seed)
    out.save(args.out)
    print(f"{args.out}: embedding reset to {len(Vocabulary.from_text(out.metadata['vocabulary']))} entries")
    return EXIT_OK


def _vocoder(spec: list[str]):
    if spec == ["griffinlim"]:
        return None
    if len(spec) == 2 and spec[0] == "flow":
        return vocoder_from_archive(ParameterArchive.load(spec[1]))
    raise UsageError("--vocoder takes 'griffinlim' or 'flow CKPT'")


def cmd_infer(args) -> int:
    vocoder = _vocoder(args.vocoder)
    model, vocab = acoustic_from_archive(ParameterArchive.load(args.ckpt))
    seed = 0 if args.seed is None else args.seed
    s = synthesize_text(model, args.text, vocab, vocoder, seed=seed, max_decoder_steps=args.max_steps, sigma=args.sigma)
    A.save_wav(args.out, s.wav)
    if args.align:
        plot_alignment(s.alignment, args.align, args.scale)
    if args.mel:
        plot_spectrogram(s.mel, args.mel, args.scale)
    print(f"{args.out}: {len(s.wav)} samples, {s.mel.n_frames} frames, halted by {s.halted_by}")
    return EXIT_OK


def cmd_plot_align(args) -> int:
    if args.matrix:
        att = np.load(args.matrix)
    elif args.ckpt and args.text:
        model, vocab = acoustic_from_archive(ParameterArchive.load(args.ckpt))
        out = model.infer(encode(args.text, vocab).ids[None], seed=0 if args.seed is None else args.seed)
        att = out.alignments[0]
    else:
        raise UsageError("plot-align needs --matrix NPY or --ckpt CKPT --text STR")
    img = plot_alignment(att, args.out, args.scale)
    print(f"{args.out}: {img.shape[1]}x{img.shape[0]}")
    return EXIT_OK


def cmd_plot_mel(args) -> int:
    src = Path(args.input)
    if src.suffix.lower() == ".wav":
        mel = A.mel_spectrogram(A.load_wav(src))
    else:
        mel = A.load_mel(src)
    img = plot_spectrogram(mel, args.out, args.scale)
    print(f"{args.out}: {img.shape[1]}x{img.shape[0]}")
    return EXIT_OK


def cmd_mos_report(args) -> int:
    text = mos_table(aggregate_mos(RatingSet.load(args.ratings)))
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


def cmd_train_vocoder(args) -> int:
    cfg = FlowConfig.toy() if args.preset == "toy" else FlowConfig()
    seed = 0 if args.seed is None else args.seed
    m = Manifest.load(args.manifest)
    model, curve = _run_training(
        lambda: train_vocoder(m, cfg, steps=args.steps, seed=seed, settings=OptimizerSettings(lr=args.lr))
    )
    if not np.isfinite(curve[-1][1]):
        raise TrainingFailure("vocoder loss is not finite")
    vocoder_archive(model, step=args.steps, seed=seed).save(args.out)
    print(f"{args.out}: {args.steps} steps, nll {curve[-1][1]:.4f}")
    return EXIT_OK


# -- parser ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    # SUPPRESS lets the flags appear before or after the subcommand without one side resetting the other
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="global seed (default: 0, or the plan's own seed)")
    common.add_argument("-q", "--quiet", action="store_true", default=argparse.SUPPRESS, help="only warnings on stderr")

    p = argparse.ArgumentParser(prog="tts-transfer", description=__doc__.splitlines()[0], parents=[common])
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, fn, help):
        sp = sub.add_parser(name, help=help, parents=[common])
        sp.set_defaults(fn=fn)
        return sp

    sp = add("prepare", cmd_prepare, "ingest recorded audio into a 16 kHz corpus")
    sp.add_argument("--raw", required=True)
    sp.add_argument("--transcripts", required=True, help="TSV: relative_path<TAB>text")
    sp.add_argument("--out", required=True)
    sp.add_argument("--corpus", default="target")
    sp.add_argument("--script", default=None)

    sp = add("synth-corpus", cmd_synth_corpus, "synthesize a corpus through a TTS client")
    sp.add_argument("--texts", required=True, help="UTF-8 file, one text per line")
    sp.add_argument("--client", required=True, help="'stub' or the base URL of a TTS server")
    sp.add_argument("--voice", default="default")
    sp.add_argument("--out", required=True)
    sp.add_argument("--corpus", default="synthetic")
    sp.add_argument("--workers", type=int, default=4)

    sp = add("demo-corpora", cmd_demo_corpora, "write small stub English, synthetic and target corpora")
    sp.add_argument("--out", required=True)
    sp.add_argument("--english", type=int, default=20)
    sp.add_argument("--synthetic", type=int, default=30)
    sp.add_argument("--target", type=int, default=6)

    sp = add("validate", cmd_validate, "check a manifest's invariants")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--vocab", default=None)

    sp = add("plan", cmd_plan, "write stage plans for one of the training strategies")
    sp.add_argument("--strategy", required=True, choices=STRATEGIES)
    sp.add_argument("--english", default=None)
    sp.add_argument("--synthetic", default=None)
    sp.add_argument("--target", default=None)
    sp.add_argument("--out", required=True)
    sp.add_argument("--steps", type=int, default=100)
    sp.add_argument("--preset", default="tiny", choices=("tiny", "small", "full"))
    sp.add_argument("--batch-size", type=int, default=8)

    sp = add("train", cmd_train, "run one stage plan")
    sp.add_argument("--plan", required=True)

    sp = add("recipe", cmd_recipe, "run chained stage plans")
    sp.add_argument("--plans", required=True, nargs="+")

    sp = add("surgery", cmd_surgery, "reset the embedding of an archive for a new vocabulary")
    sp.add_argument("--in", dest="inp", required=True)
    sp.add_argument("--vocab", required=True, help="vocabulary file, or a manifest (.jsonl) to build one from")
    sp.add_argument("--out", required=True)

    sp = add("infer", cmd_infer, "synthesize a WAV from text")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--text", required=True)
    sp.add_argument("--vocoder", nargs="+", default=["griffinlim"], metavar="{flow CKPT,griffinlim}")
    sp.add_argument("--out", required=True)
    sp.add_argument("--align", default=None, help="also write the alignment PGM here")
    sp.add_argument("--mel", default=None, help="also write the spectrogram PGM here")
    sp.add_argument("--max-steps", type=int, default=None)
    sp.add_argument("--sigma", type=float, default=0.6)
    sp.add_argument("--scale", type=int, default=1)

    sp = add("plot-align", cmd_plot_align, "alignment heatmap as PGM")
    sp.add_argument("--matrix", default=None, help=".npy [decoder steps, text positions]")
    sp.add_argument("--ckpt", default=None)
    sp.add_argument("--text", default=None)
    sp.add_argument("--out", required=True)
    sp.add_argument("--scale", type=int, default=1)

    sp = add("plot-mel", cmd_plot_mel, "spectrogram heatmap as PGM from a WAV or MEL1 file")
    sp.add_argument("--input", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--scale", type=int, default=1)

    sp = add("mos-report", cmd_mos_report, "aggregate listener ratings")
    sp.add_argument("--ratings", required=True, help="CSV: utterance_id,listener_id,score,system")
    sp.add_argument("--out", default=None)

    sp = add("train-vocoder", cmd_train_vocoder, "train the flow vocoder on a manifest")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--steps", type=int, default=300)
    sp.add_argument("--lr", type=float, default=1e-3)
    sp.add_argument("--preset", default="default", choices=("default", "toy"))
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args.seed = getattr(args, "seed", None)
    args.quiet = getattr(args, "quiet", False)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
        force=True,
    )
    try:
        return args.fn(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingFailure as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except (*DATA_ERRORS, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
