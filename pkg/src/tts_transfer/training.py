"""Stage orchestration for low-resource transfer: pretrain on a large corpus,
continue on synthetic target-script data, fine-tune on the small target set.

The pieces are deliberately separable: the optimizer, freeze policies and
embedding surgery act on plain name -> array maps, ``run_stage`` wires them
to a manifest and a model, and ``run_recipe`` chains stages.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from . import audio as A
from .acoustic import AcousticConfig, Tacotron2, init_embedding
from .archive import ParameterArchive, _dump_json
from .corpus import Manifest
from .flow import FlowConfig, FlowVocoder
from .text import PAD, Vocabulary, build_vocabulary, encode

log = logging.getLogger(__name__)

STAGES = ("english_pretrain", "synthetic_pretrain", "target_finetune")
SCHEMA_VERSION = 1


class PlanError(ValueError):
    """A plan (or chain of plans) violates its contract; raised before any training."""


class VocabularyMismatchError(PlanError):
    pass


class FrozenParameterError(RuntimeError):
    pass


# -- optimizer --------------------------------------------------------------------------


@dataclass(frozen=True)
class OptimizerSettings:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-6
    grad_clip: float = 1.0

    @classmethod
    def for_stage(cls, stage: str) -> "OptimizerSettings":
        return cls(lr=1e-3 if stage != "target_finetune" else 1e-4)


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    rejected: int = 0


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))


def optimizer_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    settings: OptimizerSettings,
    state: AdamState,
    frozen: Iterable[str] = (),
) -> bool:
    """One clipped Adam update, in place. Returns False when the step is rejected.

    A non-finite gradient rejects the whole step (``state.rejected`` counts these);
    a gradient for a frozen parameter is a contract violation and raises.
    """
    frozen = set(frozen)
    bad = sorted(frozen.intersection(grads))
    if bad:
        raise FrozenParameterError(f"gradient supplied for frozen parameter(s): {', '.join(bad[:5])}")
    unknown = sorted(set(grads) - set(params))
    if unknown:
        raise KeyError(f"gradient for unknown parameter(s): {', '.join(unknown[:5])}")
    if not all(np.isfinite(g).all() for g in grads.values()):
        state.rejected += 1
        log.warning("non-finite gradient, step rejected (%d so far)", state.rejected)
        return False
    norm = global_norm(grads)
    scale = settings.grad_clip / norm if settings.grad_clip and norm > settings.grad_clip else 1.0
    state.step += 1
    t = state.step
    b1, b2 = settings.beta1, settings.beta2
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    for name, p in params.items():
        if name in frozen:
            continue
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        elif scale != 1.0:
            g = g * scale
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        p -= settings.lr * (m / c1) / (np.sqrt(v / c2) + settings.eps)
    return True


# -- freezing and surgery -----------------------------------------------------------------


@dataclass(frozen=True)
class FreezePolicy:
    prefixes: tuple[str, ...] = ()

    def resolve(self, names: Iterable[str]) -> frozenset[str]:
        names = list(names)
        out = set()
        for prefix in self.prefixes:
            hit = [n for n in names if n.startswith(prefix)]
            if not hit:
                raise PlanError(f"freeze prefix {prefix!r} matches no parameter")
            out.update(hit)
        return frozenset(out)


def _parameter_names(a: ParameterArchive) -> list[str]:
    buffers = set(a.metadata.get("buffers", ()))
    return [n for n in a.tensors if n not in buffers]


def apply_freeze(a: ParameterArchive, policy: FreezePolicy) -> ParameterArchive:
    frozen = policy.resolve(_parameter_names(a))
    meta = json.loads(_dump_json(a.metadata))
    meta["frozen"] = sorted(frozen)
    return ParameterArchive(dict(a.tensors), meta)


def _embedding_name(a: ParameterArchive) -> str:
    hits = [n for n in a.tensors if n.rsplit(".", 1)[-1] == "embedding"]
    if len(hits) != 1:
        raise PlanError(f"archive must hold exactly one embedding tensor, found {hits or 'none'}")
    return hits[0]


def surgery_reset_embedding(a: ParameterArchive, vocab: Vocabulary, seed: int = 0) -> ParameterArchive:
    """New archive whose embedding is re-drawn for ``vocab``; every other tensor is copied verbatim."""
    name = _embedding_name(a)
    old = a.tensors[name]
    if old.ndim != 2:
        raise PlanError(f"{name} has rank {old.ndim}, expected 2")
    tensors = {}
    for k, arr in a.tensors.items():
        if k == name:
            # own stream, so seed s never replays the embedding drawn by init_parameters(seed=s)
            tensors[k] = init_embedding(np.random.default_rng([seed, 3]), len(vocab), old.shape[1]).astype(old.dtype)
        else:
            tensors[k] = arr.copy()
    meta = json.loads(_dump_json(a.metadata))
    meta.pop("optimizer", None)
    meta["vocabulary"] = vocab.to_text()
    meta["vocabulary_fingerprint"] = vocab.fingerprint
    if "config" in meta:
        meta["config"]["n_symbols"] = len(vocab)
        meta["config_fingerprint"] = _digest(meta["config"])
    meta["surgery"] = {"op": "reset_embedding", "seed": seed, "previous_fingerprint": a.fingerprint}
    return ParameterArchive(tensors, meta)


# -- archives <-> models ----------------------------------------------------------------


def _digest(obj) -> str:
    return hashlib.sha256(_dump_json(obj)).hexdigest()[:16]


def acoustic_archive(model: Tacotron2, vocab: Vocabulary, **meta) -> ParameterArchive:
    if len(vocab) != model.config.n_symbols:
        raise ValueError(f"vocabulary has {len(vocab)} entries but the model embeds {model.config.n_symbols}")
    tensors = {k: t.data.copy() for k, t in model.params.items()}
    tensors.update({k: v.copy() for k, v in model.buffers.items()})
    cfg = model.config.to_dict()
    metadata = {
        "kind": "acoustic",
        "config": cfg,
        "config_fingerprint": _digest(cfg),
        "vocabulary": vocab.to_text(),
        "vocabulary_fingerprint": vocab.fingerprint,
        "buffers": sorted(model.buffers),
        "frozen": [],
    }
    metadata.update(meta)
    return ParameterArchive(tensors, metadata)


def acoustic_from_archive(a: ParameterArchive) -> tuple[Tacotron2, Vocabulary]:
    if a.metadata.get("kind") != "acoustic":
        raise PlanError(f"archive holds a {a.metadata.get('kind')!r} model, not an acoustic one")
    cfg = AcousticConfig.from_dict(a.metadata["config"])
    vocab = Vocabulary.from_text(a.metadata["vocabulary"])
    emb = a.tensors[_embedding_name(a)]
    if emb.shape[0] != len(vocab):
        raise PlanError(f"embedding has {emb.shape[0]} rows but the vocabulary has {len(vocab)} entries")
    buffers = set(a.metadata.get("buffers", ()))
    params = {k: v.astype(np.float64) for k, v in a.tensors.items() if k not in buffers}
    bufs = {k: a.tensors[k].astype(np.float64) for k in buffers}
    return Tacotron2(cfg, params, bufs), vocab


def vocoder_archive(model: FlowVocoder, **meta) -> ParameterArchive:
    cfg = model.config.to_dict()
    metadata = {"kind": "vocoder", "config": cfg, "config_fingerprint": _digest(cfg), "frozen": []}
    metadata.update(meta)
    return ParameterArchive({k: t.data.copy() for k, t in model.params.items()}, metadata)


def vocoder_from_archive(a: ParameterArchive) -> FlowVocoder:
    if a.metadata.get("kind") != "vocoder":
        raise PlanError(f"archive holds a {a.metadata.get('kind')!r} model, not a vocoder")
    return FlowVocoder(FlowConfig.from_dict(a.metadata["config"]), {k: v.astype(np.float64) for k, v in a.tensors.items()})


# -- plans ----------------------------------------------------------------------------


@dataclass(frozen=True)
class StopRule:
    max_steps: int = 100
    plateau_patience: int | None = None  # steps without improvement of the smoothed loss
    plateau_min_delta: float = 0.0
    smoothing: int = 10
    converge_below: float | None = None  # report flag only

    def __post_init__(self):
        if self.max_steps < 1:
            raise PlanError("stop.max_steps must be >= 1")


@dataclass(frozen=True)
class StagePlan:
    stage: str
    manifest: Path
    output: Path
    init_archive: Path | None = None
    surgery: str = "none"
    freeze: tuple[str, ...] = ()
    optimizer: OptimizerSettings | None = None
    stop: StopRule = StopRule()
    seed: int = 0
    batch_size: int = 8
    checkpoint_every: int = 0
    model: dict = field(default_factory=lambda: {"preset": "tiny"})
    from_scratch: bool = False
    report: Path | None = None

    def __post_init__(self):
        if self.stage not in STAGES:
            raise PlanError(f"unknown stage {self.stage!r}; expected one of {STAGES}")
        if self.surgery not in ("none", "reset_embedding"):
            raise PlanError(f"unknown surgery directive {self.surgery!r}")
        if self.stage == "english_pretrain" and self.init_archive is not None:
            raise PlanError("english_pretrain starts from scratch and takes no init archive")
        if self.stage != "english_pretrain" and self.init_archive is None and not (
            self.stage == "target_finetune" and self.from_scratch
        ):
            raise PlanError(f"{self.stage} needs an init archive (target_finetune may set from_scratch)")
        if self.init_archive is None and self.surgery != "none":
            raise PlanError("surgery needs an init archive")
        if self.batch_size < 1:
            raise PlanError("batch_size must be >= 1")

    @property
    def settings(self) -> OptimizerSettings:
        return self.optimizer or OptimizerSettings.for_stage(self.stage)

    @property
    def report_path(self) -> Path:
        return self.report or self.output.with_name(self.output.name + ".report.json")

    def to_json(self) -> str:
        d = {
            "schema_version": SCHEMA_VERSION,
            "stage": self.stage,
            "manifest": str(self.manifest),
            "output": str(self.output),
            "init_archive": None if self.init_archive is None else str(self.init_archive),
            "surgery": self.surgery,
            "freeze": list(self.freeze),
            "optimizer": asdict(self.settings),
            "stop": asdict(self.stop),
            "seed": self.seed,
            "batch_size": self.batch_size,
            "checkpoint_every": self.checkpoint_every,
            "model": self.model,
            "from_scratch": self.from_scratch,
            "report": None if self.report is None else str(self.report),
        }
        return json.dumps(d, indent=2, sort_keys=True, ensure_ascii=False) + "\n"

    @classmethod
    def from_dict(cls, d: dict, base: Path | None = None) -> "StagePlan":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise PlanError(f"unsupported plan schema_version {d.get('schema_version')!r} (expected {SCHEMA_VERSION})")
        known = {"schema_version", "stage", "manifest", "output", "init_archive", "surgery", "freeze", "optimizer",
                 "stop", "seed", "batch_size", "checkpoint_every", "model", "from_scratch", "report"}
        extra = sorted(set(d) - known)
        if extra:
            raise PlanError(f"unknown plan field(s): {', '.join(extra)}")
        for key in ("stage", "manifest", "output"):
            if key not in d:
                raise PlanError(f"plan lacks required field {key!r}")

        def path(v):
            if v is None:
                return None
            p = Path(v)
            return p if p.is_absolute() or base is None else base / p

        try:
            return cls(
                stage=d["stage"],
                manifest=path(d["manifest"]),
                output=path(d["output"]),
                init_archive=path(d.get("init_archive")),
                surgery=d.get("surgery", "none"),
                freeze=tuple(d.get("freeze", ())),
                optimizer=None if d.get("optimizer") is None else OptimizerSettings(**d["optimizer"]),
                stop=StopRule(**d.get("stop", {})),
                seed=int(d.get("seed", 0)),
                batch_size=int(d.get("batch_size", 8)),
                checkpoint_every=int(d.get("checkpoint_every", 0)),
                model=d.get("model", {"preset": "tiny"}),
                from_scratch=bool(d.get("from_scratch", False)),
                report=path(d.get("report")),
            )
        except TypeError as exc:
            raise PlanError(f"malformed plan: {exc}") from exc

    @classmethod
    def load(cls, path) -> "StagePlan":
        path = Path(path)
        try:
            d = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise PlanError(f"{path}: {exc}") from exc
        return cls.from_dict(d, path.parent)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")


def model_config(spec: dict, n_symbols: int) -> AcousticConfig:
    spec = dict(spec)
    preset = spec.pop("preset", None)
    if preset is None:
        return AcousticConfig(**{**spec, "n_symbols": n_symbols})
    makers = {"tiny": AcousticConfig.tiny, "small": AcousticConfig.small, "full": lambda n, **kw: AcousticConfig(n_symbols=n, **kw)}
    if preset not in makers:
        raise PlanError(f"unknown model preset {preset!r}")
    return makers[preset](n_symbols, **spec)


# -- data -----------------------------------------------------------------------------


@dataclass
class Utterance:
    ids: np.ndarray
    mel: np.ndarray  # [frames, n_mels]


def load_utterances(manifest: Manifest, vocab: Vocabulary) -> list[Utterance]:
    out = []
    for e in manifest.entries:
        wav = A.load_wav(manifest.audio_path(e))
        out.append(Utterance(encode(e.text, vocab).ids, A.mel_spectrogram(wav).values))
    return out


def bucketed_batches(lengths: Sequence[int], batch_size: int, rng: np.random.Generator) -> list[list[int]]:
    """One epoch: shuffle, bucket by length (stable, so ties stay shuffled), shuffle the buckets."""
    order = sorted(rng.permutation(len(lengths)).tolist(), key=lambda i: lengths[i])
    chunks = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
    return [chunks[j] for j in rng.permutation(len(chunks))]


def collate(items: Sequence[Utterance]):
    T = max(len(u.ids) for u in items)
    S = max(u.mel.shape[0] for u in items)
    M = items[0].mel.shape[1]
    ids = np.full((len(items), T), PAD, dtype=np.int64)
    mel = np.zeros((len(items), S, M))
    for i, u in enumerate(items):
        ids[i, : len(u.ids)] = u.ids
        mel[i, : u.mel.shape[0]] = u.mel
    return ids, np.array([len(u.ids) for u in items]), mel, np.array([u.mel.shape[0] for u in items])


# -- acoustic training --------------------------------------------------------------------


class AcousticTrainer:
    """Teacher-forced training with clipped Adam; frozen parameters never receive updates.

    When every ``encoder.`` parameter is frozen the encoder also runs in eval
    mode, so its batch-norm statistics stay fixed as well.
    """

    def __init__(self, model: Tacotron2, settings: OptimizerSettings, frozen: Iterable[str] = (), seed: int = 0):
        self.model = model
        self.settings = settings
        self.frozen = frozenset(frozen)
        self.state = AdamState()
        self.rng = np.random.default_rng([seed, 1])
        enc = [n for n in model.params if n.startswith("encoder.")]
        self.encoder_training = not all(n in self.frozen for n in enc)
        model.set_trainable(lambda n: n not in self.frozen)

    def step(self, ids, text_lengths, mel, mel_lengths) -> dict[str, float]:
        m = self.model
        m.zero_grad()
        out = m.forward_teacher_forced(
            ids, mel, text_lengths, mel_lengths, training=True, rng=self.rng, encoder_training=self.encoder_training
        )
        loss, parts = m.loss(out, mel, mel_lengths)
        loss.backward()
        grads = {n: t.grad for n, t in m.params.items() if t.grad is not None and n not in self.frozen}
        arrays = {n: t.data for n, t in m.params.items()}
        parts["applied"] = optimizer_step(arrays, grads, self.settings, self.state, self.frozen)
        return parts


@dataclass
class StageReport:
    stage: str
    steps: int
    halt_reason: str
    loss_curve: list[tuple[int, float]]
    final_loss: float
    converged: bool | None
    rejected_steps: int
    frozen: list[str]
    parameter_deltas: dict
    vocabulary_fingerprint: str
    archive_fingerprint: str
    surgery: str

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def _delta_summary(before: dict[str, np.ndarray], after: dict[str, np.ndarray], frozen: frozenset[str]) -> dict:
    groups: dict[str, dict] = {}
    frozen_changed = 0
    for name, old in before.items():
        d = float(np.max(np.abs(after[name] - old))) if old.size else 0.0
        changed = not np.array_equal(after[name], old)
        g = groups.setdefault(name.split(".", 1)[0] + ".", {"tensors": 0, "changed": 0, "max_abs_delta": 0.0})
        g["tensors"] += 1
        g["changed"] += int(changed)
        g["max_abs_delta"] = max(g["max_abs_delta"], d)
        frozen_changed += int(changed and name in frozen)
    return {"groups": groups, "frozen_changed": frozen_changed}


def _file_digest(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def prepare_stage(plan: StagePlan) -> tuple[Tacotron2, Vocabulary, Manifest, ParameterArchive | None, list]:
    """Everything up to the first step; every contract check happens here."""
    manifest = Manifest.load(plan.manifest)
    texts = manifest.texts
    provenance: list = []
    init = None
    if plan.init_archive is None:
        vocab = build_vocabulary(texts, manifest.script)
        model = Tacotron2(model_config(plan.model, len(vocab)), seed=plan.seed)
    else:
        init = ParameterArchive.load(plan.init_archive)
        provenance = list(init.metadata.get("provenance", []))
        old_vocab = Vocabulary.from_text(init.metadata["vocabulary"])
        vocab = _stage_vocabulary(plan, old_vocab, manifest)
        if plan.surgery == "reset_embedding":
            init = surgery_reset_embedding(init, vocab, plan.seed)
        model, _ = acoustic_from_archive(init)
    return model, vocab, manifest, init, provenance


def run_stage(plan: StagePlan, write: bool = True) -> tuple[ParameterArchive, StageReport]:
    model, vocab, manifest, init, provenance = prepare_stage(plan)
    frozen = FreezePolicy(plan.freeze).resolve(model.params)
    data = load_utterances(manifest, vocab)
    trainer = AcousticTrainer(model, plan.settings, frozen, plan.seed)
    before = {k: t.data.copy() for k, t in model.params.items()}
    batch_rng = np.random.default_rng([plan.seed, 0])
    lengths = [len(u.ids) for u in data]
    stop = plan.stop

    def archive(steps: int) -> ParameterArchive:
        a = acoustic_archive(
            model, vocab, stage=plan.stage, step=steps, seed=plan.seed, frozen=sorted(frozen),
            manifest_fingerprint=_file_digest(plan.manifest),
            init_fingerprint=None if init is None else init.fingerprint,
        )
        a.metadata["provenance"] = provenance + [{"stage": plan.stage, "fingerprint": a.fingerprint, "steps": steps}]
        return a

    def epochs() -> Iterator[list[int]]:
        while True:
            yield from bucketed_batches(lengths, plan.batch_size, batch_rng)

    curve: list[tuple[int, float]] = []
    best, best_step = math.inf, 0
    halt = "max_steps"
    step = 0
    for step, idx in zip(range(1, stop.max_steps + 1), epochs()):
        parts = trainer.step(*collate([data[i] for i in idx]))
        curve.append((step, parts["total"]))
        if step % 10 == 0 or step == 1:
            log.info("%s step %d loss %.4f", plan.stage, step, parts["total"])
        if write and plan.checkpoint_every and step % plan.checkpoint_every == 0:
            archive(step).save(plan.output)
        if stop.plateau_patience:
            smooth = float(np.mean([v for _, v in curve[-stop.smoothing :]]))
            if smooth < best - stop.plateau_min_delta:
                best, best_step = smooth, step
            elif step - best_step >= stop.plateau_patience:
                halt = "plateau"
                break

    final = float(np.mean([v for _, v in curve[-stop.smoothing :]]))
    result = archive(step)
    after = {k: t.data for k, t in model.params.items()}
    report = StageReport(
        stage=plan.stage,
        steps=step,
        halt_reason=halt,
        loss_curve=curve,
        final_loss=final,
        converged=None if stop.converge_below is None else final < stop.converge_below,
        rejected_steps=trainer.state.rejected,
        frozen=sorted(frozen),
        parameter_deltas=_delta_summary(before, after, frozen),
        vocabulary_fingerprint=vocab.fingerprint,
        archive_fingerprint=result.fingerprint,
        surgery=plan.surgery,
    )
    if report.converged is False:
        log.warning("%s did not converge: smoothed loss %.4f >= %.4f", plan.stage, final, stop.converge_below)
    if write:
        result.save(plan.output)
        plan.report_path.parent.mkdir(parents=True, exist_ok=True)
        plan.report_path.write_text(report.to_json(), encoding="utf-8")
    return result, report


def _stage_vocabulary(plan: StagePlan, inherited: Vocabulary | None, manifest: Manifest) -> Vocabulary:
    """The vocabulary a stage will train with, or VocabularyMismatchError if it cannot start."""
    if inherited is None or plan.surgery == "reset_embedding":
        return build_vocabulary(manifest.texts, manifest.script)
    missing = sorted(inherited.missing(manifest.texts))
    if missing:
        raise VocabularyMismatchError(
            f"{len(missing)} codepoint(s) of {plan.manifest} are outside the init archive's vocabulary "
            f"({', '.join(f'{c!r} (U+{ord(c):04X})' for c in missing[:10])}{', ...' if len(missing) > 10 else ''}); "
            "this transition needs surgery 'reset_embedding'"
        )
    if inherited.script != manifest.script:
        raise VocabularyMismatchError(
            f"script changes from {inherited.script} to {manifest.script}; this transition needs surgery 'reset_embedding'"
        )
    return inherited


def check_chain(plans: Sequence[StagePlan]) -> None:
    """Static recipe check: the chain links up and every vocabulary transition is legal."""
    if not plans:
        raise PlanError("empty recipe")
    for prev, nxt in zip(plans, plans[1:]):
        if nxt.init_archive is None or Path(nxt.init_archive).resolve() != Path(prev.output).resolve():
            raise PlanError(f"broken chain: {nxt.stage} does not start from {prev.stage}'s output {prev.output}")
    vocab = None
    if plans[0].init_archive is not None:
        if not Path(plans[0].init_archive).exists():
            raise PlanError(f"init archive {plans[0].init_archive} does not exist")
        vocab = Vocabulary.from_text(ParameterArchive.load(plans[0].init_archive).metadata["vocabulary"])
    for plan in plans:
        vocab = _stage_vocabulary(plan, vocab, Manifest.load(plan.manifest))


def run_recipe(plans: Sequence[StagePlan]) -> tuple[ParameterArchive, list[StageReport]]:
    """Run chained stages in order; the chain is checked before anything trains."""
    check_chain(plans)
    reports = []
    result = None
    for plan in plans:
        result, report = run_stage(plan)
        reports.append(report)
    return result, reports


STRATEGIES = ("C-only", "A,C-full", "A,B,C-full", "A,B,C-frozen")


def strategy_plans(
    name: str,
    manifests: dict[str, Path],
    workdir: Path,
    steps: dict[str, int] | None = None,
    seed: int = 0,
    model: dict | None = None,
    batch_size: int = 8,
    converge_below: float | None = None,
) -> list[StagePlan]:
    """Plan lists for the four training strategies.

    ``manifests`` maps "A" (English), "B" (synthetic target script) and "C"
    (target speaker) to manifest paths.
    """
    if name not in STRATEGIES:
        raise PlanError(f"unknown strategy {name!r}; expected one of {STRATEGIES}")
    steps = {"A": 100, "B": 100, "C": 100, **(steps or {})}
    model = model or {"preset": "tiny"}
    workdir = Path(workdir)
    stage_of = {"A": "english_pretrain", "B": "synthetic_pretrain", "C": "target_finetune"}
    letters = name.split("-")[0].split(",")
    plans: list[StagePlan] = []
    prev_out: Path | None = None
    prev_letter: str | None = None
    for letter in letters:
        out = workdir / f"{letter}.ttsf"
        surgery = "reset_embedding" if prev_letter == "A" else "none"
        freeze = ("encoder.",) if letter == "C" and name.endswith("frozen") else ()
        plans.append(
            StagePlan(
                stage=stage_of[letter],
                manifest=Path(manifests[letter]),
                output=out,
                init_archive=prev_out,
                surgery=surgery,
                freeze=freeze,
                stop=StopRule(max_steps=steps[letter], converge_below=converge_below),
                seed=seed,
                batch_size=batch_size,
                model=model,
                from_scratch=prev_out is None and letter == "C",
            )
        )
        prev_out, prev_letter = out, letter
    return plans


# -- vocoder training -------------------------------------------------------------------


def vocoder_segments(manifest: Manifest, segment: int, hop: int = A.DEFAULT_AUDIO.hop_length) -> list[tuple[np.ndarray, np.ndarray]]:
    """(audio trimmed to whole frames, mel) pairs long enough for one segment."""
    need = -(-segment // hop)
    out = []
    for e in manifest.entries:
        wav = A.load_wav(manifest.audio_path(e))
        mel = A.mel_spectrogram(wav).values
        if mel.shape[0] >= need:
            out.append((wav.samples[: mel.shape[0] * hop], mel))
    if not out:
        raise PlanError(f"no utterance is long enough for {segment}-sample segments")
    return out


def train_vocoder(
    manifest: Manifest,
    config: FlowConfig = FlowConfig(),
    steps: int = 300,
    seed: int = 0,
    settings: OptimizerSettings = OptimizerSettings(),
    batch_size: int = 4,
    segment: int = 1024,
    vocoder: FlowVocoder | None = None,
    on_step=None,
) -> tuple[FlowVocoder, list[tuple[int, float]]]:
    """Maximum-likelihood training on random frame-aligned segments."""
    hop = config.hop_length
    if segment % config.n_group:
        raise PlanError("segment must be a multiple of n_group")
    data = vocoder_segments(manifest, segment, hop)
    need = -(-segment // hop)
    model = vocoder or FlowVocoder(config, seed=seed)
    rng = np.random.default_rng([seed, 2])
    state = AdamState()
    curve = []
    for step in range(1, steps + 1):
        xs, ms = [], []
        for i in rng.integers(0, len(data), batch_size):
            x, mel = data[i]
            f0 = int(rng.integers(0, mel.shape[0] - need + 1))
            xs.append(x[f0 * hop : f0 * hop + segment])
            ms.append(mel[f0 : f0 + need])
        model.zero_grad()
        loss = model.loss(np.stack(xs), np.stack(ms))
        loss.backward()
        grads = {n: t.grad for n, t in model.params.items() if t.grad is not None}
        optimizer_step({n: t.data for n, t in model.params.items()}, grads, settings, state)
        model.check_invertible()
        curve.append((step, loss.item()))
        if on_step is not None:
            on_step(step, model)
        if step % 50 == 0 or step == 1:
            log.info("vocoder step %d nll %.4f", step, loss.item())
    return model, curve
