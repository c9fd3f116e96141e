import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tts_transfer.acoustic import AcousticConfig, Tacotron2
from tts_transfer.archive import ParameterArchive
from tts_transfer.corpus import Manifest, build_demo_corpora
from tts_transfer.flow import FlowConfig
from tts_transfer.text import build_vocabulary, encode
from tts_transfer.training import (
    AdamState,
    FreezePolicy,
    FrozenParameterError,
    OptimizerSettings,
    PlanError,
    StagePlan,
    StopRule,
    VocabularyMismatchError,
    acoustic_archive,
    acoustic_from_archive,
    apply_freeze,
    bucketed_batches,
    check_chain,
    optimizer_step,
    run_recipe,
    run_stage,
    strategy_plans,
    surgery_reset_embedding,
    train_vocoder,
)


@pytest.fixture(scope="module")
def corpora(tmp_path_factory):
    return build_demo_corpora(tmp_path_factory.mktemp("corpora"), n_english=8, n_synthetic=8, n_target=4)


def small_vocab(n):
    """A vocabulary with exactly n entries (two specials plus n - 2 codepoints)."""
    return build_vocabulary(["".join(chr(0x4E00 + i) for i in range(n - 2))])


# -- optimizer -------------------------------------------------------------------------


def test_adam_first_step_example():
    p = {"w": np.array([0.5])}
    optimizer_step(p, {"w": np.array([1.0])}, OptimizerSettings(lr=1e-3), AdamState())
    assert p["w"][0] - 0.5 == pytest.approx(-1e-3 / (1 + 1e-6), rel=1e-12)


def test_zero_gradients_from_fresh_state_leave_parameters():
    p = {"w": np.arange(3.0)}
    st_ = AdamState()
    optimizer_step(p, {"w": np.zeros(3)}, OptimizerSettings(), st_)
    np.testing.assert_array_equal(p["w"], np.arange(3.0))


def test_zero_gradients_decay_moments():
    p = {"w": np.zeros(2)}
    s = AdamState()
    optimizer_step(p, {"w": np.array([0.3, -0.2])}, OptimizerSettings(), s)
    m, v = s.m["w"].copy(), s.v["w"].copy()
    optimizer_step(p, {"w": np.zeros(2)}, OptimizerSettings(), s)
    np.testing.assert_allclose(s.m["w"], 0.9 * m, rtol=1e-15)
    np.testing.assert_allclose(s.v["w"], 0.999 * v, rtol=1e-15)


def test_frozen_gradient_rejected():
    with pytest.raises(FrozenParameterError):
        optimizer_step({"a": np.zeros(1)}, {"a": np.ones(1)}, OptimizerSettings(), AdamState(), frozen={"a"})


def test_nan_gradient_rejects_step():
    p = {"a": np.ones(2), "b": np.ones(2)}
    s = AdamState()
    ok = optimizer_step(p, {"a": np.array([np.nan, 1.0]), "b": np.ones(2)}, OptimizerSettings(), s)
    assert not ok and s.rejected == 1 and s.step == 0
    np.testing.assert_array_equal(p["a"], np.ones(2))
    np.testing.assert_array_equal(p["b"], np.ones(2))


def test_global_norm_clipping():
    s = AdamState()
    optimizer_step({"a": np.zeros(2), "b": np.zeros(1)}, {"a": np.array([3.0, 4.0]), "b": np.array([0.0])}, OptimizerSettings(), s)
    # norm 5 is scaled to 1 before the first moment sees it
    np.testing.assert_allclose(s.m["a"], 0.1 * np.array([0.6, 0.8]))
    s2 = AdamState()
    optimizer_step({"a": np.zeros(2)}, {"a": np.array([0.3, 0.4])}, OptimizerSettings(), s2)
    np.testing.assert_allclose(s2.m["a"], 0.1 * np.array([0.3, 0.4]))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 8))
def test_freeze_law_under_random_gradients(seed, steps):
    rng = np.random.default_rng(seed)
    p = {f"encoder.{i}": rng.standard_normal(3) for i in range(3)} | {f"decoder.{i}": rng.standard_normal(3) for i in range(3)}
    before = {k: v.copy() for k, v in p.items()}
    frozen = FreezePolicy(("encoder.",)).resolve(p)
    s = AdamState()
    for _ in range(steps):
        grads = {k: rng.standard_normal(3) * 10 for k in p if k not in frozen}
        optimizer_step(p, grads, OptimizerSettings(lr=0.1), s, frozen)
    for k in frozen:
        assert p[k].tobytes() == before[k].tobytes()
    assert any(not np.array_equal(p[k], before[k]) for k in p if k not in frozen)


# -- freeze and surgery -------------------------------------------------------------------


def tiny_archive(n_symbols=12, seed=0, **cfg):
    vocab = small_vocab(n_symbols)
    model = Tacotron2(AcousticConfig.tiny(len(vocab), **cfg), seed=seed)
    return acoustic_archive(model, vocab, stage="english_pretrain", optimizer={"m": "dropped later"})


def test_freeze_policy_resolution():
    names = ["encoder.embedding", "encoder.conv.0.weight", "decoder.prenet.0.weight", "postnet.conv.0.weight"]
    assert FreezePolicy(("encoder.",)).resolve(names) == {"encoder.embedding", "encoder.conv.0.weight"}
    assert FreezePolicy().resolve(names) == frozenset()
    with pytest.raises(PlanError, match="encodr"):
        FreezePolicy(("encodr.",)).resolve(names)


def test_apply_freeze_flags():
    a = apply_freeze(tiny_archive(), FreezePolicy(("encoder.",)))
    params = [n for n in a.tensors if n not in a.metadata["buffers"]]
    for n in params:
        assert a.trainable(n) == (not n.startswith("encoder."))
    none = apply_freeze(a, FreezePolicy())
    assert all(none.trainable(n) for n in params)


def test_surgery_example_28_to_72():
    vocab = small_vocab(28)
    model = Tacotron2(AcousticConfig.tiny(28, embed_dim=512), seed=0)
    a = acoustic_archive(model, vocab)
    b = surgery_reset_embedding(a, small_vocab(72), seed=5)
    assert b["encoder.embedding"].shape == (72, 512)
    for n in a.tensors:
        if n != "encoder.embedding":
            assert b[n].tobytes() == a[n].tobytes() and b[n].dtype == a[n].dtype
    assert b.metadata["config"]["n_symbols"] == 72
    assert b.metadata["vocabulary_fingerprint"] == small_vocab(72).fingerprint
    c = surgery_reset_embedding(a, small_vocab(72), seed=5)
    assert c.to_bytes() == b.to_bytes()
    restored, v = acoustic_from_archive(b)
    assert restored.config.n_symbols == 72 and len(v) == 72


def test_surgery_same_vocabulary_still_reinitialises():
    a = tiny_archive()
    b = surgery_reset_embedding(a, small_vocab(12), seed=0)
    assert b["encoder.embedding"].shape == a["encoder.embedding"].shape
    assert not np.array_equal(b["encoder.embedding"], a["encoder.embedding"])
    assert "optimizer" not in b.metadata and "optimizer" in a.metadata


def test_surgery_rejects_missing_or_duplicate_embedding():
    a = tiny_archive()
    no_emb = ParameterArchive({k: v for k, v in a.tensors.items() if k != "encoder.embedding"}, a.metadata)
    with pytest.raises(PlanError, match="exactly one"):
        surgery_reset_embedding(no_emb, small_vocab(5))
    two = ParameterArchive({**a.tensors, "decoder.embedding": np.zeros((3, 4))}, a.metadata)
    with pytest.raises(PlanError, match="exactly one"):
        surgery_reset_embedding(two, small_vocab(5))


def test_archive_model_round_trip():
    vocab = small_vocab(9)
    m = Tacotron2(AcousticConfig.tiny(9), seed=3)
    for k, b in m.buffers.items():
        if k.endswith(".num_batches"):
            b[:] = 1
    a = acoustic_archive(m, vocab)
    m2, v2 = acoustic_from_archive(ParameterArchive.from_bytes(a.to_bytes()))
    assert v2 == vocab
    ids = np.array([[2, 3, 4, 1]])
    o1 = m.infer(ids, max_decoder_steps=5, prenet_dropout=False)
    o2 = m2.infer(ids, max_decoder_steps=5, prenet_dropout=False)
    np.testing.assert_array_equal(o1.mel_post.data, o2.mel_post.data)
    with pytest.raises(ValueError):
        acoustic_archive(m, small_vocab(10))


def test_archive_embedding_vocabulary_mismatch_rejected():
    a = tiny_archive()
    a.metadata["vocabulary"] = small_vocab(5).to_text()
    with pytest.raises(PlanError, match="rows"):
        acoustic_from_archive(a)


# -- plans ----------------------------------------------------------------------------


def test_plan_json_round_trip_and_relative_paths(tmp_path):
    plan = StagePlan("synthetic_pretrain", Path("b.jsonl"), Path("out/B.ttsf"), init_archive=Path("A.ttsf"),
                     surgery="reset_embedding", freeze=("encoder.",), stop=StopRule(max_steps=7, plateau_patience=3))
    (tmp_path / "p.json").write_text(plan.to_json())
    loaded = StagePlan.load(tmp_path / "p.json")
    assert loaded.manifest == tmp_path / "b.jsonl"
    assert loaded.init_archive == tmp_path / "A.ttsf"
    assert loaded.freeze == ("encoder.",) and loaded.stop.plateau_patience == 3
    assert loaded.settings == OptimizerSettings(lr=1e-3)
    assert json.loads(plan.to_json())["schema_version"] == 1


def test_plan_contract():
    with pytest.raises(PlanError):
        StagePlan("english_pretrain", Path("a"), Path("o"), init_archive=Path("x"))
    with pytest.raises(PlanError):
        StagePlan("synthetic_pretrain", Path("a"), Path("o"))
    with pytest.raises(PlanError):
        StagePlan("target_finetune", Path("a"), Path("o"))
    StagePlan("target_finetune", Path("a"), Path("o"), from_scratch=True)
    with pytest.raises(PlanError):
        StagePlan("stage_d", Path("a"), Path("o"))
    with pytest.raises(PlanError):
        StagePlan("target_finetune", Path("a"), Path("o"), init_archive=Path("x"), surgery="graft")
    assert StagePlan("target_finetune", Path("a"), Path("o"), from_scratch=True).settings.lr == 1e-4


def test_plan_schema_checks():
    with pytest.raises(PlanError, match="schema_version"):
        StagePlan.from_dict({"stage": "english_pretrain", "manifest": "a", "output": "b"})
    with pytest.raises(PlanError, match="unknown plan field"):
        StagePlan.from_dict({"schema_version": 1, "stage": "english_pretrain", "manifest": "a", "output": "b", "lr": 1})
    with pytest.raises(PlanError, match="required"):
        StagePlan.from_dict({"schema_version": 1, "stage": "english_pretrain"})


def test_bucketed_batches_cover_every_item_once():
    lengths = [5, 3, 9, 1, 7, 2, 8, 4, 6, 10, 11]
    batches = bucketed_batches(lengths, 4, np.random.default_rng(0))
    assert sorted(i for b in batches for i in b) == list(range(11))
    assert all(len(b) <= 4 for b in batches)
    spans = sorted((min(lengths[i] for i in b), max(lengths[i] for i in b)) for b in batches)
    assert all(hi < nxt_lo for (_, hi), (nxt_lo, _) in zip(spans, spans[1:]))
    assert batches == bucketed_batches(lengths, 4, np.random.default_rng(0))


def test_strategy_plans(tmp_path):
    ms = {"A": Path("a.jsonl"), "B": Path("b.jsonl"), "C": Path("c.jsonl")}
    c_only = strategy_plans("C-only", ms, tmp_path)
    assert [p.stage for p in c_only] == ["target_finetune"] and c_only[0].from_scratch
    ac = strategy_plans("A,C-full", ms, tmp_path)
    assert [p.surgery for p in ac] == ["none", "reset_embedding"] and ac[1].freeze == ()
    abc = strategy_plans("A,B,C-full", ms, tmp_path)
    assert [p.stage for p in abc] == ["english_pretrain", "synthetic_pretrain", "target_finetune"]
    assert [p.surgery for p in abc] == ["none", "reset_embedding", "none"]
    frozen = strategy_plans("A,B,C-frozen", ms, tmp_path)
    assert frozen[2].freeze == ("encoder.",)
    assert all(b.init_archive == a.output for a, b in zip(frozen, frozen[1:]))
    with pytest.raises(PlanError):
        strategy_plans("B-only", ms, tmp_path)


# -- stages -----------------------------------------------------------------------------


def plan_for(corpora, tmp_path, stage="english_pretrain", steps=4, **kw):
    manifest = {"english_pretrain": corpora.english, "synthetic_pretrain": corpora.synthetic, "target_finetune": corpora.target}[stage]
    return StagePlan(stage, manifest, tmp_path / f"{stage}.ttsf", stop=StopRule(max_steps=steps), batch_size=4, **kw)


def test_run_stage_outputs_and_report(corpora, tmp_path):
    plan = plan_for(corpora, tmp_path, checkpoint_every=2)
    a, report = run_stage(plan)
    assert report.steps == 4 and report.halt_reason == "max_steps"
    assert [s for s, _ in report.loss_curve] == [1, 2, 3, 4]
    assert ParameterArchive.load(plan.output).to_bytes() == a.to_bytes()
    saved = json.loads(plan.report_path.read_text())
    assert saved["archive_fingerprint"] == a.fingerprint
    assert a.metadata["provenance"] == [{"fingerprint": a.fingerprint, "stage": "english_pretrain", "steps": 4}]
    assert a.metadata["stage"] == "english_pretrain" and a.metadata["step"] == 4


def test_run_stage_is_deterministic(corpora, tmp_path):
    a1, r1 = run_stage(plan_for(corpora, tmp_path / "x"))
    a2, r2 = run_stage(plan_for(corpora, tmp_path / "y"))
    assert a1.to_bytes() == a2.to_bytes()
    assert r1.loss_curve == r2.loss_curve
    a3, _ = run_stage(replace(plan_for(corpora, tmp_path / "z"), seed=1))
    assert a3.fingerprint != a1.fingerprint


def test_frozen_finetune_report_has_no_encoder_deltas(corpora, tmp_path):
    a, _ = run_stage(plan_for(corpora, tmp_path, steps=2))
    b_plan = plan_for(corpora, tmp_path, "synthetic_pretrain", steps=2, init_archive=tmp_path / "english_pretrain.ttsf", surgery="reset_embedding")
    b, _ = run_stage(b_plan)
    c_plan = plan_for(corpora, tmp_path, "target_finetune", steps=3, init_archive=b_plan.output, freeze=("encoder.",))
    c, report = run_stage(c_plan)
    groups = report.parameter_deltas["groups"]
    assert groups["encoder."]["changed"] == 0 and groups["encoder."]["max_abs_delta"] == 0.0
    assert groups["decoder."]["changed"] > 0
    assert report.parameter_deltas["frozen_changed"] == 0
    for n in c.tensors:
        if n.startswith("encoder.") and n not in c.metadata["buffers"]:
            assert c[n].tobytes() == b[n].tobytes()
    # batch-norm statistics in a frozen encoder stay put as well
    for n in c.metadata["buffers"]:
        if n.startswith("encoder."):
            assert c[n].tobytes() == b[n].tobytes()
    assert [p["stage"] for p in c.metadata["provenance"]] == ["english_pretrain", "synthetic_pretrain", "target_finetune"]


def test_script_change_without_surgery_rejected_before_training(corpora, tmp_path):
    run_stage(plan_for(corpora, tmp_path, steps=1))
    bad = plan_for(corpora, tmp_path, "synthetic_pretrain", init_archive=tmp_path / "english_pretrain.ttsf")
    with pytest.raises(VocabularyMismatchError, match="reset_embedding"):
        run_stage(bad)
    assert not bad.output.exists()


def test_uncovered_codepoint_rejected(corpora, tmp_path):
    run_stage(plan_for(corpora, tmp_path, steps=1))
    m = Manifest.load(corpora.english)
    m.entries[0] = replace(m.entries[0], text=m.entries[0].text + "q")
    m.save(tmp_path / "extra" / "english.jsonl")
    for e in m.entries:
        dst = tmp_path / "extra" / e.audio
        dst.parent.mkdir(parents=True, exist_ok=True)
        dst.write_bytes((Path(corpora.english).parent / e.audio).read_bytes())
    vocab = build_vocabulary(Manifest.load(corpora.english).texts)
    plan = StagePlan("target_finetune", tmp_path / "extra" / "english.jsonl", tmp_path / "c.ttsf",
                     init_archive=tmp_path / "english_pretrain.ttsf", stop=StopRule(max_steps=1))
    if "q" in vocab:
        pytest.skip("the sampled English texts already contain 'q'")
    with pytest.raises(VocabularyMismatchError, match="'q'"):
        check_chain([plan])


def test_recipe_rejects_broken_chain(corpora, tmp_path):
    plans = strategy_plans("A,B,C-full", {"A": corpora.english, "B": corpora.synthetic, "C": corpora.target}, tmp_path, steps={"A": 1, "B": 1, "C": 1})
    broken = [plans[0], plans[1], replace(plans[2], init_archive=plans[0].output)]
    with pytest.raises(PlanError, match="broken chain"):
        run_recipe(broken)
    assert not plans[0].output.exists()
    no_surgery = [plans[0], replace(plans[1], surgery="none"), plans[2]]
    with pytest.raises(VocabularyMismatchError):
        run_recipe(no_surgery)
    assert not plans[0].output.exists()


def test_c_only_flags_non_convergence(corpora, tmp_path):
    (plan,) = strategy_plans("C-only", {"C": corpora.target}, tmp_path, steps={"C": 5}, converge_below=0.5)
    _, report = run_stage(plan)
    assert report.converged is False


def test_plateau_stop_rule(corpora, tmp_path):
    plan = replace(plan_for(corpora, tmp_path, steps=50), stop=StopRule(max_steps=50, plateau_patience=2, plateau_min_delta=100.0, smoothing=1))
    _, report = run_stage(plan, write=False)
    assert report.halt_reason == "plateau" and report.steps == 3


# -- vocoder --------------------------------------------------------------------------


def test_train_vocoder_stays_invertible(corpora):
    m = Manifest.load(corpora.target)
    model, curve = train_vocoder(m, FlowConfig.toy(), steps=5, batch_size=2, segment=384)
    assert len(curve) == 5 and all(np.isfinite(v) for _, v in curve)
    rng = np.random.default_rng(0)
    x = rng.uniform(-0.5, 0.5, (1, 384))
    mel = rng.normal(-5, 1, (1, 2, 80))
    z, _ = model.forward(x, mel)
    assert np.max(np.abs(model.inverse(z, mel) - x)) <= 1e-8


def test_encode_of_demo_target_is_covered_by_synthetic_vocabulary(corpora):
    v = build_vocabulary(Manifest.load(corpora.synthetic).texts)
    for t in Manifest.load(corpora.target).texts:
        assert encode(t, v).dropped == 0
