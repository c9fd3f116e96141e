import hashlib
import threading
import wave

import numpy as np
import pytest

from tts_transfer.audio import SAMPLE_RATE, Waveform, load_wav, save_wav
from tts_transfer.corpus import (
    CorpusError,
    HttpClient,
    Manifest,
    StubClient,
    SynthesisError,
    build_demo_corpora,
    generate_synthetic,
    ingest,
    sample_texts,
    serve_stub,
    stub_tts,
    synthesize_with_retry,
    validate,
)
from tts_transfer.text import build_vocabulary


def write_stereo(path, rate, seconds=0.25):
    t = np.arange(int(rate * seconds)) / rate
    left = (0.5 * np.sin(2 * np.pi * 300 * t) * 32767).astype("<i2")
    right = (0.1 * np.sin(2 * np.pi * 500 * t) * 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(2)
        w.setsampwidth(2)
        w.setframerate(rate)
        w.writeframes(np.stack([left, right], axis=1).tobytes())


@pytest.fixture
def raw_corpus(tmp_path):
    raw = tmp_path / "raw"
    raw.mkdir()
    write_stereo(raw / "one.wav", 22050)
    save_wav(raw / "two.wav", Waveform(np.zeros(1600), SAMPLE_RATE))
    (raw / "bad.wav").write_bytes(b"RIFF\x00\x00garbage")
    tsv = tmp_path / "transcripts.tsv"
    tsv.write_text("one.wav\tनमस्ते   दुनिया\nbad.wav\tटूटा\ntwo.wav\tचुप\nthree.wav\t\n", encoding="utf-8")
    return raw, tsv


def digest_tree(root):
    return {p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(root.rglob("*")) if p.is_file()}


def test_ingest_filters_and_canonicalises(raw_corpus, tmp_path):
    raw, tsv = raw_corpus
    m = ingest(raw, tsv, tmp_path / "out", corpus="target")
    assert len(m) == 2
    assert [s["audio"] for s in m.skipped] == ["bad.wav", "three.wav"]
    assert m.entries[0].text == "नमस्ते दुनिया"
    assert m.entries[0].audio == "prepared/target/00000.wav" and m.entries[1].audio == "prepared/target/00001.wav"
    assert m.script == "devanagari"
    with wave.open(str(tmp_path / "out" / m.entries[0].audio)) as w:
        assert (w.getframerate(), w.getsampwidth(), w.getnchannels()) == (16000, 2, 1)
        assert abs(w.getnframes() - 4000) <= 1
    assert m.entries[0].duration == pytest.approx(0.25, abs=1e-3)


def test_ingest_is_idempotent(raw_corpus, tmp_path):
    raw, tsv = raw_corpus
    m1 = ingest(raw, tsv, tmp_path / "a", corpus="target")
    m1.save(tmp_path / "a" / "target.jsonl")
    before = digest_tree(tmp_path / "a")
    m2 = ingest(raw, tsv, tmp_path / "a", corpus="target")
    assert m2.to_jsonl() == m1.to_jsonl()
    assert digest_tree(tmp_path / "a") == before
    # re-ingesting the prepared output reproduces it
    prepared = tmp_path / "a"
    tsv2 = tmp_path / "again.tsv"
    tsv2.write_text("".join(f"{e.audio}\t{e.text}\n" for e in m1.entries), encoding="utf-8")
    m3 = ingest(prepared, tsv2, tmp_path / "b", corpus="target")
    assert m3.to_jsonl() == m1.to_jsonl()
    for e1, e3 in zip(m1.entries, m3.entries):
        assert (tmp_path / "a" / e1.audio).read_bytes() == (tmp_path / "b" / e3.audio).read_bytes()


def test_ingest_with_nothing_usable(tmp_path):
    (tmp_path / "t.tsv").write_text("missing.wav\thello\n", encoding="utf-8")
    with pytest.raises(CorpusError):
        ingest(tmp_path, tmp_path / "t.tsv", tmp_path / "o", corpus="x")


def test_manifest_round_trip(raw_corpus, tmp_path):
    raw, tsv = raw_corpus
    m = ingest(raw, tsv, tmp_path / "out", corpus="target")
    m.save(tmp_path / "out" / "target.jsonl")
    back = Manifest.load(tmp_path / "out" / "target.jsonl")
    assert back.entries == m.entries and back.corpus == "target" and back.script == "devanagari"
    assert back.to_jsonl() == m.to_jsonl()
    (tmp_path / "broken.jsonl").write_text('{"audio": "x"}\n', encoding="utf-8")
    with pytest.raises(CorpusError, match=":1:"):
        Manifest.load(tmp_path / "broken.jsonl")


# -- stub TTS -------------------------------------------------------------------------


def test_stub_examples():
    w = stub_tts("ab")
    assert len(w) == 3200 and w.sample_rate == 16000
    a = stub_tts("a").samples
    spec = np.abs(np.fft.rfft(a))
    peak_hz = np.argmax(spec) * 16000 / len(a)
    assert abs(peak_hz - 860) <= 16000 / len(a)
    np.testing.assert_array_equal(stub_tts("hello").samples, stub_tts("hello").samples)
    assert np.max(np.abs(a)) == pytest.approx(0.3, abs=1e-3)
    with pytest.raises(ValueError):
        stub_tts("   ")
    with pytest.raises(ValueError):
        stub_tts("a", voice="robot")


def test_stub_cross_fade_keeps_amplitude_bounded():
    w = stub_tts("az" * 5).samples
    assert np.max(np.abs(w)) <= 0.3 + 1e-9
    # in the middle of a segment only that codepoint's tone is present
    mid = w[1600 + 400 : 1600 + 1200]
    spec = np.abs(np.fft.rfft(mid * np.hanning(len(mid))))
    assert abs(np.argmax(spec) * 16000 / len(mid) - (200 + (ord("z") % 64) * 20)) <= 20


def test_formant_voices():
    w = stub_tts("नमस्ते", voice="formant")
    assert len(w) == 6 * 1600
    assert np.max(np.abs(w.samples)) <= 0.1 + 1e-9
    assert not np.array_equal(w.samples, stub_tts("नमस्ते", voice="formant-low").samples)


# -- synthetic generation ---------------------------------------------------------------


class FlakyClient:
    """Fails every attempt for the texts in ``bad`` and the first attempt for those in ``once``."""

    def __init__(self, bad=(), once=()):
        self.bad, self.once, self.calls = set(bad), set(once), []
        self.lock = threading.Lock()

    def synthesize(self, text):
        with self.lock:
            self.calls.append(text)
            seen = self.calls.count(text)
        if text in self.bad or (text in self.once and seen == 1):
            raise OSError(f"server refused {text!r}")
        return stub_tts(text)


def test_generate_thirty_texts(tmp_path):
    texts = sample_texts("devanagari", 30, seed=0)
    m = generate_synthetic(texts, StubClient(), tmp_path / "a", corpus="synthetic")
    assert len(m) == 30 and m.corpus == "synthetic" and m.script == "devanagari"
    assert m.texts == texts
    assert all(load_wav(m.audio_path(e), target_rate=None).sample_rate == 16000 for e in m.entries)
    generate_synthetic(texts, StubClient(), tmp_path / "b", corpus="synthetic")
    assert digest_tree(tmp_path / "a") == digest_tree(tmp_path / "b")


def test_partial_failure_recorded(tmp_path):
    texts = [f"text {i}" for i in range(30)]
    sleeps = []
    m = generate_synthetic(texts, FlakyClient(bad={texts[7]}), tmp_path, sleep=sleeps.append)
    assert len(m) == 29
    assert m.failures == [{"index": 7, "text": "text 7", "error": m.failures[0]["error"]}]
    assert "3 attempts" in m.failures[0]["error"]
    assert sleeps == [0.5, 1.0]
    assert m.texts == texts[:7] + texts[8:]
    assert not (tmp_path / "prepared/synthetic/00007.wav").exists()
    m.save(tmp_path / "s.jsonl")
    assert "text 7" in (tmp_path / "s.jsonl.failures").read_text(encoding="utf-8")


def test_retry_recovers():
    client = FlakyClient(once={"x"})
    sleeps = []
    w = synthesize_with_retry(client, "x", sleep=sleeps.append)
    assert len(w) == 1600 and sleeps == [0.5]


def test_majority_failure_aborts(tmp_path):
    texts = [f"t{i}" for i in range(5)]
    with pytest.raises(SynthesisError, match="3 of 5"):
        generate_synthetic(texts, FlakyClient(bad=set(texts[:3])), tmp_path, sleep=lambda s: None)


def test_http_client_against_stub_server(tmp_path):
    server = serve_stub()
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        host, port = server.server_address[:2]
        client = HttpClient(f"http://{host}:{port}", voice="default", timeout=5)
        w = client.synthesize("ab")
        np.testing.assert_allclose(w.samples, stub_tts("ab").samples, atol=1 / 32767)
        m = generate_synthetic(["ab", "cd", "ef"], client, tmp_path, workers=2)
        assert m.texts == ["ab", "cd", "ef"]
        bad = HttpClient(f"http://{host}:{port}", voice="robot", timeout=5)
        with pytest.raises(SynthesisError):
            synthesize_with_retry(bad, "ab", sleep=lambda s: None)
    finally:
        server.shutdown()
        server.server_close()


# -- validation -----------------------------------------------------------------------


def test_validate_clean_and_broken(tmp_path):
    m = generate_synthetic(["कम", "नल"], StubClient(), tmp_path)
    m.save(tmp_path / "m.jsonl")
    before = digest_tree(tmp_path)
    report = validate(Manifest.load(tmp_path / "m.jsonl"))
    assert report.ok and report.checks["path"]["passed"] == 2 and not report.warnings
    (tmp_path / m.entries[1].audio).unlink()
    before.pop(m.entries[1].audio)
    report = validate(Manifest.load(tmp_path / "m.jsonl"), build_vocabulary(["कन"]))
    assert not report.ok and report.checks["path"]["failed"] == 1
    assert m.entries[1].audio in report.checks["path"]["details"][0]
    assert "'म' (U+092E)" in report.warnings[0] and "'ल' (U+0932)" in report.warnings[0]
    assert digest_tree(tmp_path) == before


def test_validate_duration_and_rate(tmp_path):
    m = generate_synthetic(["ab"], StubClient(), tmp_path)
    save_wav(tmp_path / m.entries[0].audio, Waveform(np.zeros(100), 8000))
    report = validate(m)
    assert report.checks["format"]["failed"] == 1


def test_demo_corpora(tmp_path):
    c = build_demo_corpora(tmp_path, n_english=20, n_synthetic=30, n_target=6)
    sizes = [len(Manifest.load(p)) for p in (c.english, c.synthetic, c.target)]
    assert sizes == [20, 30, 6]
    assert Manifest.load(c.english).script == "latin"
    synthetic = build_vocabulary(Manifest.load(c.synthetic).texts)
    assert synthetic.covers(Manifest.load(c.target).texts)
    assert all(validate(Manifest.load(p), None).ok for p in (c.english, c.synthetic, c.target))
