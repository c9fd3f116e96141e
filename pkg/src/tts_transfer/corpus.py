"""Corpus preparation: ingestion of recorded data, synthetic corpus generation
through a TTS client, and manifest validation."""

from __future__ import annotations

import json
import logging
import time
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Callable, Iterable, Protocol

import numpy as np

from .audio import SAMPLE_RATE, Waveform, WavFormatError, load_wav, read_wav_bytes, save_wav, wav_bytes
from .text import Vocabulary, detect_script, normalize

log = logging.getLogger(__name__)


class CorpusError(ValueError):
    pass


class SynthesisError(RuntimeError):
    pass


# -- manifest -------------------------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    audio: str  # relative to the manifest's root directory
    text: str
    duration: float


@dataclass
class Manifest:
    entries: list[ManifestEntry]
    corpus: str
    script: str
    root: Path = Path(".")
    skipped: list[dict] = field(default_factory=list)
    failures: list[dict] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def texts(self) -> list[str]:
        return [e.text for e in self.entries]

    def audio_path(self, entry: ManifestEntry) -> Path:
        return self.root / entry.audio

    def to_jsonl(self) -> str:
        lines = [
            json.dumps(
                {"audio": e.audio, "corpus": self.corpus, "duration": e.duration, "script": self.script, "text": e.text},
                sort_keys=True,
                ensure_ascii=False,
            )
            for e in self.entries
        ]
        return "".join(line + "\n" for line in lines)

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_jsonl(), encoding="utf-8")
        if self.failures:
            side = path.with_name(path.name + ".failures")
            side.write_text("".join(json.dumps(f, sort_keys=True, ensure_ascii=False) + "\n" for f in self.failures), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Manifest":
        path = Path(path)
        try:
            lines = path.read_text(encoding="utf-8").splitlines()
        except (OSError, UnicodeDecodeError) as exc:
            raise CorpusError(f"{path}: {exc}") from exc
        entries, corpus, script = [], None, None
        for n, line in enumerate(lines, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                entries.append(ManifestEntry(rec["audio"], rec["text"], float(rec["duration"])))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise CorpusError(f"{path}:{n}: malformed manifest record ({exc})") from exc
            corpus = corpus or rec.get("corpus")
            script = script or rec.get("script")
        if not entries:
            raise CorpusError(f"{path}: manifest is empty")
        return cls(entries, corpus or path.stem, script or detect_script(e.text for e in entries), path.parent)


def _prepared_name(corpus: str, index: int) -> str:
    return f"prepared/{corpus}/{index:05d}.wav"


# -- ingestion --------------------------------------------------------------------------


def ingest(raw_dir, transcript, out_dir, corpus: str, script: str | None = None) -> Manifest:
    """Canonicalise a recorded corpus into ``out_dir/prepared/<corpus>/<index>.wav``.

    ``transcript`` is UTF-8 TSV, ``relative_path<TAB>text`` per line. Unreadable
    audio is skipped and logged; lines without text are rejected.
    """
    raw_dir, out_dir = Path(raw_dir), Path(out_dir)
    try:
        lines = Path(transcript).read_text(encoding="utf-8").splitlines()
    except (OSError, UnicodeDecodeError) as exc:
        raise CorpusError(f"{transcript}: {exc}") from exc
    entries: list[ManifestEntry] = []
    skipped: list[dict] = []
    for n, line in enumerate(lines, 1):
        if not line.strip():
            continue
        rel, sep, text = line.partition("\t")
        text = normalize(text)
        if not sep or not text:
            log.warning("%s:%d: no transcript text, item rejected", transcript, n)
            skipped.append({"line": n, "audio": rel, "reason": "empty transcript"})
            continue
        try:
            wav = load_wav(raw_dir / rel)
        except WavFormatError as exc:
            log.warning("skipping %s: %s", rel, exc)
            skipped.append({"line": n, "audio": rel, "reason": str(exc)})
            continue
        name = _prepared_name(corpus, len(entries))
        (out_dir / name).parent.mkdir(parents=True, exist_ok=True)
        save_wav(out_dir / name, wav)
        entries.append(ManifestEntry(name, text, len(wav) / SAMPLE_RATE))
    if not entries:
        raise CorpusError(f"{transcript}: no usable items")
    return Manifest(entries, corpus, script or detect_script(e.text for e in entries), out_dir, skipped=skipped)


# -- stub TTS ---------------------------------------------------------------------------

SEGMENT = 1600  # 100 ms per codepoint
FADE = 80  # 5 ms


def _tone_segment(c: int, start: int, n: int, base: float) -> np.ndarray:
    t = (start + np.arange(n)) / SAMPLE_RATE
    return 0.3 * np.sin(2 * np.pi * (base + (c % 64) * 20.0) * t)


def _formant_segment(c: int, start: int, n: int, scale: float) -> np.ndarray:
    """Harmonic source shaped by two formants chosen from the codepoint, peak 0.1."""
    t = (start + np.arange(n)) / SAMPLE_RATE
    f0 = (110.0 + 10.0 * (c % 5)) * scale
    f1 = (300.0 + 40.0 * (c % 17)) * scale
    f2 = (900.0 + 90.0 * (c % 19)) * scale
    h = np.arange(1, 80)
    fr = f0 * h
    fr = fr[fr < 7800.0]
    amp = np.exp(-(((fr - f1) / 150.0) ** 2)) + 0.6 * np.exp(-(((fr - f2) / 250.0) ** 2)) + 0.02
    phase = np.random.default_rng(c).uniform(0, 2 * np.pi, fr.shape[0])
    seg = (amp[:, None] * np.sin(2 * np.pi * fr[:, None] * t[None, :] + phase[:, None])).sum(axis=0)
    return 0.1 * seg / np.abs(seg).max()


_VOICES: dict[str, Callable[[int, int, int], np.ndarray]] = {
    "default": lambda c, s, n: _tone_segment(c, s, n, 200.0),
    "formant": lambda c, s, n: _formant_segment(c, s, n, 1.0),
    "formant-low": lambda c, s, n: _formant_segment(c, s, n, 0.85),
}


def stub_tts(text: str, voice: str = "default") -> Waveform:
    """Deterministic stand-in voice: 100 ms per codepoint with 5 ms linear cross-fades.

    ``default`` plays a sine at 200 + (c mod 64) * 20 Hz, amplitude 0.3. The
    ``formant`` voices render a vowel-like harmonic spectrum per codepoint
    instead, which is closer to what an acoustic model sees in speech.
    """
    text = normalize(text)
    if not text:
        raise ValueError("stub_tts needs non-empty text")
    if voice not in _VOICES:
        raise ValueError(f"unknown stub voice {voice!r}; available: {sorted(_VOICES)}")
    render = _VOICES[voice]
    codes = [ord(ch) for ch in text]
    n = SEGMENT * len(codes)
    out = np.zeros(n)
    half = FADE // 2
    for i, c in enumerate(codes):
        # every segment is rendered on global time, extended half a fade past each edge
        lo = max(0, i * SEGMENT - half)
        hi = min(n, (i + 1) * SEGMENT + half)
        seg = render(c, lo, hi - lo)
        w = np.ones(hi - lo)
        pos = np.arange(lo, hi)
        if i > 0:
            rise = (pos - (i * SEGMENT - half) + 0.5) / FADE
            w = np.minimum(w, np.clip(rise, 0.0, 1.0))
        if i < len(codes) - 1:
            fall = ((i + 1) * SEGMENT + half - pos - 0.5) / FADE
            w = np.minimum(w, np.clip(fall, 0.0, 1.0))
        out[lo:hi] += w * seg
    return Waveform(out, SAMPLE_RATE)


# -- TTS clients ------------------------------------------------------------------------


class TTSClient(Protocol):
    def synthesize(self, text: str) -> Waveform: ...


@dataclass
class StubClient:
    voice: str = "default"

    def synthesize(self, text: str) -> Waveform:
        return stub_tts(text, self.voice)


@dataclass
class HttpClient:
    """POST ``{"text", "voice"}`` as JSON to ``<url>/synthesize``; the reply body is a WAV file."""

    url: str
    voice: str = "default"
    timeout: float = 30.0

    def synthesize(self, text: str) -> Waveform:
        body = json.dumps({"text": text, "voice": self.voice}).encode("utf-8")
        req = urllib.request.Request(
            self.url.rstrip("/") + "/synthesize", data=body, headers={"Content-Type": "application/json"}, method="POST"
        )
        with urllib.request.urlopen(req, timeout=self.timeout) as resp:
            return read_wav_bytes(resp.read(), where=self.url)


def serve_stub(host: str = "127.0.0.1", port: int = 0, voice_fallback: str = "default") -> ThreadingHTTPServer:
    """An HTTP server speaking the client protocol, backed by :func:`stub_tts`.

    Call ``serve_forever`` (typically on a thread); ``server_address`` gives the bound port.
    """

    class Handler(BaseHTTPRequestHandler):
        def do_POST(self):
            if self.path.rstrip("/") != "/synthesize":
                self.send_error(404)
                return
            try:
                req = json.loads(self.rfile.read(int(self.headers.get("Content-Length", 0))).decode("utf-8"))
                payload = wav_bytes(stub_tts(req["text"], req.get("voice") or voice_fallback))
            except (ValueError, KeyError, TypeError) as exc:
                self.send_error(400, str(exc))
                return
            self.send_response(200)
            self.send_header("Content-Type", "audio/wav")
            self.send_header("Content-Length", str(len(payload)))
            self.end_headers()
            self.wfile.write(payload)

        def log_message(self, *args):
            pass

    return ThreadingHTTPServer((host, port), Handler)


def synthesize_with_retry(
    client: TTSClient,
    text: str,
    attempts: int = 3,
    backoff: float = 0.5,
    sleep: Callable[[float], None] = time.sleep,
) -> Waveform:
    """Up to ``attempts`` tries, sleeping backoff * 2**k between them."""
    last: Exception | None = None
    for k in range(attempts):
        try:
            return client.synthesize(text)
        except (OSError, ValueError, urllib.error.URLError) as exc:
            last = exc
            if k + 1 < attempts:
                sleep(backoff * 2**k)
    raise SynthesisError(f"{attempts} attempts failed: {last}") from last


def generate_synthetic(
    texts: Iterable[str],
    client: TTSClient,
    out_dir,
    corpus: str = "synthetic",
    script: str | None = None,
    workers: int = 4,
    attempts: int = 3,
    backoff: float = 0.5,
    sleep: Callable[[float], None] = time.sleep,
) -> Manifest:
    """Synthesize every text, keep request order, record per-item failures.

    Raises :class:`SynthesisError` when more than half of the items fail.
    """
    texts = [normalize(t) for t in texts]
    if not texts:
        raise CorpusError("no texts to synthesize")
    out_dir = Path(out_dir)

    def one(text: str):
        if not text:
            return SynthesisError("empty text")
        try:
            return synthesize_with_retry(client, text, attempts, backoff, sleep)
        except SynthesisError as exc:
            return exc

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(pool.map(one, texts))

    entries, failures = [], []
    for i, (text, res) in enumerate(zip(texts, results)):
        if isinstance(res, Exception):
            log.warning("synthesis of item %d failed: %s", i, res)
            failures.append({"index": i, "text": text, "error": str(res)})
            continue
        wav = res if res.sample_rate == SAMPLE_RATE else read_wav_bytes(wav_bytes(res))
        name = _prepared_name(corpus, i)
        (out_dir / name).parent.mkdir(parents=True, exist_ok=True)
        save_wav(out_dir / name, wav)
        entries.append(ManifestEntry(name, text, len(wav) / SAMPLE_RATE))
    if len(failures) * 2 > len(texts):
        raise SynthesisError(f"{len(failures)} of {len(texts)} items failed")
    return Manifest(entries, corpus, script or detect_script(texts), out_dir, failures=failures)


# -- validation -------------------------------------------------------------------------


@dataclass
class ValidationReport:
    checks: dict[str, dict]
    warnings: list[str]

    @property
    def ok(self) -> bool:
        return all(c["failed"] == 0 for c in self.checks.values())

    def summary(self) -> str:
        rows = [f"{name}: {c['passed']} passed, {c['failed']} failed" for name, c in self.checks.items()]
        for name, c in self.checks.items():
            rows += [f"  {name}: {d}" for d in c["details"]]
        return "\n".join(rows + [f"warning: {w}" for w in self.warnings])


def validate(manifest: Manifest, vocab: Vocabulary | None = None) -> ValidationReport:
    """Read-only check of manifest invariants; returns per-check counts."""
    names = ("path", "format", "duration", "text")
    checks = {k: {"passed": 0, "failed": 0, "details": []} for k in names}

    def mark(check, ok, detail=None):
        checks[check]["passed" if ok else "failed"] += 1
        if not ok:
            checks[check]["details"].append(detail)

    for e in manifest.entries:
        mark("text", bool(e.text.strip()), f"{e.audio}: empty text")
        p = manifest.audio_path(e)
        if not p.is_file():
            mark("path", False, f"missing file {p}")
            continue
        mark("path", True)
        try:
            wav = load_wav(p, target_rate=None)
        except WavFormatError as exc:
            mark("format", False, str(exc))
            continue
        mark("format", wav.sample_rate == SAMPLE_RATE, f"{p}: {wav.sample_rate} Hz, expected {SAMPLE_RATE}")
        actual = len(wav) / wav.sample_rate
        mark("duration", abs(actual - e.duration) <= 1e-3, f"{p}: manifest says {e.duration:.4f} s, file has {actual:.4f} s")
    warnings = []
    if vocab is not None:
        missing = sorted(vocab.missing(manifest.texts))
        if missing:
            listed = ", ".join(f"{ch!r} (U+{ord(ch):04X})" for ch in missing)
            warnings.append(f"codepoints outside the target vocabulary: {listed}")
    return ValidationReport(checks, warnings)


# -- demo corpora -----------------------------------------------------------------------

_LATIN_WORDS = (
    "the", "a", "cat", "sat", "on", "mat", "dog", "ran", "to", "sun", "is", "red", "big", "small",
    "we", "see", "it", "go", "home", "now", "day", "one", "two", "hat",
)
_DEVANAGARI_CONSONANTS = "कगचजतदनपबमरलसह"
_DEVANAGARI_VOWEL_SIGNS = ("", "ा", "ि", "ी", "ु", "े", "ो")


def sample_texts(script: str, n: int, seed: int = 0, words: tuple[int, int] = (1, 3)) -> list[str]:
    """Deterministic short sentences; in Devanagari every pool character occurs at least once when n allows it."""
    rng = np.random.default_rng(seed)
    out = []
    if script == "latin":
        for _ in range(n):
            k = int(rng.integers(words[0], words[1] + 1))
            out.append(" ".join(_LATIN_WORDS[i] for i in rng.integers(0, len(_LATIN_WORDS), k)))
        return out
    if script != "devanagari":
        raise ValueError(f"no sample texts for script {script!r}")
    cons, signs = _DEVANAGARI_CONSONANTS, _DEVANAGARI_VOWEL_SIGNS
    for i in range(n):
        k = int(rng.integers(words[0], words[1] + 1))
        ws = []
        for j in range(k):
            # the first syllables cycle through the pool so small corpora still cover it
            c0 = cons[(i * 2 + j) % len(cons)] if j < 2 else cons[rng.integers(len(cons))]
            s0 = signs[(i + j) % len(signs)]
            c1 = cons[rng.integers(len(cons))]
            ws.append(c0 + s0 + c1)
        out.append(" ".join(ws))
    return out


@dataclass(frozen=True)
class DemoCorpora:
    english: Path
    synthetic: Path
    target: Path


def build_demo_corpora(
    workdir,
    n_english: int = 20,
    n_synthetic: int = 30,
    n_target: int = 6,
    seed: int = 0,
    client: TTSClient | None = None,
) -> DemoCorpora:
    """Three small stub corpora: English, synthetic Devanagari, and a target speaker.

    The target speaker uses a lower formant voice and texts drawn from the same
    character pool as the synthetic corpus.
    """
    root = Path(workdir)
    paths = []
    specs = [
        ("english", "latin", n_english, client or StubClient("formant"), seed),
        ("synthetic", "devanagari", n_synthetic, client or StubClient("formant"), seed + 1),
        ("target", "devanagari", n_target, StubClient("formant-low"), seed + 2),
    ]
    for name, script, n, cl, s in specs:
        m = generate_synthetic(sample_texts(script, n, s), cl, root, corpus=name, script=script, workers=1)
        path = root / f"{name}.jsonl"
        m.save(path)
        paths.append(path)
    return DemoCorpora(*paths)
