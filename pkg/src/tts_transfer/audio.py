"""Waveform I/O, resampling and the log-mel front end, plus Griffin-Lim inversion."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal

SAMPLE_RATE = 16000


class WavFormatError(ValueError):
    """The file is not a readable 16-bit PCM RIFF/WAVE file."""


@dataclass(frozen=True)
class AudioConfig:
    sample_rate: int = SAMPLE_RATE
    frame_length: int = 800  # 50 ms
    hop_length: int = 192  # 12 ms
    n_fft: int = 1024
    n_mels: int = 80
    f_min: float = 0.0
    f_max: float = 8000.0
    clamp_floor: float = 1e-5

    def n_frames(self, n_samples: int) -> int:
        if n_samples < self.frame_length:
            raise ValueError(f"{n_samples} samples is shorter than one {self.frame_length}-sample frame")
        return (n_samples - self.frame_length) // self.hop_length + 1


DEFAULT_AUDIO = AudioConfig()


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate}")

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


# -- WAV ---------------------------------------------------------------------------


def _parse_wav(raw: bytes, where: str) -> tuple[np.ndarray, int]:
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise WavFormatError(f"{where}: not a RIFF/WAVE file")
    pos = 12
    fmt = None
    data = None
    while pos + 8 <= len(raw):
        cid = raw[pos : pos + 4]
        (size,) = struct.unpack_from("<I", raw, pos + 4)
        body = raw[pos + 8 : pos + 8 + size]
        if len(body) < size:
            raise WavFormatError(f"{where}: truncated '{cid.decode('latin-1')}' chunk ({len(body)} of {size} bytes)")
        if cid == b"fmt ":
            if size < 16:
                raise WavFormatError(f"{where}: fmt chunk too short")
            tag, channels, rate, _, align, bits = struct.unpack_from("<HHIIHH", body)
            if tag == 0xFFFE and size >= 40:
                tag = struct.unpack_from("<H", body, 24)[0]
            fmt = (tag, channels, rate, align, bits)
        elif cid == b"data":
            data = body
        pos += 8 + size + (size & 1)
    if fmt is None:
        raise WavFormatError(f"{where}: missing fmt chunk")
    if data is None:
        raise WavFormatError(f"{where}: missing data chunk")
    tag, channels, rate, align, bits = fmt
    if tag != 1:
        raise WavFormatError(f"{where}: format tag {tag} is not integer PCM")
    if bits != 16:
        raise WavFormatError(f"{where}: {bits}-bit PCM unsupported (need 16-bit)")
    if channels not in (1, 2):
        raise WavFormatError(f"{where}: {channels} channels unsupported (need mono or stereo)")
    if len(data) % (2 * channels):
        raise WavFormatError(f"{where}: data chunk is not a whole number of frames")
    ints = np.frombuffer(data, dtype="<i2").reshape(-1, channels)
    return ints, rate


def read_wav_bytes(raw: bytes, where: str = "<bytes>", target_rate: int | None = SAMPLE_RATE) -> Waveform:
    ints, rate = _parse_wav(raw, where)
    samples = ints.astype(np.float64).mean(axis=1) / 32768.0
    wav = Waveform(samples, rate)
    if target_rate is not None and rate != target_rate:
        wav = resample(wav, target_rate)
    return wav


def load_wav(path, target_rate: int | None = SAMPLE_RATE) -> Waveform:
    """Read 16-bit PCM; stereo is averaged, audio is resampled to ``target_rate``."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise WavFormatError(f"{path}: {exc}") from exc
    return read_wav_bytes(raw, str(path), target_rate)


def wav_bytes(wav: Waveform) -> bytes:
    ints = np.clip(np.round(wav.samples * 32768.0), -32768, 32767).astype("<i2")
    payload = ints.tobytes()
    header = b"RIFF" + struct.pack("<I", 36 + len(payload)) + b"WAVE"
    fmt = b"fmt " + struct.pack("<IHHIIHH", 16, 1, 1, wav.sample_rate, wav.sample_rate * 2, 2, 16)
    return header + fmt + b"data" + struct.pack("<I", len(payload)) + payload


def save_wav(path, wav: Waveform) -> None:
    """Write mono 16-bit PCM little-endian."""
    Path(path).write_bytes(wav_bytes(wav))


# -- resampling ----------------------------------------------------------------------


def resample(wav: Waveform, target_hz: int, taps_per_phase: int = 64, kaiser_beta: float = 8.0) -> Waveform:
    """Polyphase windowed-sinc resampling; output length round(N * target / source)."""
    src = wav.sample_rate
    if target_hz <= 0:
        raise ValueError("target rate must be positive")
    if target_hz == src:
        return Waveform(wav.samples.copy(), src)
    g = np.gcd(src, target_hz)
    up, down = target_hz // g, src // g
    ratio = max(up, down)
    taps = signal.firwin(taps_per_phase * ratio + 1, 1.0 / ratio, window=("kaiser", kaiser_beta))  # resample_poly applies the gain of up
    out = signal.resample_poly(wav.samples, up, down, window=taps)
    n_out = int(round(len(wav) * target_hz / src))
    if out.shape[0] < n_out:
        out = np.pad(out, (0, n_out - out.shape[0]))
    return Waveform(out[:n_out], target_hz)


# -- spectral analysis -----------------------------------------------------------------


def _window(cfg: AudioConfig) -> np.ndarray:
    return signal.get_window("hann", cfg.frame_length, fftbins=True)


def stft(samples: np.ndarray, cfg: AudioConfig = DEFAULT_AUDIO) -> np.ndarray:
    """Complex STFT [frames, n_fft/2+1]; no centre padding."""
    samples = np.asarray(samples, dtype=np.float64)
    n = cfg.n_frames(samples.shape[0])
    frames = np.lib.stride_tricks.sliding_window_view(samples, cfg.frame_length)[:: cfg.hop_length][:n]
    return np.fft.rfft(frames * _window(cfg), n=cfg.n_fft, axis=-1)


def stft_magnitude(wav: Waveform, cfg: AudioConfig = DEFAULT_AUDIO) -> np.ndarray:
    return np.abs(stft(wav.samples, cfg))


def istft(spec: np.ndarray, cfg: AudioConfig = DEFAULT_AUDIO) -> np.ndarray:
    """Least-squares inverse of :func:`stft` (window-weighted overlap-add)."""
    n_frames = spec.shape[0]
    win = _window(cfg)
    L, hop = cfg.frame_length, cfg.hop_length
    frames = np.fft.irfft(spec, n=cfg.n_fft, axis=-1)[:, :L] * win
    length = (n_frames - 1) * hop + L
    out = np.zeros(length)
    norm = np.zeros(length)
    for f in range(n_frames):
        out[f * hop : f * hop + L] += frames[f]
        norm[f * hop : f * hop + L] += win * win
    # the outermost samples are covered only by the window tails; a relative floor
    # keeps them from blowing up when the input is not a consistent STFT
    return out / np.maximum(norm, 1e-2 * norm.max())


def mel_hz(f_hz):
    f = np.asarray(f_hz, dtype=np.float64)
    if np.any(f < 0):
        raise ValueError("frequency must be non-negative")
    return 2595.0 * np.log10(1.0 + f / 700.0)


def hz_mel(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@dataclass(frozen=True)
class MelFilterbank:
    weights: np.ndarray  # [n_mels, n_fft/2 + 1]
    f_min: float
    f_max: float
    centers_hz: np.ndarray
    n_fft: int
    sample_rate: int

    @classmethod
    def build(cls, cfg: AudioConfig = DEFAULT_AUDIO) -> "MelFilterbank":
        """Peak-normalised triangular filters evenly spaced on the HTK mel scale."""
        pts = hz_mel(np.linspace(mel_hz(cfg.f_min), mel_hz(cfg.f_max), cfg.n_mels + 2))
        freqs = np.fft.rfftfreq(cfg.n_fft, 1.0 / cfg.sample_rate)
        lo, ctr, hi = pts[:-2, None], pts[1:-1, None], pts[2:, None]
        rising = (freqs - lo) / (ctr - lo)
        falling = (hi - freqs) / (hi - ctr)
        weights = np.maximum(0.0, np.minimum(rising, falling))
        return cls(weights, cfg.f_min, cfg.f_max, pts[1:-1].copy(), cfg.n_fft, cfg.sample_rate)

    @property
    def n_mels(self) -> int:
        return self.weights.shape[0]


@dataclass
class MelSpectrogram:
    values: np.ndarray  # [frames, n_mels], natural-log magnitudes
    frame_length: int = DEFAULT_AUDIO.frame_length
    hop_length: int = DEFAULT_AUDIO.hop_length
    sample_rate: int = SAMPLE_RATE
    meta: dict = field(default_factory=dict)

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]


_FILTERBANKS: dict[AudioConfig, MelFilterbank] = {}


def filterbank(cfg: AudioConfig = DEFAULT_AUDIO) -> MelFilterbank:
    if cfg not in _FILTERBANKS:
        _FILTERBANKS[cfg] = MelFilterbank.build(cfg)
    return _FILTERBANKS[cfg]


def mel_spectrogram(wav: Waveform, fb: MelFilterbank | None = None, cfg: AudioConfig = DEFAULT_AUDIO) -> MelSpectrogram:
    fb = fb or filterbank(cfg)
    if fb.weights.shape[1] != cfg.n_fft // 2 + 1:
        raise ValueError(f"filterbank has {fb.weights.shape[1]} bins, STFT has {cfg.n_fft // 2 + 1}")
    mag = stft_magnitude(wav, cfg)
    mel = np.log(np.maximum(mag @ fb.weights.T, cfg.clamp_floor))
    return MelSpectrogram(mel, cfg.frame_length, cfg.hop_length, cfg.sample_rate)


# -- mel file format ---------------------------------------------------------------------

_MEL_MAGIC = b"MEL1"


def save_mel(path, mel: MelSpectrogram) -> None:
    v = np.ascontiguousarray(mel.values, dtype="<f4")
    Path(path).write_bytes(_MEL_MAGIC + struct.pack("<II", *v.shape) + v.tobytes())


def load_mel(path) -> MelSpectrogram:
    raw = Path(path).read_bytes()
    if raw[:4] != _MEL_MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}, expected {_MEL_MAGIC!r}")
    if len(raw) < 12:
        raise ValueError(f"{path}: truncated header")
    frames, channels = struct.unpack_from("<II", raw, 4)
    body = raw[12:]
    if len(body) != 4 * frames * channels:
        raise ValueError(f"{path}: expected {4 * frames * channels} payload bytes, found {len(body)}")
    return MelSpectrogram(np.frombuffer(body, dtype="<f4").reshape(frames, channels).astype(np.float64))


# -- Griffin-Lim ---------------------------------------------------------------------------


def mel_to_linear(mel: MelSpectrogram, fb: MelFilterbank, iters: int = 60) -> np.ndarray:
    """Non-negative least-squares estimate of linear magnitudes from a log-mel matrix.

    Starts from the per-bin normalised transpose of the filterbank and refines with
    multiplicative updates, which keep every entry non-negative.
    """
    target = np.exp(mel.values)  # [F, M]
    W = fb.weights  # [M, K]
    colsum = W.sum(axis=0)
    est = (target @ W) / np.where(colsum > 0, colsum, 1.0)
    num = target @ W
    for _ in range(iters):
        est *= num / np.maximum((est @ W.T) @ W, 1e-12)
    return est


def spectral_convergence(target_mag: np.ndarray, samples: np.ndarray, cfg: AudioConfig = DEFAULT_AUDIO) -> float:
    mag = np.abs(stft(samples, cfg))
    return float(np.linalg.norm(target_mag - mag) / max(np.linalg.norm(target_mag), 1e-12))


def griffin_lim_magnitude(
    mag: np.ndarray,
    iters: int,
    cfg: AudioConfig = DEFAULT_AUDIO,
    seed: int = 0,
) -> tuple[np.ndarray, list[float]]:
    """Classic Griffin-Lim; returns the samples and spectral convergence after each iteration."""
    if iters < 1:
        raise ValueError("iters must be >= 1")
    rng = np.random.default_rng(seed)
    phase = np.exp(2j * np.pi * rng.random(mag.shape))
    history: list[float] = []
    x = istft(mag * phase, cfg)
    for _ in range(iters):
        spec = stft(x, cfg)
        history.append(float(np.linalg.norm(mag - np.abs(spec)) / max(np.linalg.norm(mag), 1e-12)))
        x = istft(mag * np.exp(1j * np.angle(spec)), cfg)
    history.append(spectral_convergence(mag, x, cfg))
    return x, history[1:]


def griffin_lim(
    mel: MelSpectrogram,
    fb: MelFilterbank | None = None,
    iters: int = 60,
    cfg: AudioConfig = DEFAULT_AUDIO,
    seed: int = 0,
    return_history: bool = False,
):
    """Invert a log-mel matrix to audio; output is peak-normalised to 0.95.

    Alternates between the set of consistent STFTs and the set of magnitudes
    whose mel projection matches ``mel``. The magnitude step is one
    multiplicative NNLS update through the per-bin normalised filterbank
    transpose, applied to the current STFT magnitude. ``history`` holds the
    spectral convergence ||S - |X||| / ||S|| after each iteration.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    fb = fb or filterbank(cfg)
    W = fb.weights
    colsum = W.sum(axis=0)
    colsum = np.where(colsum > 0, colsum, 1.0)
    target = np.exp(mel.values)
    mag = mel_to_linear(mel, fb)
    phase = np.exp(2j * np.pi * np.random.default_rng(seed).random(mag.shape))
    x = istft(mag * phase, cfg)
    history: list[float] = []
    for _ in range(iters):
        spec = stft(x, cfg)
        cur = np.abs(spec)
        mag = cur * ((target / np.maximum(cur @ W.T, 1e-12)) @ W) / colsum
        history.append(float(np.linalg.norm(mag - cur) / max(np.linalg.norm(mag), 1e-12)))
        x = istft(mag * np.exp(1j * np.angle(spec)), cfg)
    peak = np.max(np.abs(x))
    if peak > 0:
        x = x * (0.95 / peak)
    wav = Waveform(x, cfg.sample_rate)
    return (wav, history) if return_history else wav
