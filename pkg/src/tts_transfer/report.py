"""MOS aggregation and PGM heatmaps for alignments and spectrograms."""

from __future__ import annotations

import csv
import io
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MIN_RATINGS = 3


class RatingError(ValueError):
    pass


@dataclass(frozen=True)
class Rating:
    utterance: str
    listener: str
    score: int
    system: str


@dataclass
class RatingSet:
    records: list[Rating]

    def __post_init__(self):
        for r in self.records:
            if isinstance(r.score, bool) or not isinstance(r.score, (int, np.integer)) or not 1 <= r.score <= 5:
                raise RatingError(f"score {r.score!r} for {r.utterance}/{r.listener} is not an integer in 1..5")

    @classmethod
    def from_scores(cls, scores, system: str = "system", per_utterance: int | None = None) -> "RatingSet":
        """Convenience constructor; by default all scores rate one utterance."""
        k = per_utterance or len(scores)
        return cls([Rating(f"u{i // k}", f"l{i % k}", int(s), system) for i, s in enumerate(scores)])

    @classmethod
    def from_csv(cls, text: str, where: str = "<csv>") -> "RatingSet":
        reader = csv.DictReader(io.StringIO(text))
        need = {"utterance_id", "listener_id", "score", "system"}
        if reader.fieldnames is None or not need.issubset(reader.fieldnames):
            raise RatingError(f"{where}: header must contain {', '.join(sorted(need))}")
        out = []
        for n, row in enumerate(reader, 2):
            raw = (row["score"] or "").strip()
            try:
                score = int(raw)
            except ValueError:
                raise RatingError(f"{where}:{n}: score {raw!r} is not an integer") from None
            if not 1 <= score <= 5:
                raise RatingError(f"{where}:{n}: score {score} outside 1..5")
            out.append(Rating(row["utterance_id"].strip(), row["listener_id"].strip(), score, row["system"].strip()))
        return cls(out)

    @classmethod
    def load(cls, path) -> "RatingSet":
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except (OSError, UnicodeDecodeError) as exc:
            raise RatingError(f"{path}: {exc}") from exc
        return cls.from_csv(text, str(path))


@dataclass(frozen=True)
class SystemScore:
    system: str
    mean: float
    std: float  # population
    n_ratings: int
    n_utterances: int
    excluded: tuple[tuple[str, int], ...]  # (utterance, rating count) below the minimum

    @property
    def formatted(self) -> str:
        return format_mos(self.mean, self.std)


def format_mos(mean: float, std: float) -> str:
    return f"{mean:.2f} ± {std:.2f}"


def aggregate_mos(ratings: RatingSet, min_ratings: int = MIN_RATINGS) -> dict[str, SystemScore]:
    """Mean and population std per system over utterances with at least ``min_ratings`` ratings.

    Under-rated utterances are excluded and listed on the result rather than dropped silently.
    """
    if not ratings.records:
        raise RatingError("empty rating set")
    by_system: dict[str, dict[str, list[int]]] = defaultdict(lambda: defaultdict(list))
    for r in ratings.records:
        by_system[r.system][r.utterance].append(r.score)
    out = {}
    for system in sorted(by_system):
        utts = by_system[system]
        kept = [s for u, ss in utts.items() if len(ss) >= min_ratings for s in ss]
        excluded = tuple(sorted((u, len(ss)) for u, ss in utts.items() if len(ss) < min_ratings))
        if kept:
            a = np.array(kept, dtype=np.float64)
            mean, std = float(a.mean()), float(a.std())
        else:
            mean = std = float("nan")
        out[system] = SystemScore(system, mean, std, len(kept), len(utts) - len(excluded), excluded)
    return out


def mos_table(scores: dict[str, SystemScore]) -> str:
    """Plain-text block with one "mean ± std" row per system."""
    name_w = max(len("Training strategy"), *(len(s) for s in scores))
    lines = [
        "MOS (1-5 scale), mean ± population standard deviation over all included ratings",
        f"{'Training strategy':<{name_w}}  {'MOS':<12}  Ratings  Utterances",
    ]
    for s in scores.values():
        cell = s.formatted if s.n_ratings else "n/a"
        lines.append(f"{s.system:<{name_w}}  {cell:<12}  {s.n_ratings:>7}  {s.n_utterances:>10}")
    excluded = [(s.system, u, k) for s in scores.values() for u, k in s.excluded]
    total = sum(s.n_ratings for s in scores.values()) + sum(k for _, _, k in excluded)
    lines.append(f"ratings read: {total}; excluded: {sum(k for _, _, k in excluded)}")
    for system, u, k in excluded:
        lines.append(f"  excluded {system}/{u}: {k} rating(s), fewer than {MIN_RATINGS}")
    return "\n".join(lines) + "\n"


# -- PGM -------------------------------------------------------------------------------


def write_pgm(path, image: np.ndarray) -> None:
    img = np.asarray(image)
    if img.ndim != 2 or img.size == 0:
        raise ValueError("PGM image must be a non-empty 2-D array")
    if img.dtype != np.uint8:
        raise ValueError("PGM image must be uint8")
    h, w = img.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(img).tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    if fields[0] != b"P5" or int(fields[3]) != 255:
        raise ValueError(f"{path}: not an 8-bit binary PGM")
    w, h = int(fields[1]), int(fields[2])
    data = raw[pos + 1 : pos + 1 + w * h]
    if len(data) != w * h:
        raise ValueError(f"{path}: truncated PGM payload")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).copy()


def _upscale(img: np.ndarray, scale: int) -> np.ndarray:
    if scale < 1:
        raise ValueError("scale must be >= 1")
    return np.repeat(np.repeat(img, scale, axis=0), scale, axis=1)


def alignment_image(att, scale: int = 1) -> np.ndarray:
    """Decoder steps run left to right, encoder positions bottom to top; intensity maps [0, max] linearly."""
    a = np.asarray(att, dtype=np.float64)
    if a.ndim != 2 or a.size == 0:
        raise ValueError("alignment must be a non-empty [decoder steps, encoder positions] matrix")
    if not np.isfinite(a).all() or (a < 0).any():
        raise ValueError("alignment weights must be finite and non-negative")
    peak = a.max()
    norm = a / peak if peak > 0 else a
    img = np.round(255 * norm.T[::-1]).astype(np.uint8)
    return _upscale(img, scale)


def plot_alignment(att, path, scale: int = 1) -> np.ndarray:
    img = alignment_image(att, scale)
    write_pgm(path, img)
    return img


def spectrogram_image(mel, scale: int = 1) -> np.ndarray:
    """Frames left to right, low mel channels at the bottom, min-max normalised."""
    m = np.asarray(getattr(mel, "values", mel), dtype=np.float64)
    if m.ndim != 2 or m.size == 0:
        raise ValueError("spectrogram must be a non-empty [frames, channels] matrix")
    lo, hi = m.min(), m.max()
    norm = (m - lo) / (hi - lo) if hi > lo else np.zeros_like(m)
    return _upscale(np.round(255 * norm.T[::-1]).astype(np.uint8), scale)


def plot_spectrogram(mel, path, scale: int = 1) -> np.ndarray:
    img = spectrogram_image(mel, scale)
    write_pgm(path, img)
    return img
