"""Text to waveform: acoustic model, then a flow vocoder or Griffin-Lim."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .acoustic import Tacotron2
from .archive import ParameterArchive
from .audio import MelSpectrogram, Waveform, griffin_lim
from .flow import FlowVocoder
from .text import Vocabulary, encode
from .training import acoustic_from_archive

log = logging.getLogger(__name__)


@dataclass
class Synthesis:
    wav: Waveform
    mel: MelSpectrogram
    alignment: np.ndarray  # [decoder steps, text positions]
    halted_by: str
    dropped: int


def synthesize_text(
    model: Tacotron2 | ParameterArchive,
    text: str,
    vocab: Vocabulary | None = None,
    vocoder: FlowVocoder | None = None,
    seed: int = 0,
    max_decoder_steps: int | None = None,
    sigma: float = 0.6,
    gl_iters: int = 60,
) -> Synthesis:
    """Griffin-Lim is used when ``vocoder`` is None."""
    if isinstance(model, ParameterArchive):
        model, vocab = acoustic_from_archive(model)
    if vocab is None:
        raise ValueError("a vocabulary is needed to encode the text")
    enc = encode(text, vocab)
    if enc.dropped:
        log.warning("dropped %d codepoint(s) outside the vocabulary", enc.dropped)
    if len(enc.ids) < 2:
        raise ValueError("nothing left to synthesize after encoding")
    out = model.infer(enc.ids[None], max_decoder_steps=max_decoder_steps, seed=seed)
    if out.truncated:
        log.warning("decoder hit the step limit without a stop token")
    mel = MelSpectrogram(out.mel_post.data[0])
    if vocoder is None:
        wav = griffin_lim(mel, iters=gl_iters, seed=seed)
    else:
        wav = vocoder.synthesize(mel, sigma=sigma, seed=seed)
    return Synthesis(wav, mel, out.alignments[0], out.halted_by, enc.dropped)
