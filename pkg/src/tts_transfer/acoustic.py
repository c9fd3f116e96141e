"""Tacotron2-style spectrogram prediction network.

Text ids -> embedding -> conv/batchnorm/relu stack -> bidirectional LSTM gives the
encoder memory. An autoregressive decoder (pre-net, attention LSTM, location
sensitive attention, decoder LSTM) emits one mel frame and one stop logit per
step; a convolutional post-net adds a residual to the whole predicted sequence.

All tensors are batch-first: ids [B, T], mel [B, S, n_mels]. Parameter names
carry ``encoder.``, ``decoder.`` or ``postnet.`` prefixes, which is what the
freezing machinery keys on.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

ENCODER, DECODER, POSTNET = "encoder.", "decoder.", "postnet."


@dataclass
class AcousticConfig:
    n_symbols: int = 0
    embed_dim: int = 512
    enc_conv_layers: int = 3
    enc_filters: int = 512
    enc_kernel: int = 5
    enc_blstm_units: int = 512  # both directions together
    prenet_units: int = 256
    prenet_layers: int = 2
    dec_lstm_units: int = 1024
    attn_dim: int = 128
    attn_location_filters: int = 32
    attn_location_kernel: int = 31
    postnet_layers: int = 5
    postnet_filters: int = 512
    postnet_kernel: int = 5
    mel_channels: int = 80
    max_decoder_steps: int = 1000
    stop_threshold: float = 0.5
    reduction_factor: int = 1
    encoder_dropout: float = 0.5
    prenet_dropout: float = 0.5
    postnet_dropout: float = 0.5
    prenet_dropout_at_inference: bool = True
    postnet_final_tanh: bool = False
    feed_postnet_frames: bool = False
    stop_pos_weight: float = 5.0

    def __post_init__(self):
        for name in (
            "embed_dim", "enc_conv_layers", "enc_filters", "enc_kernel", "enc_blstm_units", "prenet_units",
            "prenet_layers", "dec_lstm_units", "attn_dim", "attn_location_filters", "attn_location_kernel",
            "postnet_layers", "postnet_filters", "postnet_kernel", "mel_channels", "max_decoder_steps",
        ):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("enc_kernel", "attn_location_kernel", "postnet_kernel"):
            if getattr(self, name) % 2 == 0:
                raise ValueError(f"{name} must be odd")
        if self.enc_blstm_units % 2:
            raise ValueError("enc_blstm_units must be even (split across two directions)")
        if self.reduction_factor != 1:
            raise ValueError("only one frame per decoder step is supported")

    @classmethod
    def tiny(cls, n_symbols: int = 0, **overrides) -> "AcousticConfig":
        """Shrunken configuration for desk-scale experiments and gradient checks."""
        base = dict(
            n_symbols=n_symbols, embed_dim=16, enc_conv_layers=2, enc_filters=16, enc_blstm_units=32,
            prenet_units=32, dec_lstm_units=32, attn_dim=8, attn_location_filters=4, attn_location_kernel=7,
            postnet_layers=3, postnet_filters=16, max_decoder_steps=400,
        )
        base.update(overrides)
        return cls(**base)

    @classmethod
    def small(cls, n_symbols: int = 0, **overrides) -> "AcousticConfig":
        """Still desk-sized, but with enough decoder capacity to memorise short utterances."""
        base = dict(
            n_symbols=n_symbols, embed_dim=32, enc_conv_layers=2, enc_filters=32, enc_blstm_units=64,
            prenet_units=64, dec_lstm_units=128, attn_dim=32, attn_location_filters=8, attn_location_kernel=15,
            postnet_layers=3, postnet_filters=32, max_decoder_steps=400,
        )
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AcousticConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


# -- initialisation ---------------------------------------------------------------------


def xavier(rng: np.random.Generator, shape: tuple, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_embedding(rng: np.random.Generator, n_symbols: int, dim: int) -> np.ndarray:
    return xavier(rng, (n_symbols, dim), n_symbols, dim)


def _linear(p, rng, name, n_in, n_out, bias=True):
    p[name + ".weight"] = xavier(rng, (n_in, n_out), n_in, n_out)
    if bias:
        p[name + ".bias"] = np.zeros(n_out)


def _conv(p, rng, name, c_in, c_out, k, bias=True):
    p[name + ".weight"] = xavier(rng, (c_out, c_in, k), c_in * k, c_out * k)
    if bias:
        p[name + ".bias"] = np.zeros(c_out)


def _lstm(p, rng, name, n_in, hidden):
    p[name + ".w_ih"] = xavier(rng, (n_in, 4 * hidden), n_in, 4 * hidden)
    p[name + ".w_hh"] = xavier(rng, (hidden, 4 * hidden), hidden, 4 * hidden)
    p[name + ".bias"] = np.zeros(4 * hidden)


def _bn(p, b, name, channels):
    p[name + ".gamma"] = np.ones(channels)
    p[name + ".beta"] = np.zeros(channels)
    b[name + ".running_mean"] = np.zeros(channels)
    b[name + ".running_var"] = np.ones(channels)
    b[name + ".num_batches"] = np.zeros(1)


def init_parameters(cfg: AcousticConfig, seed: int = 0) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Seeded Xavier-uniform matrices, zero biases, identity batch norms."""
    if cfg.n_symbols < 3:
        raise ValueError("n_symbols must cover PAD, EOS and at least one grapheme")
    rng = np.random.default_rng(seed)
    p: dict[str, np.ndarray] = {}
    b: dict[str, np.ndarray] = {}
    p["encoder.embedding"] = init_embedding(rng, cfg.n_symbols, cfg.embed_dim)
    c_in = cfg.embed_dim
    for i in range(cfg.enc_conv_layers):
        _conv(p, rng, f"encoder.conv.{i}", c_in, cfg.enc_filters, cfg.enc_kernel)
        _bn(p, b, f"encoder.bn.{i}", cfg.enc_filters)
        c_in = cfg.enc_filters
    half = cfg.enc_blstm_units // 2
    _lstm(p, rng, "encoder.lstm_fw", c_in, half)
    _lstm(p, rng, "encoder.lstm_bw", c_in, half)

    enc_dim = cfg.enc_blstm_units
    n_in = cfg.mel_channels
    for i in range(cfg.prenet_layers):
        _linear(p, rng, f"decoder.prenet.{i}", n_in, cfg.prenet_units)
        n_in = cfg.prenet_units
    H = cfg.dec_lstm_units
    _lstm(p, rng, "decoder.attention_rnn", cfg.prenet_units + enc_dim, H)
    _linear(p, rng, "decoder.attention.query", H, cfg.attn_dim, bias=False)
    _linear(p, rng, "decoder.attention.memory", enc_dim, cfg.attn_dim, bias=False)
    _conv(p, rng, "decoder.attention.location_conv", 2, cfg.attn_location_filters, cfg.attn_location_kernel, bias=False)
    _linear(p, rng, "decoder.attention.location_dense", cfg.attn_location_filters, cfg.attn_dim, bias=False)
    _linear(p, rng, "decoder.attention.v", cfg.attn_dim, 1, bias=False)
    p["decoder.attention.bias"] = np.zeros(cfg.attn_dim)
    _lstm(p, rng, "decoder.decoder_rnn", H + enc_dim, H)
    _linear(p, rng, "decoder.frame_proj", H + enc_dim, cfg.mel_channels)
    _linear(p, rng, "decoder.stop_proj", H + enc_dim, 1)

    c_in = cfg.mel_channels
    for i in range(cfg.postnet_layers):
        c_out = cfg.mel_channels if i == cfg.postnet_layers - 1 else cfg.postnet_filters
        _conv(p, rng, f"postnet.conv.{i}", c_in, c_out, cfg.postnet_kernel)
        _bn(p, b, f"postnet.bn.{i}", c_out)
        c_in = c_out
    return p, b


# -- state containers -------------------------------------------------------------------


@dataclass
class AttentionState:
    weights: Tensor  # [B, T]
    cumulative: Tensor  # [B, T]
    context: Tensor  # [B, enc_dim]


@dataclass
class DecoderState:
    attention_h: Tensor
    attention_c: Tensor
    decoder_h: Tensor
    decoder_c: Tensor
    attention: AttentionState


@dataclass
class Memory:
    """Encoder output plus the quantities every attention step reuses."""

    values: Tensor  # [B, T, enc_dim]
    processed: Tensor  # [B, T, attn_dim]
    mask: np.ndarray | None  # [B, T] bool, None when nothing is padded


@dataclass
class AcousticOutput:
    mel_pre: Tensor  # [B, S, n_mels]
    mel_post: Tensor  # [B, S, n_mels]
    stop_logits: Tensor  # [B, S]
    alignments: np.ndarray  # [B, S, T]
    halted_by: str = "teacher_forcing"

    @property
    def truncated(self) -> bool:
        return self.halted_by == "max_steps"


def lengths_mask(lengths, total: int) -> np.ndarray:
    return np.arange(total)[None, :] < np.asarray(lengths)[:, None]


# -- model ----------------------------------------------------------------------------


class Tacotron2:
    def __init__(
        self,
        config: AcousticConfig,
        params: dict[str, np.ndarray] | None = None,
        buffers: dict[str, np.ndarray] | None = None,
        seed: int = 0,
    ):
        self.config = config
        if params is None:
            params, init_buffers = init_parameters(config, seed)
            buffers = init_buffers if buffers is None else buffers
        if buffers is None:
            raise ValueError("buffers are required when parameters are supplied")
        self.params: dict[str, Tensor] = {k: Tensor(v, requires_grad=True, name=k) for k, v in params.items()}
        self.buffers: dict[str, np.ndarray] = buffers

    # -- parameter plumbing ------------------------------------------------------------
    def parameter_arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.params.items()}

    def set_trainable(self, trainable: Callable[[str], bool]) -> None:
        for name, t in self.params.items():
            t.requires_grad = bool(trainable(name))

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def _bn_state(self, name: str) -> ad.BatchNormState:
        b = self.buffers
        return ad.BatchNormState(b[name + ".running_mean"], b[name + ".running_var"], b[name + ".num_batches"])

    def _bn(self, x: Tensor, name: str, training: bool, mask) -> Tensor:
        p = self.params
        return ad.batchnorm1d(x, p[name + ".gamma"], p[name + ".beta"], self._bn_state(name), training, mask)

    # -- encoder ---------------------------------------------------------------------
    def encode_text(self, ids, lengths=None, training: bool = False, rng=None) -> Tensor:
        """Encoder memory [B, T, enc_blstm_units] for ids [B, T] (or [T])."""
        return self._encode(ids, lengths, training, rng)[0]

    def _encode(self, ids, lengths=None, training=False, rng=None) -> tuple[Tensor, np.ndarray | None]:
        cfg, p = self.config, self.params
        ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
        B, T = ids.shape
        if T == 0:
            raise ValueError("empty text")
        if ids.min() < 0 or ids.max() >= cfg.n_symbols:
            raise IndexError(f"symbol id outside [0, {cfg.n_symbols})")
        lengths = np.full(B, T) if lengths is None else np.asarray(lengths)
        mask = lengths_mask(lengths, T)
        ragged = not mask.all()
        m3 = mask[..., None].astype(np.float64)

        x = ad.embedding(p["encoder.embedding"], ids)
        if ragged:
            x = x * m3
        pad = (cfg.enc_kernel - 1) // 2
        for i in range(cfg.enc_conv_layers):
            x = ad.conv1d(x, p[f"encoder.conv.{i}.weight"], p[f"encoder.conv.{i}.bias"], pad=pad)
            x = ad.relu(self._bn(x, f"encoder.bn.{i}", training, mask if ragged else None))
            x = ad.dropout(x, cfg.encoder_dropout, rng, training)
            if ragged:
                x = x * m3

        fw = self._run_lstm(x, "encoder.lstm_fw")
        # reverse each sequence inside its own length; padding stays at the tail
        t_idx = np.arange(T)[None, :]
        rev = np.where(mask, lengths[:, None] - 1 - t_idx, t_idx)
        bw = ad.gather_time(self._run_lstm(ad.gather_time(x, rev), "encoder.lstm_bw"), rev)
        out = ad.concat([fw, bw], axis=-1)
        if ragged:
            out = out * m3
        return out, (mask if ragged else None)

    def _run_lstm(self, x: Tensor, name: str) -> Tensor:
        p = self.params
        w_ih, w_hh, bias = p[name + ".w_ih"], p[name + ".w_hh"], p[name + ".bias"]
        B, T, _ = x.shape
        H = w_hh.shape[0]
        h = c = Tensor(np.zeros((B, H)))
        outs = []
        for t in range(T):
            h, c = ad.lstm_cell(x[:, t], h, c, w_ih, w_hh, bias)
            outs.append(h)
        return ad.stack(outs, axis=1)

    def memory(self, ids, lengths=None, training=False, rng=None) -> Memory:
        values, mask = self._encode(ids, lengths, training, rng)
        processed = ad.linear(values, self.params["decoder.attention.memory.weight"])
        return Memory(values, processed, mask)

    # -- decoder ----------------------------------------------------------------------
    def initial_state(self, memory: Memory) -> DecoderState:
        B, T, D = memory.values.shape
        H = self.config.dec_lstm_units
        z = lambda *s: Tensor(np.zeros(s))
        att = AttentionState(z(B, T), z(B, T), z(B, D))
        return DecoderState(z(B, H), z(B, H), z(B, H), z(B, H), att)

    def prenet(self, frames, training: bool, rng=None) -> Tensor:
        cfg, p = self.config, self.params
        x = ad.as_tensor(frames)
        for i in range(cfg.prenet_layers):
            x = ad.relu(ad.linear(x, p[f"decoder.prenet.{i}.weight"], p[f"decoder.prenet.{i}.bias"]))
            x = ad.dropout(x, cfg.prenet_dropout, rng, training)
        return x

    def attention_step(self, query: Tensor, memory: Memory, state: AttentionState, energy_bias=None) -> AttentionState:
        """Location-sensitive attention: energies see the previous and cumulative weights."""
        p, cfg = self.params, self.config
        B, T, _ = memory.values.shape
        if T == 0:
            raise ValueError("attention over an empty memory")
        pq = ad.linear(query, p["decoder.attention.query.weight"]).reshape(B, 1, cfg.attn_dim)
        loc = ad.stack([state.weights, state.cumulative], axis=-1)
        loc = ad.conv1d(loc, p["decoder.attention.location_conv.weight"], pad=(cfg.attn_location_kernel - 1) // 2)
        loc = ad.linear(loc, p["decoder.attention.location_dense.weight"])
        hidden = ad.tanh(pq + memory.processed + loc + p["decoder.attention.bias"])
        energies = ad.linear(hidden, p["decoder.attention.v.weight"]).reshape(B, T)
        if energy_bias is not None:
            energies = energies + energy_bias
        weights = ad.softmax(energies, axis=-1, mask=memory.mask)
        context = ad.matmul(weights.reshape(B, 1, T), memory.values).reshape(B, memory.values.shape[2])
        return AttentionState(weights, state.cumulative + weights, context)

    def _core(self, pre: Tensor, state: DecoderState, memory: Memory) -> tuple[Tensor, Tensor, DecoderState]:
        p = self.params
        ah, ac = ad.lstm_cell(
            ad.concat([pre, state.attention.context], axis=-1), state.attention_h, state.attention_c,
            p["decoder.attention_rnn.w_ih"], p["decoder.attention_rnn.w_hh"], p["decoder.attention_rnn.bias"],
        )
        att = self.attention_step(ah, memory, state.attention)
        dh, dc = ad.lstm_cell(
            ad.concat([ah, att.context], axis=-1), state.decoder_h, state.decoder_c,
            p["decoder.decoder_rnn.w_ih"], p["decoder.decoder_rnn.w_hh"], p["decoder.decoder_rnn.bias"],
        )
        out = ad.concat([dh, att.context], axis=-1)
        frame = ad.linear(out, p["decoder.frame_proj.weight"], p["decoder.frame_proj.bias"])
        stop = ad.linear(out, p["decoder.stop_proj.weight"], p["decoder.stop_proj.bias"])
        return frame, stop, DecoderState(ah, ac, dh, dc, att)

    def decode_step(self, prev_frame, state: DecoderState, memory: Memory, training=False, rng=None):
        """One decoder step from the previous frame [B, n_mels]; returns (frame, stop logit [B, 1], state)."""
        prev = ad.as_tensor(prev_frame)
        if prev.shape[-1] != self.config.mel_channels:
            raise ad.ShapeError(f"previous frame has {prev.shape[-1]} channels, expected {self.config.mel_channels}")
        return self._core(self.prenet(prev, training, rng), state, memory)

    # -- post-net ---------------------------------------------------------------------
    def postnet(self, mel: Tensor, mask=None, training: bool = False, rng=None) -> Tensor:
        """Residual predicted from the decoder output; ``mask`` is [B, S] of valid frames."""
        cfg, p = self.config, self.params
        pad = (cfg.postnet_kernel - 1) // 2
        m3 = None if mask is None else mask[..., None].astype(np.float64)
        x = mel if m3 is None else mel * m3
        last = cfg.postnet_layers - 1
        for i in range(cfg.postnet_layers):
            x = ad.conv1d(x, p[f"postnet.conv.{i}.weight"], p[f"postnet.conv.{i}.bias"], pad=pad)
            x = self._bn(x, f"postnet.bn.{i}", training, mask)
            if i < last or cfg.postnet_final_tanh:
                x = ad.tanh(x)
            x = ad.dropout(x, cfg.postnet_dropout, rng, training)
            if m3 is not None:
                x = x * m3
        return x

    # -- full passes ----------------------------------------------------------------------
    def forward_teacher_forced(
        self,
        ids,
        target,
        text_lengths=None,
        mel_lengths=None,
        training: bool = False,
        rng=None,
        encoder_training: bool | None = None,
    ) -> AcousticOutput:
        """Decode with ground-truth feeding: step t consumes target frame t-1 (zeros at t=0)."""
        target = np.asarray(target, dtype=np.float64)
        if target.ndim == 2:
            target = target[None]
        B, S, M = target.shape
        if S < 1:
            raise ValueError("empty target spectrogram")
        if M != self.config.mel_channels:
            raise ad.ShapeError(f"target has {M} mel channels, expected {self.config.mel_channels}")
        enc_train = training if encoder_training is None else encoder_training
        mem = self.memory(ids, text_lengths, enc_train, rng)
        frames_in = np.concatenate([np.zeros((B, 1, M)), target[:, :-1]], axis=1)
        pre_all = self.prenet(frames_in, training, rng)
        state = self.initial_state(mem)
        frames, stops, aligns = [], [], []
        for t in range(S):
            frame, stop, state = self._core(pre_all[:, t], state, mem)
            frames.append(frame)
            stops.append(stop)
            aligns.append(state.attention.weights.data)
        mel_pre = ad.stack(frames, axis=1)
        stop_logits = ad.concat(stops, axis=1)
        mel_mask = None
        if mel_lengths is not None:
            mel_mask = lengths_mask(mel_lengths, S)
            if mel_mask.all():
                mel_mask = None
        mel_post = mel_pre + self.postnet(mel_pre, mel_mask, training, rng)
        return AcousticOutput(mel_pre, mel_post, stop_logits, np.stack(aligns, axis=1))

    def loss(self, out: AcousticOutput, target, mel_lengths=None) -> tuple[Tensor, dict[str, float]]:
        """MSE(pre) + MSE(post) + weighted BCE(stop); padded frames are masked out."""
        target = np.asarray(target, dtype=np.float64)
        if target.ndim == 2:
            target = target[None]
        B, S, _ = target.shape
        if out.mel_pre.shape != target.shape or out.mel_post.shape != target.shape:
            raise ad.ShapeError(f"output {out.mel_pre.shape} vs target {target.shape}")
        lengths = np.full(B, S) if mel_lengths is None else np.asarray(mel_lengths)
        valid = lengths_mask(lengths, S)
        stop_t = np.zeros((B, S))
        stop_t[np.arange(B), lengths - 1] = 1.0
        m3 = valid[..., None]
        pre = ad.mse(out.mel_pre, target, m3)
        post = ad.mse(out.mel_post, target, m3)
        stop = ad.bce_with_logits(out.stop_logits, stop_t, valid, self.config.stop_pos_weight)
        total = pre + post + stop
        return total, {"mel_pre": pre.item(), "mel_post": post.item(), "stop": stop.item(), "total": total.item()}

    def infer(
        self,
        ids,
        max_decoder_steps: int | None = None,
        rng: np.random.Generator | None = None,
        prenet_dropout: bool | None = None,
        seed: int = 0,
    ) -> AcousticOutput:
        """Free-running generation for one utterance.

        Halts after the first frame whose stop probability exceeds the threshold,
        or at ``max_decoder_steps`` (``halted_by == "max_steps"``).
        """
        cfg = self.config
        limit = cfg.max_decoder_steps if max_decoder_steps is None else max_decoder_steps
        use_dropout = cfg.prenet_dropout_at_inference if prenet_dropout is None else prenet_dropout
        if use_dropout and rng is None:
            rng = np.random.default_rng(seed)
        with ad.no_grad():
            mem = self.memory(np.atleast_2d(ids), training=False)
            state = self.initial_state(mem)
            prev = Tensor(np.zeros((1, cfg.mel_channels)))
            frames, stops, aligns = [], [], []
            halted_by = "max_steps"
            for _ in range(limit):
                frame, stop, state = self._core(self.prenet(prev, use_dropout, rng), state, mem)
                frames.append(frame)
                stops.append(stop)
                aligns.append(state.attention.weights.data)
                if ad._sigmoid(stop.data[0, 0]) > cfg.stop_threshold:
                    halted_by = "stop_token"
                    break
                if cfg.feed_postnet_frames:
                    seq = ad.stack(frames, axis=1)
                    prev = (seq + self.postnet(seq))[:, -1]
                else:
                    prev = frame
            mel_pre = ad.stack(frames, axis=1)
            mel_post = mel_pre + self.postnet(mel_pre)
            return AcousticOutput(mel_pre, mel_post, ad.concat(stops, axis=1), np.stack(aligns, axis=1), halted_by)
