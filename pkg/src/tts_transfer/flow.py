"""WaveGlow-style flow vocoder at desk scale.

Audio is squeezed into groups of ``n_group`` consecutive samples, laid out as
[B, L, n_group] (time-major, channels last). Each flow step mixes the channels
with an invertible matrix and then applies an affine coupling whose scale and
shift come from a gated dilated-conv net that sees the untouched half and the
mel frame covering the group. Some channels leave early and skip the remaining
flows.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as ad
from .audio import DEFAULT_AUDIO, MelSpectrogram, Waveform
from .autodiff import Tensor

PREFIX = "flow."


class SingularMixingError(ValueError):
    pass


@dataclass(frozen=True)
class FlowConfig:
    n_flows: int = 4
    n_group: int = 8
    n_early_every: int = 2
    n_early_size: int = 2
    wn_layers: int = 4
    wn_channels: int = 64
    wn_kernel: int = 3
    sigma: float = 1.0
    mel_channels: int = 80
    hop_length: int = DEFAULT_AUDIO.hop_length

    def __post_init__(self):
        if self.n_group < 2 or self.n_group % 2:
            raise ValueError("n_group must be even")
        if self.hop_length % self.n_group:
            raise ValueError("hop_length must be a multiple of n_group so groups never straddle frames")
        if self.wn_kernel % 2 == 0:
            raise ValueError("wn_kernel must be odd")
        for name in ("n_flows", "n_early_every", "wn_layers", "wn_channels", "mel_channels"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        remaining = self.n_group
        for k in range(self.n_flows):
            if self._emits(k):
                if not self.n_early_size < remaining:
                    raise ValueError(f"early output of {self.n_early_size} at flow {k} leaves no channels")
                remaining -= self.n_early_size
            if remaining < 2:
                raise ValueError(f"flow {k} has {remaining} channel(s); coupling needs at least 2")

    def _emits(self, k: int) -> bool:
        return k > 0 and self.n_early_size > 0 and k % self.n_early_every == 0

    def channels(self) -> list[int]:
        """Channel count entering each flow step."""
        out, c = [], self.n_group
        for k in range(self.n_flows):
            if self._emits(k):
                c -= self.n_early_size
            out.append(c)
        return out

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FlowConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    @classmethod
    def toy(cls, **overrides) -> "FlowConfig":
        base = dict(n_flows=4, n_group=4, n_early_every=2, n_early_size=2, wn_layers=2, wn_channels=8)
        base.update(overrides)
        return cls(**base)


def init_flow_parameters(cfg: FlowConfig, seed: int = 0) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    p: dict[str, np.ndarray] = {}
    H, K, M = cfg.wn_channels, cfg.wn_kernel, cfg.mel_channels

    def xavier(shape, fan_in, fan_out):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-lim, lim, size=shape)

    for k, c in enumerate(cfg.channels()):
        pre = f"{PREFIX}{k}."
        q, r = np.linalg.qr(rng.standard_normal((c, c)))
        p[pre + "mix"] = q * np.sign(np.diag(r))[None, :]
        half, rest = c // 2, c - c // 2
        p[pre + "wn.start.weight"] = xavier((half, H), half, H)
        p[pre + "wn.start.bias"] = np.zeros(H)
        for i in range(cfg.wn_layers):
            last = i == cfg.wn_layers - 1
            p[pre + f"wn.in.{i}.weight"] = xavier((2 * H, H, K), H * K, 2 * H * K)
            p[pre + f"wn.in.{i}.bias"] = np.zeros(2 * H)
            p[pre + f"wn.cond.{i}.weight"] = xavier((M, 2 * H), M, 2 * H)
            width = H if last else 2 * H
            p[pre + f"wn.res_skip.{i}.weight"] = xavier((H, width), H, width)
            p[pre + f"wn.res_skip.{i}.bias"] = np.zeros(width)
        # zero output layer: every coupling starts as the identity
        p[pre + "wn.end.weight"] = np.zeros((H, 2 * rest))
        p[pre + "wn.end.bias"] = np.zeros(2 * rest)
    return p


def nll_loss(z: Tensor, log_det: Tensor, sigma: float = 1.0) -> Tensor:
    """Negative log-likelihood per element, without the Gaussian normaliser."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    n = z.data.size
    return ((z * z).sum() * (0.5 / sigma**2) - log_det) * (1.0 / n)


class FlowVocoder:
    def __init__(self, config: FlowConfig, params: dict[str, np.ndarray] | None = None, seed: int = 0):
        self.config = config
        if params is None:
            params = init_flow_parameters(config, seed)
        self.params: dict[str, Tensor] = {k: Tensor(v, requires_grad=True, name=k) for k, v in params.items()}
        self.check_invertible()

    def parameter_arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.params.items()}

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def check_invertible(self, min_abs_det: float = 1e-8) -> None:
        for k in range(self.config.n_flows):
            det = abs(np.linalg.det(self.params[f"{PREFIX}{k}.mix"].data))
            if not det > min_abs_det:
                raise SingularMixingError(f"mixing matrix of flow {k} is singular (|det| = {det:.3e})")

    # -- geometry ------------------------------------------------------------------------
    def _conditioning(self, mel, n_samples: int) -> Tensor:
        """Mel frame for every group: group l sits inside frame (l * n_group) // hop."""
        cfg = self.config
        m = mel.values if isinstance(mel, MelSpectrogram) else np.asarray(mel, dtype=np.float64)
        if m.ndim == 2:
            m = m[None]
        if m.shape[-1] != cfg.mel_channels:
            raise ad.ShapeError(f"mel has {m.shape[-1]} channels, expected {cfg.mel_channels}")
        need = -(-n_samples // cfg.hop_length)
        if m.shape[1] != need:
            raise ValueError(
                f"{n_samples} samples need {need} mel frames at hop {cfg.hop_length}, got {m.shape[1]}"
            )
        frame = (np.arange(n_samples // cfg.n_group) * cfg.n_group) // cfg.hop_length
        return Tensor(m[:, frame, :])

    def _squeeze(self, audio) -> np.ndarray:
        x = audio.samples if isinstance(audio, Waveform) else np.asarray(audio, dtype=np.float64)
        if x.ndim == 1:
            x = x[None]
        if x.shape[1] == 0 or x.shape[1] % self.config.n_group:
            raise ValueError(f"audio length {x.shape[1]} is not a positive multiple of n_group={self.config.n_group}")
        return x.reshape(x.shape[0], -1, self.config.n_group)

    # -- coupling net ----------------------------------------------------------------------
    def _wn(self, k: int, a0: Tensor, cond: Tensor) -> tuple[Tensor, Tensor]:
        cfg, p = self.config, self.params
        pre = f"{PREFIX}{k}.wn."
        H = cfg.wn_channels
        h = ad.linear(a0, p[pre + "start.weight"], p[pre + "start.bias"])
        skip = None
        for i in range(cfg.wn_layers):
            dil = 2**i
            act = ad.conv1d(h, p[pre + f"in.{i}.weight"], p[pre + f"in.{i}.bias"], pad=dil * (cfg.wn_kernel - 1) // 2, dilation=dil)
            act = act + ad.linear(cond, p[pre + f"cond.{i}.weight"])
            gated = ad.tanh(act[..., :H]) * ad.sigmoid(act[..., H:])
            rs = ad.linear(gated, p[pre + f"res_skip.{i}.weight"], p[pre + f"res_skip.{i}.bias"])
            if i < cfg.wn_layers - 1:
                h = h + rs[..., :H]
                s = rs[..., H:]
            else:
                s = rs
            skip = s if skip is None else skip + s
        out = ad.linear(skip, p[pre + "end.weight"], p[pre + "end.bias"])
        rest = out.shape[-1] // 2
        return out[..., :rest], out[..., rest:]

    # -- transforms --------------------------------------------------------------------------
    def forward(self, audio, mel) -> tuple[Tensor, Tensor]:
        """Audio [B, N] (or [N]) and mel [B, F, 80] -> (z [B, N/n_group, n_group], total log|det J|)."""
        cfg, p = self.config, self.params
        x = self._squeeze(audio)
        cond = self._conditioning(mel, x.shape[1] * cfg.n_group)
        if cond.shape[0] != x.shape[0]:
            raise ValueError(f"batch of {x.shape[0]} waveforms but {cond.shape[0]} spectrograms")
        B, L, _ = x.shape
        a: Tensor = Tensor(x)
        log_det: Tensor = Tensor(np.zeros(()))
        early: list[Tensor] = []
        for k, c in enumerate(cfg.channels()):
            if cfg._emits(k):
                early.append(a[..., : cfg.n_early_size])
                a = a[..., cfg.n_early_size :]
            W = p[f"{PREFIX}{k}.mix"]
            a = ad.matmul(a, W)
            log_det = log_det + ad.logabsdet(W) * float(B * L)
            half = c // 2
            a0, a1 = a[..., :half], a[..., half:]
            log_s, t = self._wn(k, a0, cond)
            a1 = ad.exp(log_s) * a1 + t
            log_det = log_det + log_s.sum()
            a = ad.concat([a0, a1], axis=-1)
        return ad.concat(early + [a], axis=-1), log_det

    def inverse(self, z, mel) -> np.ndarray:
        """Exact inverse of :meth:`forward`; returns audio [B, N]."""
        cfg, p = self.config, self.params
        z = np.asarray(z.data if isinstance(z, Tensor) else z, dtype=np.float64)
        if z.ndim == 2:
            z = z[None]
        if z.shape[-1] != cfg.n_group:
            raise ad.ShapeError(f"z has {z.shape[-1]} channels per group, expected {cfg.n_group}")
        B, L, _ = z.shape
        cond = self._conditioning(mel, L * cfg.n_group)
        chans = cfg.channels()
        n_early = sum(cfg._emits(k) for k in range(cfg.n_flows))
        a = z[..., n_early * cfg.n_early_size :]
        e = n_early
        with ad.no_grad():
            for k in reversed(range(cfg.n_flows)):
                half = chans[k] // 2
                a0, a1 = a[..., :half], a[..., half:]
                log_s, t = self._wn(k, Tensor(a0), cond)
                a1 = (a1 - t.data) * np.exp(-log_s.data)
                W = p[f"{PREFIX}{k}.mix"].data
                if not abs(np.linalg.det(W)) > 1e-8:
                    raise SingularMixingError(f"mixing matrix of flow {k} is singular")
                a = np.linalg.solve(W.T, np.concatenate([a0, a1], axis=-1).reshape(-1, chans[k]).T).T.reshape(B, L, -1)
                if cfg._emits(k):
                    e -= 1
                    a = np.concatenate([z[..., e * cfg.n_early_size : (e + 1) * cfg.n_early_size], a], axis=-1)
        return a.reshape(B, L * cfg.n_group)

    def loss(self, audio, mel) -> Tensor:
        z, log_det = self.forward(audio, mel)
        return nll_loss(z, log_det, self.config.sigma)

    def synthesize(self, mel, sigma: float = 0.6, seed: int = 0) -> Waveform:
        """Draw z ~ N(0, sigma^2) and invert; output length is frames * hop."""
        if not 0.0 <= sigma <= 1.0:
            raise ValueError("sigma must lie in [0, 1]")
        cfg = self.config
        m = mel.values if isinstance(mel, MelSpectrogram) else np.asarray(mel, dtype=np.float64)
        if m.ndim == 3:
            if m.shape[0] != 1:
                raise ValueError("synthesize handles one spectrogram at a time")
            m = m[0]
        L = m.shape[0] * cfg.hop_length // cfg.n_group
        z = sigma * np.random.default_rng(seed).standard_normal((1, L, cfg.n_group))
        return Waveform(self.inverse(z, m[None])[0], DEFAULT_AUDIO.sample_rate)
