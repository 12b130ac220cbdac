"""Two-time-point risk model with attention alignment.

Pipeline per pair: shared encoder on both exams -> attention pooling ->
alignment block estimates a displacement field from the two attention maps
-> prior features warped onto the current geometry -> differential features
-> pooled (current, warped prior, differential + time-gap embedding) vectors
-> Gaussian latent (mu, logvar) -> year-class softmax.  A shared single-exam
head predicts from each exam's own pooled vector for the multi-level loss.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterator, Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, ValidationError
from .tensor import DimensionError, Tensor


# ---------------------------------------------------------------------------
# layers


class Module:
    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, T.BatchNormState]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, T.BatchNormState):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_buffers(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _param(data) -> Tensor:
    return Tensor(data, requires_grad=True)


class Conv2d(Module):
    def __init__(self, cin, cout, k, rng, stride=1, pad=0, bias=False, zero_init=False):
        std = math.sqrt(2.0 / (cin * k * k))
        w = np.zeros((cout, cin, k, k)) if zero_init else rng.normal(0, std, (cout, cin, k, k))
        self.weight = _param(w)
        self.bias = _param(np.zeros(cout)) if bias else None
        self.stride, self.pad = stride, pad

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.stride, self.pad, self.bias)


class BatchNorm2d(Module):
    def __init__(self, c, momentum=0.1, eps=1e-5):
        self.gamma = _param(np.ones(c))
        self.beta = _param(np.zeros(c))
        self.state = T.BatchNormState(c, momentum, eps)

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        return T.batchnorm2d(x, self.gamma, self.beta, self.state, mode)


class Linear(Module):
    def __init__(self, fan_in, fan_out, rng, std=None):
        std = math.sqrt(1.0 / fan_in) if std is None else std
        self.weight = _param(rng.normal(0, std, (fan_in, fan_out)))
        self.bias = _param(np.zeros(fan_out))

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class ConvBNReLU(Module):
    def __init__(self, cin, cout, k, stride, rng):
        self.conv = Conv2d(cin, cout, k, rng, stride=stride, pad=k // 2)
        self.bn = BatchNorm2d(cout)

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        return T.relu(self.bn(self.conv(x), mode))


# ---------------------------------------------------------------------------
# config


@dataclass
class ModelConfig:
    image_height: int = 64
    image_width: int = 32
    widths: tuple[int, ...] = (16, 32, 64, 64)
    strides: tuple[int, ...] = (1, 2, 2, 2)
    kernel: int = 3
    align_hidden: int = 16
    head_hidden: int = 64
    latent_dim: int = 64
    horizon: int = 5
    logvar_clamp: float = 10.0
    stp_mode: bool = False
    use_alignment: bool = True

    def feature_dims(self) -> tuple[int, int, int]:
        """(c, h, w) of the encoder output."""
        h, w = self.image_height, self.image_width
        p = self.kernel // 2
        for s in self.strides:
            h = (h + 2 * p - self.kernel) // s + 1
            w = (w + 2 * p - self.kernel) // s + 1
        return self.widths[-1], h, w

    def validate(self) -> None:
        if len(self.widths) != len(self.strides) or not self.widths:
            raise ConfigError("widths and strides must be non-empty and the same length")
        c, h, w = self.feature_dims()
        if h < 4 or w < 4:
            raise ConfigError(f"encoder output {h}x{w} is smaller than 4x4")
        if c % 2:
            raise ConfigError(f"feature width {c} must be even for the time-gap embedding")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model options: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


# ---------------------------------------------------------------------------
# read-outs


def time_gap_embedding(gap_years, d: int) -> np.ndarray:
    """Sinusoidal embedding of the gap quantised to months; shape (d,) or (b, d)."""
    gap = np.asarray(gap_years, dtype=np.float64)
    if np.any(gap < 0):
        raise ValidationError(f"negative time gap {gap.min()}")
    if d % 2:
        raise ValidationError(f"embedding dim must be even, got {d}")
    pos = np.floor(12.0 * gap + 0.5)
    freq = 10000.0 ** (-np.arange(0, d, 2) / d)
    angle = pos[..., None] * freq
    pe = np.empty(gap.shape + (d,))
    pe[..., 0::2] = np.sin(angle)
    pe[..., 1::2] = np.cos(angle)
    return pe


def risk_m(y_hat, m: int) -> np.ndarray:
    """Risk within m years: sum of the first m year-class probabilities."""
    y = np.asarray(y_hat, dtype=np.float64)
    n = y.shape[-1] - 1
    if not 1 <= m <= n:
        raise ValueError(f"m must be in 1..{n}, got {m}")
    return y[..., :m].sum(axis=-1)


def expected_time(y_hat) -> np.ndarray:
    """Expected year class sum_i i*y_i, in [1, n+1]."""
    y = np.asarray(y_hat, dtype=np.float64)
    if np.any(np.abs(y.sum(axis=-1) - 1.0) > 1e-4):
        raise ValidationError("expected_time needs a normalised probability vector")
    return y @ np.arange(1, y.shape[-1] + 1)


# ---------------------------------------------------------------------------
# model


@dataclass
class ModelOutputs:
    y_fused: Tensor
    y_cur: Tensor
    y_pri: Tensor
    phi: Tensor
    a_cur: Tensor
    a_pri: Tensor
    a_dif: Tensor
    mu: Tensor
    logvar: Tensor
    z: Tensor
    f_cur: Tensor
    f_pri: Tensor
    f_pri_warped: Tensor
    f_dif: Tensor
    extras: dict = field(default_factory=dict)


def _as_input(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class RiskModel(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng([seed, 0x0DE1])
        c, h, w = cfg.feature_dims()
        chans = (1,) + tuple(cfg.widths)
        self.encoder = [ConvBNReLU(chans[i], chans[i + 1], cfg.kernel, cfg.strides[i], rng)
                        for i in range(len(cfg.widths))]
        self.pool_w = _param(rng.normal(0, 0.1, c))
        self.dif_pool_w = _param(rng.normal(0, 0.1, c))
        self.align1 = Conv2d(2, cfg.align_hidden, 3, rng, pad=1)
        self.align_bn = BatchNorm2d(cfg.align_hidden)
        self.align2 = Conv2d(cfg.align_hidden, 2, 3, rng, pad=1, bias=True, zero_init=True)
        self.fc1 = Linear(3 * c, cfg.head_hidden, rng, std=math.sqrt(2.0 / (3 * c)))
        self.fc2 = Linear(cfg.head_hidden, 2 * cfg.latent_dim, rng)
        self.classifier = Linear(cfg.latent_dim, cfg.horizon + 1, rng)
        self.single_head = Linear(c, cfg.horizon + 1, rng)

    def encode(self, images, mode: str = "eval") -> Tensor:
        x = _as_input(images)
        squeeze = x.ndim == 3
        if squeeze:
            x = T.reshape(x, (1,) + x.shape)
        if x.ndim != 4 or x.shape[1:] != (1, self.cfg.image_height, self.cfg.image_width):
            raise DimensionError(f"expected images of shape (b, 1, {self.cfg.image_height}, "
                                 f"{self.cfg.image_width}), got {x.shape}")
        for block in self.encoder:
            x = block(x, mode)
        return x[0] if squeeze else x

    def pool(self, f: Tensor, which: str = "exam"):
        return T.attention_softmax_pool(f, self.pool_w if which == "exam" else self.dif_pool_w)

    def align(self, a_cur: Tensor, a_pri: Tensor, f_pri: Tensor, mode: str = "eval"):
        """Displacement field from the paired attention maps, and the warped prior features."""
        if a_cur.shape != a_pri.shape or a_cur.shape != (f_pri.shape[0],) + f_pri.shape[2:]:
            raise DimensionError(f"align: attention {a_cur.shape}/{a_pri.shape} vs features {f_pri.shape}")
        b, h, w = a_cur.shape
        maps = T.concat([T.reshape(a_cur, (b, 1, h, w)), T.reshape(a_pri, (b, 1, h, w))], axis=1)
        # uniform attention -> 1 so the block sees a resolution-free scale
        maps = maps * float(h * w)
        hidden = T.relu(self.align_bn(self.align1(maps), mode))
        phi = self.align2(hidden)
        return phi, T.spatial_transform(f_pri, phi)

    def forward(self, prior, current, gap_years, mode: str = "eval",
                rng: Optional[np.random.Generator] = None, eps: Optional[np.ndarray] = None) -> ModelOutputs:
        if mode not in ("train", "eval"):
            raise ValueError(f"unknown mode {mode!r}")
        cfg = self.cfg
        prior, current = _as_input(prior), _as_input(current)
        if prior.shape != current.shape:
            raise DimensionError(f"prior {prior.shape} and current {current.shape} differ")
        b = current.shape[0]
        gap = np.broadcast_to(np.asarray(gap_years, dtype=np.float64), (b,))

        if cfg.stp_mode:
            f_cur = self.encode(current, mode)
            f_pri = T.zeros(f_cur.shape)
        else:
            f_both = self.encode(T.concat([current, prior], axis=0), mode)
            f_cur, f_pri = f_both[:b], f_both[b:]
        a_cur, v_cur = self.pool(f_cur)
        a_pri, v_pri = self.pool(f_pri)

        if cfg.use_alignment and not cfg.stp_mode:
            phi, f_hat = self.align(a_cur, a_pri, f_pri, mode)
        else:
            phi, f_hat = T.zeros((b, 2) + f_cur.shape[2:]), f_pri
        f_dif = f_cur - f_hat
        _, v_hat = self.pool(f_hat)
        a_dif, v_dif = self.pool(f_dif, "dif")
        if not cfg.stp_mode:
            v_dif = v_dif + Tensor(time_gap_embedding(gap, v_dif.shape[1]))

        fused = T.concat([v_cur, v_hat, v_dif], axis=1)
        stats = self.fc2(T.relu(self.fc1(fused)))
        L = cfg.latent_dim
        mu = stats[:, :L]
        logvar = T.clip(stats[:, L:], -cfg.logvar_clamp, cfg.logvar_clamp)
        if mode == "train":
            if eps is None:
                rng = rng if rng is not None else np.random.default_rng()
                eps = rng.standard_normal(mu.shape)
            z = mu + T.exp(logvar * 0.5) * Tensor(eps)
        else:
            z = mu
        return ModelOutputs(
            y_fused=T.softmax(self.classifier(z)),
            y_cur=T.softmax(self.single_head(v_cur)),
            y_pri=T.softmax(self.single_head(v_pri)),
            phi=phi, a_cur=a_cur, a_pri=a_pri, a_dif=a_dif,
            mu=mu, logvar=logvar, z=z,
            f_cur=f_cur, f_pri=f_pri, f_pri_warped=f_hat, f_dif=f_dif,
        )

    __call__ = forward

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {name: p.data for name, p in self.named_parameters()}
        for name, st in self.named_buffers():
            out[f"{name}.running_mean"] = st.running_mean
            out[f"{name}.running_var"] = st.running_var
            out[f"{name}.initialized"] = np.array([int(st.initialized)], dtype=np.uint8)
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        for name, p in params.items():
            if name not in arrays:
                raise KeyError(f"checkpoint is missing parameter {name}")
            if arrays[name].shape != p.shape:
                raise DimensionError(f"{name}: checkpoint shape {arrays[name].shape} vs model {p.shape}")
            p.data = arrays[name].astype(p.dtype, copy=True)
        for name, st in self.named_buffers():
            st.running_mean = arrays[f"{name}.running_mean"].astype(np.float64, copy=True)
            st.running_var = arrays[f"{name}.running_var"].astype(np.float64, copy=True)
            st.initialized = bool(arrays[f"{name}.initialized"][0])

    def cast(self, dtype) -> "RiskModel":
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
        return self
