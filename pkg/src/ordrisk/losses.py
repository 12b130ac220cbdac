"""Loss stack: masked BCE, mean-variance, probabilistic ordinal embedding, registration.

All batch losses average per-sample values over the batch.  Terms that only
make sense for a known time class (mean-variance, the ordinal triplets) use
only samples whose class is determined by follow-up.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, ValidationError
from .tensor import DimensionError, Tensor

PROB_CLAMP = 1e-7

TERM_NAMES = ("L_bce_fused", "L_bce_cur", "L_bce_pri", "L_mv", "L_ord", "L_kl", "L_reg")


@dataclass(frozen=True)
class LossWeights:
    bce: float = 1.0
    ml: float = 0.5
    mv: float = 0.2
    poe: float = 0.1
    reg: float = 0.1
    margin: float = 0.5
    triplets: int = 16

    def validate(self) -> None:
        if self.bce <= 0:
            raise ConfigError("bce weight must be > 0")
        for name in ("ml", "mv", "poe", "reg", "margin"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} weight must be >= 0")
        if self.triplets < 1:
            raise ConfigError("triplets per batch must be >= 1")

    def ablate(self, disable_mv=False, disable_poe=False, disable_align=False, disable_ml=False,
               stp_mode=False) -> "LossWeights":
        """Weights with the switched-off terms zeroed."""
        w = self
        if disable_mv:
            w = replace(w, mv=0.0)
        if disable_poe:
            w = replace(w, poe=0.0)
        if disable_align or stp_mode:
            w = replace(w, reg=0.0)
        if disable_ml or stp_mode:
            w = replace(w, ml=0.0)
        return w

    def term_weights(self) -> dict[str, float]:
        return {"L_bce_fused": self.bce, "L_bce_cur": self.ml, "L_bce_pri": self.ml, "L_mv": self.mv,
                "L_ord": self.poe, "L_kl": self.poe, "L_reg": self.reg}

    @classmethod
    def from_dict(cls, d: dict) -> "LossWeights":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown loss options: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def _const(x, like: Tensor) -> Tensor:
    return Tensor(np.asarray(x), dtype=like.dtype)


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    return (T.reshape(x, (1,) + x.shape), True) if x.ndim == 1 else (x, False)


def masked_bce(y_hat: Tensor, y, delta) -> Tensor:
    """sum_i delta_i * BCE(y_hat_i, y_i); batch input gives the batch mean."""
    y_hat, _ = _batched(y_hat)
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    delta = np.atleast_2d(np.asarray(delta, dtype=np.float64))
    if y.shape != y_hat.shape or delta.shape != y_hat.shape:
        raise DimensionError(f"masked_bce: y_hat {y_hat.shape}, y {y.shape}, delta {delta.shape}")
    p = T.clip(y_hat, PROB_CLAMP, 1 - PROB_CLAMP)
    pos = T.log(p) * _const(-y, p)
    neg = T.log(1.0 - p) * _const(-(1 - y), p)
    per = T.tsum((pos + neg) * _const(delta, p), axis=1)
    return T.mean(per)


def mv_loss(y_hat: Tensor, t_class) -> Tensor:
    """(t_hat - t)^2 + sum_i y_i (i - t_hat)^2 with t the integer year class."""
    y_hat, _ = _batched(y_hat)
    b, k = y_hat.shape
    t = np.atleast_1d(np.asarray(t_class))
    if t.shape != (b,):
        raise DimensionError(f"mv_loss: {b} predictions vs {t.shape} targets")
    if np.any(t < 1) or np.any(t > k) or np.any(t != np.round(t)):
        raise ValidationError(f"mv_loss: time classes must be integers in 1..{k}, got {t.tolist()}")
    idx = np.broadcast_to(np.arange(1, k + 1, dtype=np.float64), (b, k))
    t_hat = T.tsum(y_hat * _const(idx, y_hat), axis=1)
    mean_term = T.square(t_hat - _const(t.astype(np.float64), y_hat))
    dev = _const(idx, y_hat) - T.broadcast_to(T.reshape(t_hat, (b, 1)), (b, k))
    var_term = T.tsum(y_hat * T.square(dev), axis=1)
    return T.mean(mean_term + var_term)


def kl_std_normal(mu: Tensor, logvar: Tensor) -> Tensor:
    """KL(N(mu, exp(logvar)) || N(0, I)), summed over dims, averaged over the batch."""
    mu, _ = _batched(mu)
    logvar, _ = _batched(logvar)
    if mu.shape != logvar.shape:
        raise DimensionError(f"kl: mu {mu.shape} vs logvar {logvar.shape}")
    per = T.tsum(T.square(mu) + T.exp(logvar) - 1.0 - logvar, axis=1) * 0.5
    return T.mean(per)


def ordinal_triplet(z_a: Tensor, z_p: Tensor, z_n: Tensor, margin: float = 0.5) -> Tensor:
    """max(0, |z_a - z_p| - |z_a - z_n| + margin), averaged over rows."""
    z_a, _ = _batched(z_a)
    z_p, _ = _batched(z_p)
    z_n, _ = _batched(z_n)
    hinge = T.relu(T.l2norm(z_a - z_p) - T.l2norm(z_a - z_n) + margin)
    return T.mean(hinge)


def sample_triplets(t_classes: Sequence[Optional[int]], count: int, rng: np.random.Generator):
    """Index triplets (a, p, n) with |t_a - t_p| < |t_a - t_n|.

    Needs at least three distinct known classes; otherwise returns None.
    Unknown classes are passed as None or 0.
    """
    t = np.array([0 if c is None else c for c in t_classes], dtype=np.int64)
    known = np.flatnonzero(t > 0)
    if len(np.unique(t[known])) < 3:
        return None
    ta = t[known]
    a, p, n = np.meshgrid(np.arange(len(known)), np.arange(len(known)), np.arange(len(known)), indexing="ij")
    d_ap = np.abs(ta[a] - ta[p])
    d_an = np.abs(ta[a] - ta[n])
    valid = (d_ap < d_an) & (a != p)
    cand = np.stack([a[valid], p[valid], n[valid]], axis=1)
    pick = rng.choice(len(cand), size=count, replace=len(cand) < count)
    return known[cand[pick]]


def poe_loss(mu: Tensor, logvar: Tensor, t_classes, margin: float = 0.5, n_triplets: int = 16,
             rng: Optional[np.random.Generator] = None, z: Optional[Tensor] = None):
    """Ordinal triplet term on embeddings plus KL to the standard normal.

    ``z`` defaults to ``mu``; pass the reparameterised sample in training.
    Returns (total, ordinal, kl).
    """
    kl = kl_std_normal(mu, logvar)
    z = mu if z is None else z
    trip = sample_triplets(t_classes, n_triplets, rng if rng is not None else np.random.default_rng(0))
    if trip is None:
        ordinal = _const(0.0, kl)
    else:
        ordinal = ordinal_triplet(z[trip[:, 0]], z[trip[:, 1]], z[trip[:, 2]], margin)
    return ordinal + kl, ordinal, kl


def reg_loss(f_hat: Tensor, f_cur: Tensor) -> Tensor:
    """Mean squared difference between warped prior and current features."""
    if f_hat.shape != f_cur.shape:
        raise DimensionError(f"reg_loss: {f_hat.shape} vs {f_cur.shape}")
    return T.mean(T.square(f_hat - f_cur))


@dataclass
class LabelBatch:
    """Stacked per-exam supervision for a batch of pairs."""

    y_cur: np.ndarray
    delta_cur: np.ndarray
    class_cur: np.ndarray  # 0 = unknown
    y_pri: np.ndarray
    delta_pri: np.ndarray

    @classmethod
    def from_labels(cls, current, prior) -> "LabelBatch":
        return cls(np.stack([l.y for l in current]), np.stack([l.delta for l in current]),
                   np.array([l.class_index or 0 for l in current], dtype=np.int64),
                   np.stack([l.y for l in prior]), np.stack([l.delta for l in prior]))

    def __len__(self):
        return len(self.class_cur)


@dataclass
class LossResult:
    total: Tensor
    terms: dict[str, float]
    contributions: dict[str, float]


def total_loss(outputs, labels: LabelBatch, w: LossWeights, rng: Optional[np.random.Generator] = None) -> LossResult:
    """Weighted composite; ``terms`` are raw values, ``contributions`` are weight × term."""
    w.validate()
    rng = rng if rng is not None else np.random.default_rng(0)
    terms: dict[str, Tensor] = {
        "L_bce_fused": masked_bce(outputs.y_fused, labels.y_cur, labels.delta_cur),
        "L_bce_cur": masked_bce(outputs.y_cur, labels.y_cur, labels.delta_cur),
        "L_bce_pri": masked_bce(outputs.y_pri, labels.y_pri, labels.delta_pri),
    }
    known = np.flatnonzero(labels.class_cur > 0)
    if len(known):
        terms["L_mv"] = mv_loss(outputs.y_fused[known], labels.class_cur[known])
    else:
        terms["L_mv"] = _const(0.0, outputs.y_fused)
    _, ordinal, kl = poe_loss(outputs.mu, outputs.logvar, labels.class_cur, w.margin, w.triplets, rng, z=outputs.z)
    terms["L_ord"], terms["L_kl"] = ordinal, kl
    terms["L_reg"] = reg_loss(outputs.f_pri_warped, outputs.f_cur)

    weights = w.term_weights()
    total = None
    contributions = {}
    for name in TERM_NAMES:
        piece = terms[name] * weights[name]
        contributions[name] = piece.item()
        total = piece if total is None else total + piece
    values = {name: terms[name].item() for name in TERM_NAMES}
    values["total"] = total.item()
    return LossResult(total, values, contributions)
