"""Synthetic longitudinal screening cohort with known event times and deformations.

Each patient gets one prior/current exam pair.  A latent risk score drives
both the event time (higher risk, earlier event) and the growth rate of a
lesion that appears only in event-bound patients.  Static "distractor"
densities look like lesions but do not change between exams, so the growth
between the two time points carries information the current image alone
does not.  The prior image is the same anatomy seen through a smooth
compression-like deformation; ``deformation_gt`` warps it back onto the
current geometry.

Randomness for patient ``pid`` derives only from ``(seed, pid)``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .serialization import load_tensor, save_tensor
from .errors import ConfigError, ValidationError
from .tensor import bilinear_sample


# ---------------------------------------------------------------------------
# labels


@dataclass(frozen=True)
class RiskLabel:
    event: bool
    time_to_event_years: Optional[float]
    followup_years: float
    n: int
    class_index: Optional[int]  # 1..n+1, None when censored inside the horizon
    y: np.ndarray
    delta: np.ndarray

    @property
    def class_known(self) -> bool:
        return self.class_index is not None


def make_label(event: bool, time_to_event_years: Optional[float], followup_years: float, n: int = 5) -> RiskLabel:
    """Year-class target and follow-up mask for one exam.

    ``delta[i-1] = 1`` iff follow-up >= min(i, n) or the event is diagnosed
    within n years.  An event later than n years counts as cancer-free over
    the horizon (class n+1).
    """
    if n < 1:
        raise ValidationError(f"horizon must be >= 1, got {n}")
    if followup_years is None or followup_years < 0:
        raise ValidationError(f"followup_years must be >= 0, got {followup_years}")
    if event and (time_to_event_years is None or time_to_event_years <= 0):
        raise ValidationError(f"an event needs time_to_event_years > 0, got {time_to_event_years}")
    if not event and time_to_event_years is not None and time_to_event_years < 0:
        raise ValidationError(f"negative time_to_event_years {time_to_event_years}")

    idx = np.arange(1, n + 2)
    y = np.zeros(n + 1, dtype=np.float64)
    if event and time_to_event_years <= n:
        c = int(min(max(math.ceil(time_to_event_years), 1), n))
        delta = np.ones(n + 1)
    else:
        observed = max(followup_years, time_to_event_years) if event else followup_years
        delta = (observed >= np.minimum(idx, n)).astype(np.float64)
        c = n + 1 if observed >= n else None
    if c is not None:
        y[c - 1] = 1.0
    return RiskLabel(bool(event), None if not event else float(time_to_event_years),
                     float(followup_years), n, c, y, delta)


# ---------------------------------------------------------------------------
# records


@dataclass(frozen=True)
class PatientState:
    patient_id: int
    risk_score: float
    event_bound: bool
    lesion_center: tuple[float, float]
    lesion_growth_rate: float
    tissue_texture_seed: int
    event_time_true: float  # inf when not event-bound
    censor_time: float


@dataclass
class ExamRecord:
    patient_id: int
    exam_index: int  # 0 prior, 1 current
    image: np.ndarray  # 1×H×W float32
    exam_time_years: float
    deformation_gt: Optional[np.ndarray] = None  # 2×H×W, current -> prior sampling offsets


@dataclass
class ExamPair:
    prior: ExamRecord
    current: ExamRecord
    gap_years: float
    label_current: RiskLabel
    label_prior: RiskLabel
    patient: Optional[PatientState] = None
    lesion_radius_prior: float = 0.0
    lesion_radius_current: float = 0.0
    split: str = ""

    @property
    def patient_id(self) -> int:
        return self.current.patient_id

    def lesion_bbox(self) -> Optional[tuple[int, int, int, int]]:
        """(y0, y1, x0, x1) half-open pixel box of the current lesion, or None."""
        if self.patient is None or self.lesion_radius_current <= 0:
            return None
        return _bbox(self.patient.lesion_center, self.lesion_radius_current, self.current.image.shape[-2:])


def _bbox(center, radius, hw):
    h, w = hw
    cy, cx = center
    y0 = max(int(math.floor(cy - radius)), 0)
    y1 = min(int(math.ceil(cy + radius)) + 1, h)
    x0 = max(int(math.floor(cx - radius)), 0)
    x1 = min(int(math.ceil(cx + radius)) + 1, w)
    return y0, y1, x0, x1


# ---------------------------------------------------------------------------
# generation


FULL_SCALE_SIZE = (1024, 512)


@dataclass
class GenConfig:
    n_patients: int = 1000
    event_fraction: float = 0.35
    censor_fraction: float = 0.3
    image_height: int = 64
    image_width: int = 32
    signal_strength: float = 1.0
    horizon: int = 5
    gap_range: tuple[float, float] = (1.0, 3.0)
    event_time_range: tuple[float, float] = (0.3, 6.5)
    event_time_noise: float = 0.2
    growth_scale: float = 1.2  # lesion radius growth in px/year at risk_score 1
    lesion_base_radius: tuple[float, float] = (0.8, 1.5)
    lesion_amplitude: float = 0.35
    distractors: tuple[int, int] = (1, 3)
    distractor_radius: tuple[float, float] = (1.5, 4.0)
    max_displacement_frac: float = 0.08
    noise_std: float = 0.02
    split_ratios: tuple[float, float, float] = (0.5, 0.2, 0.3)
    drop_censored_first_year: bool = False

    def validate(self) -> None:
        if not 0 < self.event_fraction < 1:
            raise ConfigError(f"event_fraction must be in (0, 1), got {self.event_fraction}")
        if not 0 <= self.censor_fraction <= 1:
            raise ConfigError(f"censor_fraction must be in [0, 1], got {self.censor_fraction}")
        if self.n_patients < 3:
            raise ConfigError("need at least 3 patients")
        if self.image_height < 8 or self.image_width < 8:
            raise ConfigError("image sides must be >= 8")
        if self.signal_strength < 0:
            raise ConfigError("signal_strength must be >= 0")
        if not 0 < self.max_displacement_frac <= 0.1:
            raise ConfigError("max_displacement_frac must be in (0, 0.1]")
        if self.gap_range[0] <= 0 or self.gap_range[1] < self.gap_range[0]:
            raise ConfigError(f"bad gap_range {self.gap_range}")

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown generate options: {sorted(unknown)}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kw)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


def _blob(qy, qx, cy, cx, radius, amp):
    if radius <= 0:
        return 0.0
    d2 = (qy - cy) ** 2 + (qx - cx) ** 2
    return amp / (1.0 + np.exp(2.0 * (np.sqrt(d2) - radius)))


class _Anatomy:
    """Procedural tissue that can be rendered at arbitrary continuous coordinates."""

    def __init__(self, rng: np.random.Generator, cfg: GenConfig):
        h, w = cfg.image_height, cfg.image_width
        self.h, self.w = h, w
        self.cy = h / 2 + rng.uniform(-2, 2)
        self.ry = rng.uniform(0.42, 0.48) * h
        self.rx = rng.uniform(0.8, 0.95) * w
        self.level = rng.uniform(0.3, 0.4)
        self.texture_seed = int(rng.integers(0, 2**31 - 1))
        tex = np.random.default_rng(self.texture_seed).normal(size=(h, w))
        tex = ndimage.gaussian_filter(tex, sigma=2.5, mode="nearest")
        self.texture = 0.06 * tex / (tex.std() + 1e-12)
        lo, hi = cfg.distractors
        count = int(rng.integers(lo, hi + 1))
        raw = [(rng.uniform(0.2, 0.8) * h, rng.uniform(0.15, 0.7) * w,
                rng.uniform(*cfg.distractor_radius), rng.uniform(0.25, 0.4)) for _ in range(hi)]
        self.distractors = raw[:count]

    def render(self, qy, qx, lesion=None):
        r2 = ((qy - self.cy) / self.ry) ** 2 + (qx / self.rx) ** 2
        mask = 1.0 / (1.0 + np.exp(12.0 * (r2 - 1.0)))
        tex = ndimage.map_coordinates(self.texture, [qy, qx], order=1, mode="nearest")
        img = (self.level + tex) * mask
        for cy, cx, rad, amp in self.distractors:
            img = img + _blob(qy, qx, cy, cx, rad, amp) * mask
        if lesion is not None:
            cy, cx, rad, amp = lesion
            img = img + _blob(qy, qx, cy, cx, rad, amp) * mask
        return img


def _smooth_field(rng, h, w, amp):
    coarse = rng.normal(size=(2, 3, 2))
    field_ = np.stack([ndimage.zoom(c, (h / 3, w / 2), order=1) for c in coarse])[:, :h, :w]
    return amp * field_


def _deformation(rng: np.random.Generator, cfg: GenConfig):
    """Prior-geometry offsets psi and their inverse phi (current -> prior)."""
    h, w = cfg.image_height, cfg.image_width
    gy, gx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    ty, tx = rng.uniform(-0.03, 0.03) * h, rng.uniform(-0.03, 0.03) * w
    sy, sx = rng.uniform(-0.04, 0.04), rng.uniform(-0.06, 0.06)
    smooth = _smooth_field(rng, h, w, 0.8)
    psi = np.stack([ty + sy * (gy - h / 2), tx + sx * gx]) + smooth
    limit = 0.9 * cfg.max_displacement_frac * h
    peak = np.sqrt((psi ** 2).sum(axis=0)).max()
    if peak > limit:
        psi *= limit / peak
    phi = -psi.copy()
    for _ in range(20):
        sample, _ = bilinear_sample(psi[None], (gy + phi[0])[None], (gx + phi[1])[None])
        phi = -sample[0]
    return gy, gx, psi, phi


def _make_pair(cfg: GenConfig, seed: int, pid: int) -> ExamPair:
    outcome, anat_rng, deform_rng, noise_rng = (np.random.default_rng(s) for s in np.random.SeedSequence([seed, pid]).spawn(4))
    n = cfg.horizon

    # draws happen in a fixed order whatever branch is taken
    risk = float(outcome.uniform())
    t_noise = float(outcome.normal())
    censor_kind = float(outcome.uniform())
    censor_mid = float(outcome.uniform(0.3, n))
    censor_admin = float(outcome.uniform(n, n + 3))
    gap_draw = float(outcome.uniform(*cfg.gap_range))
    prior_time = float(outcome.uniform(0.0, 3.0))
    base_radius = float(outcome.uniform(*cfg.lesion_base_radius))
    lesion_center = (float(outcome.uniform(0.25, 0.75) * cfg.image_height),
                     float(outcome.uniform(0.2, 0.55) * cfg.image_width))

    threshold = 1.0 - cfg.event_fraction
    event_bound = risk >= threshold
    if event_bound:
        u = (risk - threshold) / cfg.event_fraction
        t_lo, t_hi = cfg.event_time_range
        event_time = (t_lo + (t_hi - t_lo) * (1.0 - u)) * math.exp(cfg.event_time_noise * t_noise)
    else:
        event_time = math.inf
    censor_time = censor_mid if censor_kind < cfg.censor_fraction else censor_admin
    event = event_bound and event_time <= censor_time
    current_time = prior_time + gap_draw
    gap = current_time - prior_time

    growth = cfg.growth_scale * risk
    if event_bound and cfg.signal_strength > 0:
        r_pri = cfg.signal_strength * base_radius
        r_cur = cfg.signal_strength * (base_radius + growth * gap)
    else:
        r_pri = r_cur = 0.0

    anatomy = _Anatomy(anat_rng, cfg)
    gy, gx, psi, phi = _deformation(deform_rng, cfg)
    lesion_cur = (*lesion_center, r_cur, cfg.lesion_amplitude) if r_cur > 0 else None
    lesion_pri = (*lesion_center, r_pri, cfg.lesion_amplitude) if r_pri > 0 else None
    cur = anatomy.render(gy, gx, lesion_cur)
    pri = anatomy.render(gy + psi[0], gx + psi[1], lesion_pri)
    cur = np.clip(cur + noise_rng.normal(0, cfg.noise_std, cur.shape), 0, 1).astype(np.float32)
    pri = np.clip(pri + noise_rng.normal(0, cfg.noise_std, pri.shape), 0, 1).astype(np.float32)

    if event:
        t_cur, fu_cur = event_time, event_time
    else:
        t_cur, fu_cur = None, censor_time
    label_cur = make_label(event, t_cur, fu_cur, n)
    label_pri = make_label(event, None if t_cur is None else t_cur + gap, fu_cur + gap, n)

    state = PatientState(pid, risk, event_bound, lesion_center, growth, anatomy.texture_seed, event_time, censor_time)
    prior_rec = ExamRecord(pid, 0, pri[None], prior_time)
    current_rec = ExamRecord(pid, 1, cur[None], current_time, deformation_gt=phi.astype(np.float32))
    return ExamPair(prior_rec, current_rec, gap, label_cur, label_pri, state, r_pri, r_cur)


def split_cohort(pairs: Sequence[ExamPair], ratios=(0.5, 0.2, 0.3), seed: int = 0) -> dict[str, list[ExamPair]]:
    """Patient-level split into train/val/test."""
    ratios = np.asarray(ratios, dtype=np.float64)
    if ratios.shape != (3,) or np.any(ratios < 0) or abs(ratios.sum() - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must be three non-negative numbers summing to 1, got {ratios.tolist()}")
    patients = sorted({p.patient_id for p in pairs})
    order = np.random.default_rng([seed, 0x5EED]).permutation(len(patients))
    exact = ratios * len(patients)
    counts = np.floor(exact).astype(int)
    for i in np.argsort(-(exact - counts), kind="stable")[: len(patients) - counts.sum()]:
        counts[i] += 1
    if np.any(counts == 0):
        raise ConfigError(f"split produces an empty partition: counts {counts.tolist()}")
    names = ("train", "val", "test")
    assignment = {}
    start = 0
    for name, cnt in zip(names, counts):
        for k in order[start:start + cnt]:
            assignment[patients[k]] = name
        start += cnt
    out = {name: [] for name in names}
    for p in pairs:
        out[assignment[p.patient_id]].append(p)
    return out


@dataclass
class Cohort:
    config: GenConfig
    seed: int
    pairs: list[ExamPair] = field(default_factory=list)

    def split(self, name: str) -> list[ExamPair]:
        return [p for p in self.pairs if p.split == name]


def generate_cohort(cfg: GenConfig, seed: int) -> Cohort:
    cfg.validate()
    pairs = [_make_pair(cfg, seed, pid) for pid in range(cfg.n_patients)]
    if cfg.drop_censored_first_year:
        pairs = [p for p in pairs if p.label_current.delta.any()]
    for name, members in split_cohort(pairs, cfg.split_ratios, seed).items():
        for p in members:
            p.split = name
    return Cohort(cfg, seed, pairs)


# ---------------------------------------------------------------------------
# augmentation


@dataclass
class AugmentConfig:
    flip_prob: float = 0.5
    max_rotation_deg: float = 10.0
    max_translation_frac: float = 0.05
    scale_range: tuple[float, float] = (0.9, 1.1)


@dataclass(frozen=True)
class AffineDraw:
    flip: bool
    angle_deg: float
    translation: tuple[float, float]  # (ty, tx) pixels
    scale: float

    def matrix(self) -> np.ndarray:
        a = math.radians(self.angle_deg)
        c, s = math.cos(a), math.sin(a)
        return self.scale * np.array([[c, -s], [s, c]])

    def map_point(self, y: float, x: float, hw) -> tuple[float, float]:
        """Where an input pixel lands in the augmented image."""
        h, w = hw
        if self.flip:
            x = (w - 1) - x
        center = np.array([(h - 1) / 2, (w - 1) / 2])
        out = center + self.matrix() @ (np.array([y, x]) - center) + np.asarray(self.translation)
        return float(out[0]), float(out[1])


def sample_transform(seed, hw, cfg: AugmentConfig = AugmentConfig()) -> AffineDraw:
    rng = np.random.default_rng(seed)
    h, w = hw
    flip = bool(rng.uniform() < cfg.flip_prob)
    angle = float(rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg))
    ty = float(rng.uniform(-cfg.max_translation_frac, cfg.max_translation_frac) * h)
    tx = float(rng.uniform(-cfg.max_translation_frac, cfg.max_translation_frac) * w)
    scale = float(rng.uniform(*cfg.scale_range))
    return AffineDraw(flip, angle, (ty, tx), scale)


def apply_transform(image: np.ndarray, draw: AffineDraw) -> np.ndarray:
    """Resample a 2-D image (or 1×H×W) under the draw; bilinear, border clamped."""
    squeeze = image.ndim == 3
    img = image[0] if squeeze else image
    if img.ndim != 2 or (squeeze and image.shape[0] != 1):
        raise ValueError(f"augment expects a single-channel 2-D image, got shape {image.shape}")
    h, w = img.shape
    if draw.flip:
        img = img[:, ::-1]
    gy, gx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    cy, cx = (h - 1) / 2, (w - 1) / 2
    inv = np.linalg.inv(draw.matrix())
    dy = gy - cy - draw.translation[0]
    dx = gx - cx - draw.translation[1]
    sy = cy + inv[0, 0] * dy + inv[0, 1] * dx
    sx = cx + inv[1, 0] * dy + inv[1, 1] * dx
    out, _ = bilinear_sample(np.ascontiguousarray(img, dtype=np.float64)[None, None], sy[None], sx[None])
    out = out[0, 0].astype(image.dtype)
    return out[None] if squeeze else out


def augment(image: np.ndarray, seed, cfg: AugmentConfig = AugmentConfig()) -> np.ndarray:
    return apply_transform(image, sample_transform(seed, image.shape[-2:], cfg))


def augment_pair(prior: np.ndarray, current: np.ndarray, seed, cfg: AugmentConfig = AugmentConfig()):
    """Apply one sampled transform to both exams so their correspondence survives."""
    draw = sample_transform(seed, current.shape[-2:], cfg)
    return apply_transform(prior, draw), apply_transform(current, draw)


# ---------------------------------------------------------------------------
# dataset directory


MANIFEST_FIELDS = [
    "patient_id", "split", "gap_years", "event", "time_to_event", "followup",
    "prior_path", "current_path", "field_path",
    "prior_time", "current_time", "risk_score", "event_bound", "censor_time",
    "lesion_y", "lesion_x", "lesion_radius_prior", "lesion_radius_current", "horizon",
]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_dataset(cohort: Cohort, out_dir) -> Path:
    out = Path(out_dir)
    (out / "exams").mkdir(parents=True, exist_ok=True)
    (out / "fields").mkdir(parents=True, exist_ok=True)
    rows = []
    for p in cohort.pairs:
        pid = p.patient_id
        prior_path = f"exams/{pid:06d}_prior.oten"
        current_path = f"exams/{pid:06d}_current.oten"
        field_path = f"fields/{pid:06d}_phi.oten"
        save_tensor(out / prior_path, p.prior.image)
        save_tensor(out / current_path, p.current.image)
        save_tensor(out / field_path, p.current.deformation_gt)
        lab = p.label_current
        rows.append({
            "patient_id": pid, "split": p.split, "gap_years": p.gap_years, "event": lab.event,
            "time_to_event": lab.time_to_event_years, "followup": lab.followup_years,
            "prior_path": prior_path, "current_path": current_path, "field_path": field_path,
            "prior_time": p.prior.exam_time_years, "current_time": p.current.exam_time_years,
            "risk_score": p.patient.risk_score, "event_bound": p.patient.event_bound,
            "censor_time": p.patient.censor_time, "lesion_y": p.patient.lesion_center[0],
            "lesion_x": p.patient.lesion_center[1], "lesion_radius_prior": p.lesion_radius_prior,
            "lesion_radius_current": p.lesion_radius_current, "horizon": lab.n,
        })
    with open(out / "manifest.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=MANIFEST_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(v) for k, v in row.items()})
    return out


def _opt_float(s: str) -> Optional[float]:
    return None if s == "" else float(s)


def load_dataset(data_dir, split: Optional[str] = None) -> list[ExamPair]:
    """Read pairs back from a dataset directory, optionally a single split."""
    root = Path(data_dir)
    manifest = root / "manifest.csv"
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest.csv in {root}")
    pairs = []
    with open(manifest, newline="") as fh:
        for row in csv.DictReader(fh):
            if split is not None and row["split"] != split:
                continue
            pid = int(row["patient_id"])
            n = int(row["horizon"])
            event = row["event"] == "1"
            t = _opt_float(row["time_to_event"])
            fu = float(row["followup"])
            gap = float(row["gap_years"])
            label_cur = make_label(event, t, fu, n)
            label_pri = make_label(event, None if t is None else t + gap, fu + gap, n)
            state = PatientState(pid, float(row["risk_score"]), row["event_bound"] == "1",
                                 (float(row["lesion_y"]), float(row["lesion_x"])), 0.0, 0,
                                 math.inf, float(row["censor_time"]))
            prior = ExamRecord(pid, 0, load_tensor(root / row["prior_path"]), float(row["prior_time"]))
            current = ExamRecord(pid, 1, load_tensor(root / row["current_path"]), float(row["current_time"]),
                                 deformation_gt=load_tensor(root / row["field_path"]))
            pairs.append(ExamPair(prior, current, gap, label_cur, label_pri, state,
                                  float(row["lesion_radius_prior"]), float(row["lesion_radius_current"]),
                                  row["split"]))
    if split is not None and not pairs:
        raise KeyError(f"split {split!r} not present in {manifest}")
    return pairs


def lesion_area(pair: ExamPair) -> float:
    """Oracle feature: true current lesion area in pixels."""
    return math.pi * pair.lesion_radius_current ** 2
