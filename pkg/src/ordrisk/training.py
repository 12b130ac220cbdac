"""Training loop, checkpoints, prediction and evaluation runner."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import tensor as T
from .config import ExperimentConfig
from .errors import ConfigError, ValidationError
from .losses import TERM_NAMES, LabelBatch, LossWeights, total_loss
from .metrics import MetricReport, MetricUndefined, concordance_harrell, evaluate_records, records_from_predictions
from .model import RiskModel
from .optim import Adam, EarlyStopping, PlateauSchedule
from .serialization import load_tensor, save_tensor
from .synthgen import ExamPair, augment_pair, load_dataset

log = logging.getLogger(__name__)

PathLike = Union[str, Path]

CHECKPOINT_FORMAT = "ordrisk-checkpoint"
LOG_COLUMNS = ["epoch", *TERM_NAMES, "total", "val_c_harrell", "lr"]
STEP_COLUMNS = ["step", *TERM_NAMES, "total"]

# stream tags keep the shuffle / per-step generators apart from the per-sample augmentation streams
_SHUFFLE_TAG = 0x5EED
_STEP_TAG = 0x57E9


# ---------------------------------------------------------------------------
# data


@dataclass
class PairArrays:
    """A split stacked into model-ready arrays."""

    prior: np.ndarray  # (N, 1, H, W) float32
    current: np.ndarray
    gap: np.ndarray
    labels: LabelBatch
    pairs: list[ExamPair]

    @classmethod
    def from_pairs(cls, pairs: Sequence[ExamPair]) -> "PairArrays":
        if not pairs:
            raise ValidationError("empty split")
        prior = np.stack([p.prior.image for p in pairs]).astype(np.float32)
        current = np.stack([p.current.image for p in pairs]).astype(np.float32)
        gap = np.array([p.gap_years for p in pairs])
        labels = LabelBatch.from_labels([p.label_current for p in pairs], [p.label_prior for p in pairs])
        return cls(prior, current, gap, labels, list(pairs))

    @classmethod
    def load(cls, dataset_dir: PathLike, split: str) -> "PairArrays":
        return cls.from_pairs(load_dataset(dataset_dir, split))

    def __len__(self) -> int:
        return len(self.gap)

    def label_subset(self, idx) -> LabelBatch:
        L = self.labels
        return LabelBatch(L.y_cur[idx], L.delta_cur[idx], L.class_cur[idx], L.y_pri[idx], L.delta_pri[idx])

    def batch(self, idx, augment_seed: Optional[tuple] = None, aug_cfg=None):
        """(prior, current, gap, labels) for the given indices, optionally augmented per sample."""
        prior, current = self.prior[idx], self.current[idx]
        if augment_seed is not None:
            prior, current = prior.copy(), current.copy()
            for j, i in enumerate(idx):
                prior[j], current[j] = augment_pair(prior[j], current[j], [*augment_seed, int(i)], aug_cfg)
        return prior, current, self.gap[idx], self.label_subset(idx)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: RiskModel, cfg: ExperimentConfig, out_dir: PathLike, meta: Optional[dict] = None) -> Path:
    root = Path(out_dir)
    (root / "params").mkdir(parents=True, exist_ok=True)
    arrays = model.state_arrays()
    for name, arr in arrays.items():
        save_tensor(root / "params" / f"{name}.oten", arr)
    manifest = {"format": CHECKPOINT_FORMAT, "version": 1, "config": cfg.to_dict(),
                "arrays": sorted(arrays), "meta": meta or {}}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return root


def load_checkpoint(ckpt_dir: PathLike) -> tuple[RiskModel, ExperimentConfig, dict]:
    root = Path(ckpt_dir)
    path = root / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {path}")
    manifest = json.loads(path.read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path} is not a checkpoint manifest")
    cfg = ExperimentConfig.from_dict(manifest["config"])
    model = RiskModel(cfg.resolved_model(), seed=cfg.train.seed)
    model.load_state_arrays({name: load_tensor(root / "params" / f"{name}.oten") for name in manifest["arrays"]})
    return model, cfg, manifest.get("meta", {})


# ---------------------------------------------------------------------------
# prediction


def predict(model: RiskModel, data: PairArrays, batch_size: int = 64) -> dict[str, np.ndarray]:
    """Eval-mode forward over a split; returns stacked output arrays."""
    keys = ("y_fused", "y_cur", "y_pri", "a_cur", "a_pri", "a_dif", "phi")
    chunks: dict[str, list] = {k: [] for k in keys}
    with T.no_grad():
        for start in range(0, len(data), batch_size):
            sl = slice(start, start + batch_size)
            out = model.forward(data.prior[sl], data.current[sl], data.gap[sl], mode="eval")
            for k in keys:
                chunks[k].append(getattr(out, k).data)
    return {k: np.concatenate(v) for k, v in chunks.items()}


def validation_c_index(model: RiskModel, data: PairArrays, batch_size: int = 64) -> float:
    y = predict(model, data, batch_size)["y_fused"]
    records = records_from_predictions(y, [p.label_current for p in data.pairs])
    try:
        return concordance_harrell(records, "risk_n")
    except MetricUndefined as err:
        raise ValidationError(f"validation C-index undefined: {err}") from err


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    out_dir: Path
    checkpoint_dir: Path
    best_epoch: int
    best_val: float
    log_rows: list[dict]
    stopped_early: bool
    model: RiskModel = field(repr=False)


def _write_csv(path: Path, columns: Sequence[str], rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def train_step(model: RiskModel, opt: Adam, batch, weights: LossWeights, rng: np.random.Generator):
    prior, current, gap, labels = batch
    opt.zero_grad()
    with T.Tape() as tape:
        out = model.forward(prior, current, gap, mode="train", rng=rng)
        res = total_loss(out, labels, weights, rng)
        tape.backward(res.total)
    opt.step()
    return res


def train(cfg: ExperimentConfig, dataset_dir: PathLike, out_dir: PathLike,
          train_data: Optional[PairArrays] = None, val_data: Optional[PairArrays] = None) -> TrainResult:
    """Fit on the train split, monitor val Harrell C, keep the best checkpoint.

    Writes ``train_log.csv`` (deterministic), ``steps.csv`` (per-step loss
    terms), ``timing.csv`` (wall-clock per epoch) and ``checkpoint/``.
    """
    cfg.validate()
    tc = cfg.train
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_data = train_data if train_data is not None else PairArrays.load(dataset_dir, "train")
    val_data = val_data if val_data is not None else PairArrays.load(dataset_dir, "val")

    model = RiskModel(cfg.resolved_model(), seed=tc.seed)
    opt = Adam(model.parameters(), tc.lr)
    schedule = PlateauSchedule(tc.lr, tc.lr_decay, tc.lr_patience, tc.min_improvement)
    stopper = EarlyStopping(tc.early_stop_patience, tc.min_improvement)
    weights = tc.effective_weights()
    ckpt = out / "checkpoint"

    rows, steps, timing = [], [], []
    step = 0
    stopped = False
    for epoch in range(tc.max_epochs):
        t0 = time.perf_counter()
        order = np.random.default_rng([tc.seed, _SHUFFLE_TAG, epoch]).permutation(len(train_data))
        sums = dict.fromkeys([*TERM_NAMES, "total"], 0.0)
        n_batches = 0
        for start in range(0, len(order), tc.batch_size):
            idx = order[start:start + tc.batch_size]
            batch = train_data.batch(idx, (tc.seed, epoch) if tc.augment else None, tc.augmentation)
            rng = np.random.default_rng([tc.seed, _STEP_TAG, epoch, step])
            res = train_step(model, opt, batch, weights, rng)
            steps.append({"step": step, **res.terms})
            for k in sums:
                sums[k] += res.terms[k]
            n_batches += 1
            step += 1
        val_c = validation_c_index(model, val_data, tc.eval_batch_size)
        row = {"epoch": epoch, **{k: v / n_batches for k, v in sums.items()}, "val_c_harrell": val_c, "lr": opt.lr}
        rows.append(row)
        if stopper.update(val_c, epoch):
            save_checkpoint(model, cfg, ckpt, {"epoch": epoch, "val_c_harrell": val_c})
        if schedule.update(val_c):
            opt.lr = schedule.lr
        timing.append({"epoch": epoch, "wall_seconds": time.perf_counter() - t0})
        log.info("epoch %d total %.4f val_c %.4f lr %.3g", epoch, row["total"], val_c, row["lr"])
        if stopper.should_stop:
            stopped = True
            break

    _write_csv(out / "train_log.csv", LOG_COLUMNS, rows)
    _write_csv(out / "steps.csv", STEP_COLUMNS, steps)
    _write_csv(out / "timing.csv", ["epoch", "wall_seconds"], timing)
    best_model, _, _ = load_checkpoint(ckpt)
    return TrainResult(out, ckpt, stopper.best_epoch, stopper.best, rows, stopped, best_model)


def overfit_single_batch(cfg: ExperimentConfig, data: PairArrays, batch_idx: Sequence[int], steps: int = 200,
                         lr: Optional[float] = None) -> list[float]:
    """Repeated Adam steps on one fixed batch with fixed latent noise and triplets; returns totals."""
    tc = cfg.train
    model = RiskModel(cfg.resolved_model(), seed=tc.seed)
    opt = Adam(model.parameters(), tc.lr if lr is None else lr)
    weights = tc.effective_weights()
    idx = np.asarray(batch_idx)
    prior, current, gap, labels = data.batch(idx)
    eps = np.random.default_rng([tc.seed, _STEP_TAG]).standard_normal((len(idx), cfg.model.latent_dim))
    totals = []
    for _ in range(steps):
        opt.zero_grad()
        with T.Tape() as tape:
            out = model.forward(prior, current, gap, mode="train", eps=eps)
            res = total_loss(out, labels, weights, np.random.default_rng([tc.seed, _STEP_TAG, 1]))
            tape.backward(res.total)
        totals.append(res.terms["total"])
        opt.step()
    return totals


# ---------------------------------------------------------------------------
# evaluation


def evaluate(ckpt_dir: PathLike, dataset_dir: PathLike, split: str = "test", out_dir: Optional[PathLike] = None,
             iters: Optional[int] = None, seed: int = 0) -> MetricReport:
    """Full metric report with bootstrap CIs; writes metrics.json / metrics.csv when ``out_dir`` is given."""
    model, cfg, _ = load_checkpoint(ckpt_dir)
    data = PairArrays.load(dataset_dir, split)
    if data.prior.shape[-2:] != (cfg.model.image_height, cfg.model.image_width):
        raise ConfigError(f"checkpoint expects {cfg.model.image_height}x{cfg.model.image_width} images, "
                          f"dataset has {data.prior.shape[-2:]}")
    y = predict(model, data, cfg.train.eval_batch_size)["y_fused"]
    records = records_from_predictions(y, [p.label_current for p in data.pairs])
    report = evaluate_records(records, cfg.train.bootstrap_iters if iters is None else iters, seed,
                              cfg.train.cs_theta)
    if out_dir is not None:
        o = Path(out_dir)
        o.mkdir(parents=True, exist_ok=True)
        report.write_json(o / "metrics.json")
        report.write_csv(o / "metrics.csv")
    return report


def attention_mass_in_box(a: np.ndarray, box: tuple[int, int, int, int], image_hw: tuple[int, int]) -> tuple[float, float]:
    """(mass of a feature-grid attention map inside an image-space box, the box's area fraction).

    Each grid cell covers an equal block of the image; the cell's mass is
    spread uniformly over its block.
    """
    H, W = image_hw
    h, w = a.shape
    y0, y1, x0, x1 = box
    ys = (np.arange(H) * h) // H
    xs = (np.arange(W) * w) // W
    per_pixel = a[np.ix_(ys, xs)] * (h * w) / (H * W)
    return float(per_pixel[y0:y1, x0:x1].sum()), (y1 - y0) * (x1 - x0) / (H * W)
