"""Censoring-aware evaluation: C-index (Harrell, Uno), per-year AUC, MAE/CS, bootstrap CIs.

Metrics that cannot be computed (no comparable pairs, an empty AUC group, no
class-known records) raise :class:`MetricUndefined` instead of returning NaN.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np


class MetricUndefined(ValueError):
    """The metric has no defined value on these records."""


class BootstrapUnreliable(RuntimeError):
    """Too many bootstrap resamples had an undefined metric."""


@dataclass(frozen=True)
class PredictionRecord:
    risk: np.ndarray  # Risk_1..Risk_n
    t_hat: float
    event: bool
    time: float
    class_known: bool
    t_class: Optional[int] = None


class Records:
    """Column view over a set of prediction records; indexable for resampling."""

    def __init__(self, risk, t_hat, event, time, class_known, t_class):
        self.risk = np.asarray(risk, dtype=np.float64)
        if self.risk.ndim == 1:
            self.risk = self.risk[:, None]
        self.t_hat = np.asarray(t_hat, dtype=np.float64)
        self.event = np.asarray(event, dtype=bool)
        self.time = np.asarray(time, dtype=np.float64)
        self.class_known = np.asarray(class_known, dtype=bool)
        self.t_class = np.asarray([0 if c is None else c for c in t_class], dtype=np.int64)

    @classmethod
    def from_list(cls, records: Sequence[PredictionRecord]) -> "Records":
        return cls(np.array([r.risk for r in records]), [r.t_hat for r in records], [r.event for r in records],
                   [r.time for r in records], [r.class_known for r in records], [r.t_class for r in records])

    @property
    def horizon(self) -> int:
        return self.risk.shape[1]

    def __len__(self) -> int:
        return len(self.time)

    def __getitem__(self, idx) -> "Records":
        return Records(self.risk[idx], self.t_hat[idx], self.event[idx], self.time[idx],
                       self.class_known[idx], self.t_class[idx])

    def to_list(self) -> list[PredictionRecord]:
        return [PredictionRecord(self.risk[i].copy(), float(self.t_hat[i]), bool(self.event[i]), float(self.time[i]),
                                 bool(self.class_known[i]), int(self.t_class[i]) if self.class_known[i] else None)
                for i in range(len(self))]


def as_records(records) -> Records:
    return records if isinstance(records, Records) else Records.from_list(records)


ScoreSpec = Union[str, Callable[[Records], np.ndarray]]


def resolve_score(records: Records, score: ScoreSpec = "risk_n") -> np.ndarray:
    """'risk_n' (default, Risk at the horizon), 'risk_<m>', 'neg_time' (−t̂), or a callable."""
    if callable(score):
        return np.asarray(score(records), dtype=np.float64)
    if score == "risk_n":
        return records.risk[:, -1]
    if score == "neg_time":
        return -records.t_hat
    if score.startswith("risk_"):
        return records.risk[:, int(score[5:]) - 1]
    raise ValueError(f"unknown score {score!r}")


def _pair_counts(time, event, s, weight=None):
    """Weighted concordant/tied/comparable sums over pairs (i event, time_i < time_j)."""
    comp = (time[:, None] < time[None, :]) & event[:, None]
    if weight is not None:
        w = np.where(comp, weight[:, None], 0.0)
    else:
        w = comp.astype(np.float64)
    diff = s[:, None] - s[None, :]
    conc = (w * (diff > 0)).sum()
    ties = (w * (diff == 0)).sum()
    return conc, ties, w.sum()


def concordance_harrell(records, score: ScoreSpec = "risk_n") -> float:
    r = as_records(records)
    s = resolve_score(r, score)
    conc, ties, total = _pair_counts(r.time, r.event, s)
    if total == 0:
        raise MetricUndefined("Harrell C-index: no comparable pairs")
    return float((conc + 0.5 * ties) / total)


class StepFunction:
    """Right-continuous step function: value[k] holds on [times[k], times[k+1])."""

    def __init__(self, times: np.ndarray, values: np.ndarray):
        self.times = np.asarray(times, dtype=np.float64)
        self.values = np.asarray(values, dtype=np.float64)

    def __call__(self, t):
        t = np.asarray(t, dtype=np.float64)
        k = np.searchsorted(self.times, t, side="right")
        vals = np.concatenate([[1.0], self.values])
        return vals[k]


def km_censoring_survival(records) -> StepFunction:
    """Kaplan–Meier estimate of the censoring survival G(t) = P(C > t)."""
    r = as_records(records)
    if len(r) == 0:
        raise MetricUndefined("Kaplan–Meier: no records")
    times, inverse, counts = np.unique(r.time, return_inverse=True, return_counts=True)
    at_risk = len(r.time) - np.cumsum(counts) + counts
    censored = np.bincount(inverse, weights=~r.event, minlength=len(times))
    return StepFunction(times, np.cumprod(1.0 - censored / at_risk))


def concordance_uno(records, score: ScoreSpec = "risk_n", tau: Optional[float] = None) -> float:
    """IPCW concordance truncated at tau (default: the risk horizon n)."""
    r = as_records(records)
    tau = float(r.horizon if tau is None else tau)
    s = resolve_score(r, score)
    g = km_censoring_survival(r)
    used = r.event & (r.time < tau)
    g_at = g(r.time)
    needed = used & (r.time < r.time.max())
    if np.any(g_at[needed] <= 0):
        t0 = float(r.time[needed][g_at[needed] <= 0][0])
        raise MetricUndefined(f"Uno C-index: censoring survival is 0 at event time {t0}")
    weight = np.where(needed, 1.0 / np.where(g_at > 0, g_at, 1.0) ** 2, 0.0)
    conc, ties, total = _pair_counts(r.time, used, s, weight)
    if total == 0:
        raise MetricUndefined("Uno C-index: no comparable pairs before tau")
    return float((conc + 0.5 * ties) / total)


def _auc_groups(r: Records, m: int):
    pos = r.event & (r.time <= m)
    neg = (~r.event & (r.time >= m)) | (r.event & (r.time > m))
    return pos, neg


def auc_year(records, m: int) -> float:
    """Mann–Whitney AUC of Risk_m: events by year m vs. records event-free through year m."""
    r = as_records(records)
    if not 1 <= m <= r.horizon:
        raise ValueError(f"year {m} outside 1..{r.horizon}")
    pos, neg = _auc_groups(r, m)
    if not pos.any() or not neg.any():
        raise MetricUndefined(f"AUC year {m}: {int(pos.sum())} positives, {int(neg.sum())} negatives")
    s = r.risk[:, m - 1]
    sp, sn = s[pos], np.sort(s[neg])
    below = np.searchsorted(sn, sp, side="left")
    equal = np.searchsorted(sn, sp, side="right") - below
    return float((below.sum() + 0.5 * equal.sum()) / (len(sp) * len(sn)))


def _known(r: Records) -> Records:
    if not r.class_known.any():
        raise MetricUndefined("no records with a known time class")
    return r[r.class_known]


def mae_cs(records, theta: float = 1.0) -> tuple[float, float]:
    k = _known(as_records(records))
    err = np.abs(k.t_hat - k.t_class)
    return float(err.mean()), float((err <= theta).mean())


def weighted_mae_cs(records, theta: float = 1.0) -> tuple[float, float]:
    """Per-class MAE and CS averaged over the classes present (macro average)."""
    k = _known(as_records(records))
    err = np.abs(k.t_hat - k.t_class)
    maes, css = [], []
    for c in np.unique(k.t_class):
        e = err[k.t_class == c]
        maes.append(e.mean())
        css.append((e <= theta).mean())
    return float(np.mean(maes)), float(np.mean(css))


@dataclass(frozen=True)
class BootstrapResult:
    mean: float
    lo: float
    hi: float
    n_defined: int
    n_undefined: int


def bootstrap_ci(metric: Callable[[Records], float], records, iters: int = 1000, seed: int = 0) -> BootstrapResult:
    """Mean ± 1.96 sd of the metric over same-size resamples with replacement.

    Resample ``i`` draws from ``default_rng([seed, i])`` so any iteration can be
    recomputed on its own.
    """
    r = as_records(records)
    metric(r)  # must be defined on the full set
    n = len(r)
    vals = []
    undefined = 0
    for i in range(iters):
        idx = np.random.default_rng([seed, i]).integers(0, n, n)
        try:
            vals.append(metric(r[idx]))
        except MetricUndefined:
            undefined += 1
    if undefined > iters / 2:
        raise BootstrapUnreliable(f"{undefined} of {iters} resamples undefined")
    vals = np.asarray(vals)
    mu = float(vals.mean())
    sd = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
    return BootstrapResult(mu, mu - 1.96 * sd, mu + 1.96 * sd, len(vals), undefined)


# ---------------------------------------------------------------------------
# report


@dataclass
class MetricValue:
    point: float  # bootstrap mean
    ci_lo: float
    ci_hi: float
    estimate: float  # value on the full record set
    n_undefined: int = 0


@dataclass
class MetricReport:
    values: dict[str, Optional[MetricValue]]
    n_records: int
    n_events: int
    notes: dict[str, str] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Optional[MetricValue]:
        return self.values[name]

    def to_dict(self) -> dict:
        return {
            "n_records": self.n_records,
            "n_events": self.n_events,
            "metrics": {k: None if v is None else vars(v).copy() for k, v in self.values.items()},
            "notes": dict(self.notes),
        }

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["name", "point", "lo", "hi", "estimate"])
            for name, v in self.values.items():
                if v is None:
                    w.writerow([name, "", "", "", ""])
                else:
                    w.writerow([name, repr(v.point), repr(v.ci_lo), repr(v.ci_hi), repr(v.estimate)])


def metric_suite(horizon: int, theta: float = 1.0, score: ScoreSpec = "risk_n") -> dict[str, Callable[[Records], float]]:
    suite = {
        "c_harrell": lambda r: concordance_harrell(r, score),
        "c_uno": lambda r: concordance_uno(r, score),
    }
    for m in range(1, horizon + 1):
        suite[f"auc_{m}"] = lambda r, m=m: auc_year(r, m)
    suite["mae"] = lambda r: mae_cs(r, theta)[0]
    suite["cs"] = lambda r: mae_cs(r, theta)[1]
    suite["wmae"] = lambda r: weighted_mae_cs(r, theta)[0]
    suite["wcs"] = lambda r: weighted_mae_cs(r, theta)[1]
    return suite


def evaluate_records(records, iters: int = 1000, seed: int = 0, theta: float = 1.0,
                     score: ScoreSpec = "risk_n") -> MetricReport:
    r = as_records(records)
    values: dict[str, Optional[MetricValue]] = {}
    notes = {}
    for name, fn in metric_suite(r.horizon, theta, score).items():
        try:
            est = fn(r)
            b = bootstrap_ci(fn, r, iters, seed)
        except (MetricUndefined, BootstrapUnreliable) as err:
            values[name] = None
            notes[name] = str(err)
            continue
        values[name] = MetricValue(b.mean, b.lo, b.hi, est, b.n_undefined)
    return MetricReport(values, len(r), int(r.event.sum()), notes)


def records_from_predictions(y_hat: np.ndarray, labels) -> Records:
    """Build records from (b×(n+1)) probabilities and the matching RiskLabels."""
    y_hat = np.asarray(y_hat, dtype=np.float64)
    n = y_hat.shape[1] - 1
    risk = np.cumsum(y_hat[:, :n], axis=1)
    t_hat = y_hat @ np.arange(1, n + 2)
    event = [lab.event for lab in labels]
    time = [lab.time_to_event_years if lab.event else lab.followup_years for lab in labels]
    known = [lab.class_known for lab in labels]
    t_class = [lab.class_index for lab in labels]
    return Records(risk, t_hat, event, time, known, t_class)
