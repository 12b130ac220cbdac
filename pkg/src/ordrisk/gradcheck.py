"""Finite-difference verification of every registered op, every loss and the assembled model.

Each trial draws fresh inputs from ``default_rng([trial, case index])``,
reduces the op's output against a fixed random cotangent, and compares the
tape gradient of every differentiable input with central differences.
Inputs are kept a margin away from kinks (relu at 0, clip bounds, integer
sample points of the spatial transform, the triplet hinge).
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Mapping, Optional

import numpy as np

from . import losses as L
from . import model as M
from . import tensor as T
from .tensor import DIFFERENTIABLE_OPS, Tensor

TOLERANCE = 1e-4
EPS = 1e-6

# each case builder: (rng, impl) -> list of (label, fn(x) -> scalar, x)
Case = Callable[[np.random.Generator, Callable], list]


def _t(a) -> Tensor:
    return Tensor(np.asarray(a, dtype=np.float64))


def _away(rng, shape, lo=0.1, hi=1.0):
    """Values with magnitude in [lo, hi] and random sign."""
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(lo, hi, shape)


def _project(out: Tensor, rng) -> Tensor:
    if out.ndim == 0:
        return out
    return T.tsum(out * _t(rng.normal(size=out.shape)))


def _checks(op, rng, args: list, differentiable: list[int], **kw):
    """One check per differentiable argument, the others held fixed."""
    r = np.random.default_rng(rng.integers(2**32))
    cot_seed = int(r.integers(2**32))
    found = []
    for i in differentiable:
        def fn(x, i=i):
            a = list(args)
            a[i] = x
            return _project(op(*a, **kw), np.random.default_rng(cot_seed))
        found.append((f"arg{i}", fn, args[i]))
    return found


def _kink_free_phi(rng, shape):
    frac = rng.uniform(0.15, 0.85, shape)
    return rng.integers(-2, 2, shape) + frac


def _bn_state(rng, c, trained: bool):
    st = T.BatchNormState(c)
    if trained:
        st.running_mean = rng.normal(size=c)
        st.running_var = rng.uniform(0.5, 2.0, c)
        st.initialized = True
    return st


OP_CASES: dict[str, Case] = {
    "add": lambda r, f: _checks(f, r, [_t(r.normal(size=(3, 4))), _t(r.normal(size=(3, 4)))], [0, 1]),
    "sub": lambda r, f: _checks(f, r, [_t(r.normal(size=(3, 4))), _t(r.normal(size=(3, 4)))], [0, 1]),
    "mul": lambda r, f: (_checks(f, r, [_t(r.normal(size=(3, 4))), _t(r.normal(size=(3, 4)))], [0, 1])
                         + _checks(f, r, [_t(r.normal(size=(3, 4))), _t(r.normal())], [0, 1])),
    "relu": lambda r, f: _checks(f, r, [_t(_away(r, (4, 5)))], [0]),
    "sigmoid": lambda r, f: _checks(f, r, [_t(r.normal(0, 2, (4, 5)))], [0]),
    "exp": lambda r, f: _checks(f, r, [_t(r.normal(size=(4, 5)))], [0]),
    "log": lambda r, f: _checks(f, r, [_t(r.uniform(0.3, 3.0, (4, 5)))], [0]),
    "square": lambda r, f: _checks(f, r, [_t(r.normal(size=(4, 5)))], [0]),
    "clip": lambda r, f: _checks(f, r, [_t(0.5 + _away(r, (4, 5), 0.05, 0.9))], [0], lo=0.0, hi=1.0),
    "sum": lambda r, f: (_checks(f, r, [_t(r.normal(size=(3, 4, 2)))], [0])
                         + _checks(f, r, [_t(r.normal(size=(3, 4, 2)))], [0], axis=1)),
    "reshape": lambda r, f: _checks(f, r, [_t(r.normal(size=(3, 4))), (2, 6)], [0]),
    "broadcast_to": lambda r, f: _checks(f, r, [_t(r.normal(size=(3, 1))), (2, 3, 4)], [0]),
    "getitem": lambda r, f: (_checks(f, r, [_t(r.normal(size=(5, 3))), np.array([0, 2, 2, 4])], [0])
                             + _checks(f, r, [_t(r.normal(size=(5, 3))), (slice(1, 4), 2)], [0])),
    "concat": lambda r, f: _checks(lambda a, b: f([a, b], axis=1), r,
                                   [_t(r.normal(size=(2, 3))), _t(r.normal(size=(2, 2)))], [0, 1]),
    "contract": lambda r, f: (_checks(lambda a, b: f("ij,jk->ik", a, b), r,
                                      [_t(r.normal(size=(3, 4))), _t(r.normal(size=(4, 2)))], [0, 1])
                              + _checks(lambda a, b: f("bchw,c->bhw", a, b), r,
                                        [_t(r.normal(size=(2, 3, 2, 2))), _t(r.normal(size=3))], [0, 1])),
    "l2norm": lambda r, f: _checks(f, r, [_t(_away(r, (4, 3)))], [0]),
    "linear": lambda r, f: _checks(f, r, [_t(r.normal(size=(3, 4))), _t(r.normal(size=(4, 2))),
                                          _t(r.normal(size=2))], [0, 1, 2]),
    "conv2d": lambda r, f: (_checks(f, r, [_t(r.normal(size=(2, 2, 5, 5))), _t(r.normal(size=(3, 2, 3, 3)))],
                                    [0, 1], stride=1, pad=1, bias=_t(r.normal(size=3)))
                            + _checks(lambda x, k, b: f(x, k, 2, 1, b), r,
                                      [_t(r.normal(size=(1, 2, 5, 4))), _t(r.normal(size=(2, 2, 3, 3))),
                                       _t(r.normal(size=2))], [0, 1, 2])),
    "batchnorm2d": lambda r, f: (_checks(lambda x, g, b: f(x, g, b, _bn_state(r, 3, False), "train"), r,
                                         [_t(r.normal(size=(2, 3, 2, 3))), _t(r.uniform(0.5, 2, 3)),
                                          _t(r.normal(size=3))], [0, 1, 2])
                                 + _checks(lambda x, g, b, st=_bn_state(r, 3, True): f(x, g, b, st, "eval"), r,
                                           [_t(r.normal(size=(2, 3, 2, 3))), _t(r.uniform(0.5, 2, 3)),
                                            _t(r.normal(size=3))], [0, 1, 2])),
    "softmax": lambda r, f: _checks(f, r, [_t(r.normal(0, 2, (3, 6)))], [0]),
    "spatial_transform": lambda r, f: _checks(f, r, [_t(r.normal(size=(1, 2, 4, 5))),
                                                     _t(_kink_free_phi(r, (1, 2, 4, 5)))], [0, 1]),
}


def _probs(r, shape):
    return r.uniform(0.05, 0.95, shape)


def _triplet_inputs(r, d=4, margin=0.5):
    """Embeddings whose hinge argument stays clear of zero."""
    while True:
        z = r.normal(size=(3, d))
        arg = np.linalg.norm(z[0] - z[1]) - np.linalg.norm(z[0] - z[2]) + margin
        if abs(arg) > 1e-2:
            return [_t(z[0]), _t(z[1]), _t(z[2])]


def _poe_case(r, f):
    mu, lv = _t(r.normal(size=(3, 4))), _t(r.normal(0, 0.5, (3, 4)))
    trip_seed = int(r.integers(2**32))

    def loss(m, v):
        return f(m, v, [1, 3, 5], 0.5, 4, np.random.default_rng(trip_seed))[0]

    return _checks(loss, r, [mu, lv], [0, 1])


def _labels(r, b, n=5):
    y = np.zeros((b, n + 1))
    y[np.arange(b), r.integers(0, n + 1, b)] = 1
    return y, (r.uniform(size=(b, n + 1)) < 0.7).astype(float)


LOSS_CASES: dict[str, Case] = {
    "masked_bce": lambda r, f: _checks(lambda p: f(p, *_labels(np.random.default_rng(1), 2)), r,
                                       [_t(_probs(r, (2, 6)))], [0]),
    "mv_loss": lambda r, f: _checks(lambda p: f(p, np.array([1, 4])), r, [_t(_probs(r, (2, 6)))], [0]),
    "kl_std_normal": lambda r, f: _checks(f, r, [_t(r.normal(size=(2, 4))), _t(r.normal(size=(2, 4)))], [0, 1]),
    "ordinal_triplet": lambda r, f: _checks(f, r, _triplet_inputs(r), [0, 1, 2]),
    "poe_loss": _poe_case,
    "reg_loss": lambda r, f: _checks(f, r, [_t(r.normal(size=(2, 3, 2, 2))), _t(r.normal(size=(2, 3, 2, 2)))],
                                     [0, 1]),
}
LOSS_IMPLS = {name: getattr(L, name) for name in LOSS_CASES}

GRADCHECK_MODEL = M.ModelConfig(image_height=16, image_width=16, widths=(4, 4), strides=(1, 2), align_hidden=4,
                                head_hidden=8, latent_dim=4, horizon=3)


def _swap_param(model, dotted: str, value: Tensor) -> None:
    *path, leaf = dotted.split(".")
    owner = model
    for part in path:
        owner = owner[int(part)] if part.isdigit() else getattr(owner, part)
    setattr(owner, leaf, value)


def _model_case(r, f):
    """Total loss of a tiny model in train mode, w.r.t. a spread of parameters."""
    cfg = GRADCHECK_MODEL
    model = M.RiskModel(cfg, seed=int(r.integers(1000)))
    # a non-zero displacement head so the warp path carries gradient
    model.align2.weight.data = r.normal(0, 0.05, model.align2.weight.shape)
    b = 3
    prior = r.uniform(size=(b, 1, 16, 16))
    current = r.uniform(size=(b, 1, 16, 16))
    gap = r.uniform(1, 3, b)
    eps = r.normal(size=(b, cfg.latent_dim))
    y, delta = _labels(r, b, cfg.horizon)
    labels = L.LabelBatch(y, delta, np.array([1, 2, 4]), *_labels(r, b, cfg.horizon))
    weights = L.LossWeights(triplets=4)
    trip_seed = int(r.integers(2**32))
    params = dict(model.named_parameters())
    found = []
    for name in ("encoder.0.conv.weight", "encoder.1.bn.gamma", "pool_w", "dif_pool_w", "align1.weight",
                 "align2.weight", "fc1.weight", "classifier.bias", "single_head.weight"):
        p = params[name]

        def fn(x, name=name, p=p):
            _swap_param(model, name, x)
            try:
                out = model.forward(prior, current, gap, mode="train", eps=eps)
                return f(out, labels, weights, np.random.default_rng(trip_seed)).total
            finally:
                _swap_param(model, name, p)
        found.append((name, fn, _t(p.data.copy())))
    return found


MODEL_CASES: dict[str, Case] = {"risk_model": _model_case}


@dataclass
class CheckResult:
    name: str
    trials: int
    max_error: float
    worst: str
    problem: str = ""

    @property
    def passed(self) -> bool:
        return not self.problem and self.max_error <= TOLERANCE


@dataclass
class SuiteReport:
    results: list[CheckResult]
    seconds: float

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def lines(self) -> list[str]:
        out = []
        for r in self.results:
            status = "PASS" if r.passed else "FAIL"
            extra = f" ({r.problem})" if r.problem else ""
            out.append(f"{status} {r.name:<22} trials={r.trials:<4} max_rel_err={r.max_error:.3e} "
                       f"worst={r.worst}{extra}")
        out.append(f"{'PASS' if self.passed else 'FAIL'} {len(self.results)} checks in {self.seconds:.1f}s")
        return out


def _run_case(name: str, case: Case, impl: Callable, trials: int, index: int, refine: int = 0) -> CheckResult:
    worst, where = 0.0, "-"
    for trial in range(trials):
        rng = np.random.default_rng([trial, index])
        for label, fn, x in case(rng, impl):
            err = T.grad_check(fn, x, EPS, refine=refine, tol=TOLERANCE)
            if not np.isfinite(err):
                err = np.inf
            if err > worst or where == "-":
                worst, where = max(err, worst), f"trial{trial}:{label}"
    return CheckResult(name, trials, worst, where)


def run_suite(scope: str = "all", trials: int = 100, overrides: Optional[Mapping[str, Callable]] = None,
              model_trials: int = 3) -> SuiteReport:
    """Run the checks for ``scope`` in ops | losses | model | all, in float64."""
    if scope not in ("ops", "losses", "model", "all"):
        raise ValueError(f"unknown gradcheck scope {scope!r}")
    overrides = dict(overrides or {})
    t0 = time.perf_counter()
    results = []
    with T.precision(np.float64):
        if scope in ("ops", "all"):
            for i, name in enumerate(sorted(DIFFERENTIABLE_OPS)):
                if name not in OP_CASES:
                    results.append(CheckResult(name, 0, np.inf, "-", "no gradient-check case registered"))
                    continue
                impl = overrides.get(name, DIFFERENTIABLE_OPS[name])
                results.append(_run_case(name, OP_CASES[name], impl, trials, i))
        if scope in ("losses", "all"):
            for i, name in enumerate(sorted(LOSS_CASES)):
                impl = overrides.get(name, LOSS_IMPLS[name])
                results.append(_run_case(f"loss:{name}", LOSS_CASES[name], impl, trials, 100 + i))
        if scope in ("model", "all"):
            impl = overrides.get("total_loss", L.total_loss)
            # many relus behind batchnorm: every weight moves every unit, so kink straddles are common
            results.append(_run_case("model:total_loss", _model_case, impl, model_trials, 200, refine=2))
    return SuiteReport(results, time.perf_counter() - t0)
