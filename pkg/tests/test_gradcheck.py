import numpy as np
import pytest

from ordrisk import losses as L
from ordrisk import tensor as T
from ordrisk.gradcheck import LOSS_CASES, OP_CASES, TOLERANCE, run_suite
from ordrisk.tensor import DIFFERENTIABLE_OPS, Tensor


def corrupted_conv2d(*args, **kwargs):
    """Correct forward, backward scaled by 1.1."""
    y = T.conv2d(*args, **kwargs)
    return T._result("conv2d", y.data, (y,), lambda g: (1.1 * g,))


@pytest.fixture(scope="module")
def full_report():
    return run_suite("all", trials=100)


class TestSuite:
    def test_all_pass(self, full_report):
        failed = [line for line in full_report.lines() if line.startswith("FAIL")]
        assert not failed, "\n".join(failed)

    def test_tolerance(self, full_report):
        assert TOLERANCE == 1e-4
        assert all(r.max_error <= 1e-4 for r in full_report.results)

    def test_trials(self, full_report):
        for r in full_report.results:
            assert r.trials == (100 if not r.name.startswith("model:") else 3)

    def test_runtime(self, full_report):
        assert full_report.seconds <= 300

    def test_every_registered_op_listed(self, full_report):
        names = {r.name for r in full_report.results}
        assert set(DIFFERENTIABLE_OPS) <= names
        assert {f"loss:{n}" for n in LOSS_CASES} <= names
        assert "model:total_loss" in names

    def test_every_op_has_a_case(self):
        assert set(DIFFERENTIABLE_OPS) == set(OP_CASES)

    def test_model_parameters_checked(self, full_report):
        line = next(line for line in full_report.lines() if "model:total_loss" in line)
        assert line.startswith("PASS")

    def test_unknown_scope(self):
        with pytest.raises(ValueError):
            run_suite("everything", trials=1)


class TestNegativeControls:
    def test_corrupted_conv_detected(self):
        report = run_suite("ops", trials=5, overrides={"conv2d": corrupted_conv2d})
        by_name = {r.name: r for r in report.results}
        assert not by_name["conv2d"].passed
        assert by_name["conv2d"].max_error > 1e-2
        assert not report.passed
        others = [r for n, r in by_name.items() if n != "conv2d"]
        assert all(r.passed for r in others)

    def test_corrupted_loss_detected(self):
        def scaled_reg(a, b):
            loss = L.reg_loss(a, b)
            return T._result("sum", loss.data, (loss,), lambda g: (0.9 * g,))
        report = run_suite("losses", trials=3, overrides={"reg_loss": scaled_reg})
        assert not {r.name: r for r in report.results}["loss:reg_loss"].passed

    def test_op_without_case_fails(self, monkeypatch):
        monkeypatch.setitem(DIFFERENTIABLE_OPS, "mystery", lambda x: x)
        report = run_suite("ops", trials=1)
        r = {r.name: r for r in report.results}["mystery"]
        assert not r.passed and "no gradient-check case" in r.problem

    def test_failure_line_reports_error(self):
        report = run_suite("ops", trials=2, overrides={"conv2d": corrupted_conv2d})
        line = next(line for line in report.lines() if " conv2d " in line)
        assert line.startswith("FAIL") and "max_rel_err=" in line


class TestGradCheckHelper:
    def test_kink_refinement_keeps_real_errors(self):
        # a wrong backward stays wrong at every step size
        def wrong(x):
            y = T.square(x)
            return T._result("square", y.data, (y,), lambda g: (2.0 * g,))
        with T.precision(np.float64):
            x = Tensor(np.array([0.3, -0.7]), requires_grad=True)
            err = T.grad_check(lambda t: wrong(t).sum(), x, refine=2)
        assert err > 0.1

    def test_exact_op(self):
        with T.precision(np.float64):
            x = Tensor(np.array([0.3, -0.7, 1.2]), requires_grad=True)
            assert T.grad_check(lambda t: T.square(t).sum(), x) <= 1e-8
