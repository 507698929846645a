"""Finite-difference harness behavior: pass/fail logic, determinism guard,
fault injection, precision enforcement."""

import numpy as np
import pytest

from sctfusion import autograd as ag
from sctfusion.autograd import Tensor
from sctfusion.errors import NonDeterministicForwardError, ShapeError
from sctfusion.gradcheck import finite_difference_check


def quadratic_setup():
    a = Tensor(np.array([0.5, -1.0, 2.0]), requires_grad=True, dtype=np.float64)
    b = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]), requires_grad=True, dtype=np.float64)

    def loss_fn():
        return ag.add(ag.sum_all(ag.mul(a, a)), ag.sum_all(ag.mul(b, b)))

    return {"a": a, "b": b}, loss_fn


class TestFiniteDifferenceCheck:
    def test_quadratic_passes_tight_tolerance(self):
        params, loss_fn = quadratic_setup()
        report = finite_difference_check(loss_fn, params, epsilon=1e-5, tolerance=1e-6)
        assert report.passed
        assert report.max_rel_error <= 1e-6
        assert set(report.per_parameter) == {"a", "b"}
        assert report.num_parameters == 7

    def test_pass_iff_error_within_tolerance(self):
        params, loss_fn = quadratic_setup()
        report = finite_difference_check(loss_fn, params, epsilon=1e-5, tolerance=1e-6)
        assert report.passed == (report.max_rel_error <= report.tolerance)

    def test_corrupted_gradient_fails_with_named_parameter(self):
        params, loss_fn = quadratic_setup()
        corrupted = {
            "a": 2 * params["a"].data,  # correct
            "b": 2 * params["b"].data + 1.0,  # off by a constant
        }
        report = finite_difference_check(
            loss_fn, params, epsilon=1e-5, tolerance=1e-6, analytic_grads=corrupted
        )
        assert not report.passed
        assert report.worst_parameter == "b"

    def test_nondeterministic_forward_detected(self):
        p = Tensor(np.array([1.0]), requires_grad=True, dtype=np.float64)
        rng = np.random.default_rng(0)

        def noisy_loss():
            return ag.scale(ag.sum_all(p), 1.0 + rng.random())

        with pytest.raises(NonDeterministicForwardError):
            finite_difference_check(noisy_loss, {"p": p})

    def test_stochastic_depth_with_live_rng_detected(self):
        """A training-mode forward with unpinned stochastic depth is rejected."""
        from sctfusion.blocks import stochastic_depth

        p = Tensor(np.ones((2, 3, 4)), requires_grad=True, dtype=np.float64)
        rng = np.random.default_rng(1)

        def loss_fn():
            return ag.mean_all(stochastic_depth(p, 0.5, training=True, rng=rng))

        with pytest.raises(NonDeterministicForwardError):
            finite_difference_check(loss_fn, {"p": p})

    def test_float32_parameters_rejected(self):
        p = Tensor(np.ones(2), requires_grad=True, dtype=np.float32)
        with pytest.raises(ShapeError, match="float64"):
            finite_difference_check(lambda: ag.sum_all(p), {"p": p})

    def test_relative_error_floor(self):
        """Zero-gradient parameters compare against the 1e-8 floor, not 0/0."""
        used = Tensor(np.array([1.0]), requires_grad=True, dtype=np.float64)
        unused = Tensor(np.array([3.0]), requires_grad=True, dtype=np.float64)

        def loss_fn():
            return ag.add(ag.sum_all(ag.mul(used, used)), ag.scale(ag.sum_all(unused), 0.0))

        report = finite_difference_check(
            loss_fn, {"used": used, "unused": unused}, epsilon=1e-5, tolerance=1e-4
        )
        assert report.passed
        assert report.per_parameter["unused"] <= 1e-4
