"""Central-finite-difference verification of analytic gradients.

The harness treats the forward pass as a scalar function of a named set of
parameters, perturbs every scalar element by ±epsilon, and compares the
resulting slope against the gradient produced by ``backward``. It demands
float64 parameters: in float32 the finite differences are dominated by
round-off noise and the comparison is meaningless.
"""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np
from pydantic import BaseModel, ConfigDict

from . import autograd
from .autograd import Tensor, zero_gradients
from .errors import NonDeterministicForwardError, ShapeError

RELATIVE_ERROR_FLOOR = 1e-8


class GradCheckReport(BaseModel):
    """Outcome of one finite-difference sweep over all parameters."""

    model_config = ConfigDict(extra="forbid")

    passed: bool
    max_rel_error: float
    tolerance: float
    epsilon: float
    worst_parameter: str
    num_parameters: int
    per_parameter: dict[str, float]


def finite_difference_check(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    epsilon: float = 1e-4,
    tolerance: float = 1e-4,
    analytic_grads: Mapping[str, np.ndarray] | None = None,
) -> GradCheckReport:
    """Compare analytic gradients of ``loss_fn`` against central differences.

    ``loss_fn`` must be deterministic (it is re-evaluated many times with
    perturbed parameters); a bitwise mismatch between two unperturbed
    evaluations raises :class:`NonDeterministicForwardError`. ``analytic_grads``
    overrides the gradients computed via ``backward`` — a hook for fault
    injection in tests.

    The per-element relative error is ``|fd - analytic| / max(|fd|, |analytic|,
    1e-8)``; the report passes iff the global maximum is within ``tolerance``.
    """
    for name, p in params.items():
        if p.data.dtype != np.float64:
            raise ShapeError(
                f"gradient checking requires float64 parameters; '{name}' is {p.data.dtype}"
            )
        if not p.requires_grad:
            raise ShapeError(f"parameter '{name}' does not require a gradient")

    with autograd.no_grad():
        f_a = float(loss_fn().data)
        f_b = float(loss_fn().data)
    if f_a != f_b:
        raise NonDeterministicForwardError(
            f"forward is not deterministic: {f_a!r} != {f_b!r} on re-evaluation"
        )

    if analytic_grads is None:
        zero_gradients(params.values())
        loss = loss_fn()
        loss.backward()
        analytic = {}
        for name, p in params.items():
            if p.grad is None:
                raise ShapeError(f"parameter '{name}' received no gradient")
            analytic[name] = np.array(p.grad, dtype=np.float64)
    else:
        analytic = {name: np.asarray(analytic_grads[name], dtype=np.float64) for name in params}

    per_parameter: dict[str, float] = {}
    worst_name, worst_err = "", 0.0
    with autograd.no_grad():
        for name, p in params.items():
            an = analytic[name]
            if an.shape != p.shape:
                raise ShapeError(
                    f"gradient shape {an.shape} != parameter shape {p.shape} for '{name}'"
                )
            flat = p.data.reshape(-1)
            if not np.shares_memory(flat, p.data):
                raise ShapeError(f"parameter '{name}' is not contiguous; cannot perturb in place")
            an_flat = an.reshape(-1)
            max_err = 0.0
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + epsilon
                f_plus = float(loss_fn().data)
                flat[i] = orig - epsilon
                f_minus = float(loss_fn().data)
                flat[i] = orig
                fd = (f_plus - f_minus) / (2.0 * epsilon)
                denom = max(abs(fd), abs(an_flat[i]), RELATIVE_ERROR_FLOOR)
                err = abs(fd - an_flat[i]) / denom
                if err > max_err:
                    max_err = err
            per_parameter[name] = max_err
            if not worst_name or max_err > worst_err:
                worst_name, worst_err = name, max_err

    return GradCheckReport(
        passed=worst_err <= tolerance,
        max_rel_error=worst_err,
        tolerance=tolerance,
        epsilon=epsilon,
        worst_parameter=worst_name,
        num_parameters=int(sum(p.data.size for p in params.values())),
        per_parameter=per_parameter,
    )
