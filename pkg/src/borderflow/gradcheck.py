"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import ParameterSet, Tensor, evaluate_with_gradients, no_grad

# Fault-injection hook for exit-code tests: maps (name, grad) -> grad.
GRADIENT_FAULT_HOOK = None


@dataclass
class GradCheckReport:
    tolerance: float
    max_rel_error: float = 0.0
    per_param: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)  # (name, coordinate, rel_error)

    @property
    def passed(self) -> bool:
        return not self.failures

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} max_rel_error={self.max_rel_error:.3e} tolerance={self.tolerance:.1e}"


def _rel_error(a: float, n: float) -> float:
    # error relative to max(1, |analytic|, |numeric|); exact zeros compare clean
    return abs(a - n) / max(abs(a), abs(n), 1.0)


def finite_difference_check(program, params: ParameterSet, inputs=(), step: float = 1e-5,
                            tolerance: float = 1e-6) -> GradCheckReport:
    """Compare analytic gradients of a scalar program against central differences.

    Perturbs every parameter coordinate by ±step, so this is only meant for
    tiny models. Works in whatever dtype the parameters carry; use float64
    for meaningful tolerances.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    evaluate_with_gradients(program, params, *inputs)
    analytic = {name: t.grad.copy() for name, t in params.items()}
    if GRADIENT_FAULT_HOOK is not None:
        analytic = {name: GRADIENT_FAULT_HOOK(name, g) for name, g in analytic.items()}

    report = GradCheckReport(tolerance=tolerance)
    wrapped = [Tensor(np.asarray(x)) for x in inputs]
    for name, t in params.items():
        worst = 0.0
        flat = t.data.reshape(-1)
        gflat = analytic[name].reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + step
            with no_grad():
                f_plus = float(program(params, *wrapped).data)
            flat[i] = original - step
            with no_grad():
                f_minus = float(program(params, *wrapped).data)
            flat[i] = original
            numeric = (f_plus - f_minus) / (2.0 * step)
            rel = _rel_error(float(gflat[i]), numeric)
            if rel > worst:
                worst = rel
            if rel > tolerance:
                coord = np.unravel_index(i, t.data.shape)
                report.failures.append((name, coord, rel))
        report.per_param[name] = worst
        report.max_rel_error = max(report.max_rel_error, worst)
    return report
