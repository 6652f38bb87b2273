"""Adam with optional cosine-annealed learning rate."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ParameterSet


@dataclass(frozen=True)
class CosineSchedule:
    initial: float
    minimum: float
    total_steps: int

    def __post_init__(self):
        if self.initial <= 0 or self.minimum <= 0 or self.total_steps <= 0:
            raise ValueError("cosine schedule needs positive initial, minimum and total steps")


@dataclass(frozen=True)
class ConstantSchedule:
    value: float

    def __post_init__(self):
        if self.value <= 0:
            raise ValueError("learning rate must be positive")


class AdamState:
    """Per-parameter first/second moment estimates plus the step counter."""

    def __init__(self, params: ParameterSet, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, schedule=None):
        if not (0 < beta1 < 1 and 0 < beta2 < 1):
            raise ValueError("betas must lie strictly inside (0, 1)")
        if eps <= 0:
            raise ValueError("eps must be positive")
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.schedule = schedule if schedule is not None else ConstantSchedule(lr)
        self.step_count = 0
        self.m = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in params.items()}

    def moment_state(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.m:
            out["m/" + name] = self.m[name].copy()
            out["v/" + name] = self.v[name].copy()
        return out

    def load_moment_state(self, arrays: dict[str, np.ndarray], step_count: int) -> None:
        for name in self.m:
            self.m[name] = np.array(arrays["m/" + name])
            self.v[name] = np.array(arrays["v/" + name])
        self.step_count = step_count


def cosine_annealed_lr(state: AdamState, step: int) -> float:
    """Scheduled learning rate at `step`; endpoints are hit exactly."""
    sched = state.schedule
    if isinstance(sched, ConstantSchedule):
        return sched.value
    if step < 0 or step > sched.total_steps:
        raise ValueError(f"step {step} outside schedule range [0, {sched.total_steps}]")
    if step == 0:
        return sched.initial
    if step == sched.total_steps:
        return sched.minimum
    return sched.minimum + 0.5 * (sched.initial - sched.minimum) * (1.0 + np.cos(np.pi * step / sched.total_steps))


def adam_step(params: ParameterSet, state: AdamState) -> None:
    """One bias-corrected Adam update; clears the gradient accumulators.

    The update that advances the counter from t-1 to t uses the learning
    rate scheduled at step t-1, so the first update runs at the schedule's
    initial value.
    """
    t = state.step_count + 1
    lr_t = cosine_annealed_lr(state, state.step_count)
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        if name not in state.m:
            raise KeyError(f"optimizer state has no moments for parameter {name!r}")
        g = p.grad
        if g is None:
            raise ValueError(f"missing gradient for parameter {name!r}")
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape mismatch for {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= lr_t * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    params.zero_grad()
    state.step_count = t
