"""First-order optimizers (SGD, Adam, SAM), weight EMA and learning-rate schedules."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .params import check_dims, l2_norm

GradFn = Callable[[np.ndarray], tuple[float, np.ndarray]]


def sgd_step(theta: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
    check_dims(theta, grad, "gradient")
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    return theta - lr * grad


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    @classmethod
    def zeros(cls, dim: int, **hyper) -> "AdamState":
        return cls(np.zeros(dim), np.zeros(dim), **hyper)


def adam_step(state: AdamState, theta: np.ndarray, grad: np.ndarray,
              lr: float | None = None) -> tuple[AdamState, np.ndarray]:
    """One bias-corrected Adam update.

    ``lr`` overrides ``state.lr`` for this step so a schedule can drive it.
    Weight decay is decoupled and applied to ``theta`` before the moment update.
    """
    check_dims(theta, grad, "gradient")
    check_dims(state.m, theta, "Adam state")
    lr = state.lr if lr is None else lr
    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    if state.weight_decay:
        theta = theta - lr * state.weight_decay * theta
    theta = theta - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return replace(state, m=m, v=v, step=t), theta


def sam_perturbation(grad: np.ndarray, rho: float) -> np.ndarray | None:
    """Ascent offset ``rho * g / ||g||``, or None when the gradient vanishes."""
    norm = l2_norm(grad)
    if norm == 0.0:
        return None
    return grad * (rho / norm)


def sam_step(grad_fn: GradFn, theta: np.ndarray, rho: float,
             inner: Callable[[np.ndarray, np.ndarray], np.ndarray]) -> tuple[float, np.ndarray]:
    """Sharpness-aware step: evaluate the gradient at ``theta + eps`` and hand it to ``inner``.

    Returns the loss at ``theta`` and the updated weights. A zero gradient at
    ``theta`` skips the perturbation and applies ``inner`` with that gradient.
    """
    if rho <= 0:
        raise ValueError(f"rho must be positive, got {rho}")
    loss, g1 = grad_fn(theta)
    eps = sam_perturbation(g1, rho)
    if eps is None:
        return loss, inner(theta, g1)
    _, g2 = grad_fn(theta + eps)
    return loss, inner(theta, g2)


@dataclass
class EmaState:
    shadow: np.ndarray
    decay: float = 0.99

    def __post_init__(self):
        if not 0.0 < self.decay < 1.0:
            raise ValueError(f"EMA decay must lie in (0, 1), got {self.decay}")


def ema_update(state: EmaState, theta: np.ndarray) -> EmaState:
    check_dims(state.shadow, theta, "EMA")
    return EmaState(state.decay * state.shadow + (1.0 - state.decay) * theta, state.decay)


@dataclass(frozen=True)
class LrSchedule:
    kind: str = "constant"
    base_lr: float = 1e-3
    cycle_length: int = 1
    min_lr: float = 0.0

    def __post_init__(self):
        if self.kind not in ("constant", "cyclic"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if self.kind == "cyclic":
            if self.cycle_length < 1:
                raise ValueError("cycle_length must be >= 1")
            if not 0 < self.min_lr <= self.base_lr:
                raise ValueError("cyclic schedule needs 0 < min_lr <= base_lr")


def lr_at(schedule: LrSchedule, t: int) -> float:
    """Learning rate for step ``t`` (0-based).

    The cyclic schedule is a linear sawtooth: ``base_lr`` at the first step of
    each cycle, falling to ``min_lr`` at its last step.
    """
    if t < 0:
        raise ValueError("iteration must be non-negative")
    if schedule.kind == "constant":
        return schedule.base_lr
    c = schedule.cycle_length
    if c == 1:
        return schedule.base_lr
    frac = (t % c) / (c - 1)
    return schedule.base_lr + (schedule.min_lr - schedule.base_lr) * frac
