"""Adam optimizer with bias correction, plus the two-phase learning-rate
schedule used by the trainer."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor

__all__ = ["AdamState", "adam_step", "LrSchedule", "parameter_grads",
           "NonFiniteGradient"]


class NonFiniteGradient(ValueError):
    """Raised when a step sees NaN or inf gradients; no state is mutated."""


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def validate(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.eps <= 0.0:
            raise ValueError("Adam eps must be positive")


def parameter_grads(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    """Collect .grad per parameter; parameters outside the graph get zeros."""
    out = {}
    for name, p in params.items():
        out[name] = p.grad if p.grad is not None else np.zeros_like(p.data)
    return out


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: AdamState, lr: float):
    """One in-place Adam update over all parameters.

    A non-finite gradient anywhere rejects the whole step: parameters,
    moments and the step counter are left untouched and the error surfaces
    to the caller.
    """
    if lr <= 0.0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    state.validate()
    for name in params:
        if name not in grads:
            raise KeyError(f"missing gradient for parameter {name!r}")
        g = grads[name]
        if g.shape != params[name].data.shape:
            raise ValueError(
                f"gradient shape {g.shape} does not match parameter "
                f"{name!r} shape {params[name].data.shape}"
            )
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for parameter {name!r}")

    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        else:
            v = state.v[name]
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


@dataclass
class LrSchedule:
    """Two-phase schedule: a small warm rate, then the main rate."""

    epochs: int = 30
    early_epochs: int = 10
    lr_early: float = 1e-6
    lr_late: float = 1e-5

    def lr_for_epoch(self, epoch: int) -> float:
        """Learning rate for a 1-based epoch index."""
        if epoch < 1:
            raise ValueError("epoch indices are 1-based")
        return self.lr_early if epoch <= self.early_epochs else self.lr_late
