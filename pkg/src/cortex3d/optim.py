"""Parameter update rules: plain SGD and Adadelta.

Parameters and gradients travel as name-keyed dicts of numpy arrays (the
same keying Network.parameters() uses); updates happen in place. Adadelta
keeps two running accumulators per parameter, E[g^2] and E[dx^2], created
lazily with the parameter's shape. Defaults rho=0.95, eps=1e-6.
"""

from dataclasses import dataclass, field

import numpy as np


class NonFiniteGradientError(RuntimeError):
    """A gradient contained nan/inf; the step was rejected."""


def _check_finite(grads: dict) -> None:
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for {name}; step rejected")


@dataclass
class OptimizerState:
    """One update rule plus its per-parameter accumulators."""

    rule: str
    learning_rate: float = 0.01
    rho: float = 0.95
    eps: float = 1e-6
    avg_sq_grad: dict = field(default_factory=dict)
    avg_sq_delta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.rule not in ("sgd", "adadelta"):
            raise ValueError(f"unknown rule {self.rule!r}; expected 'sgd' or 'adadelta'")
        if self.rule == "sgd" and self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0.0 < self.rho < 1.0:
            raise ValueError(f"rho must lie in (0, 1), got {self.rho}")
        if self.eps <= 0:
            raise ValueError(f"eps must be > 0, got {self.eps}")

    @classmethod
    def sgd(cls, learning_rate: float) -> "OptimizerState":
        return cls(rule="sgd", learning_rate=learning_rate)

    @classmethod
    def adadelta(cls, rho: float = 0.95, eps: float = 1e-6) -> "OptimizerState":
        return cls(rule="adadelta", rho=rho, eps=eps)

    def step(self, params: dict, grads: dict) -> None:
        if self.rule == "sgd":
            sgd_step(params, grads, self.learning_rate)
        else:
            adadelta_step(self, params, grads)


def sgd_step(params: dict, grads: dict, lr: float) -> None:
    """p <- p - lr * g, in place."""
    if lr <= 0:
        raise ValueError(f"learning rate must be > 0, got {lr}")
    _check_finite(grads)
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} shape {p.shape}")
        p -= np.asarray(lr, dtype=p.dtype) * g


def adadelta_step(state: OptimizerState, params: dict, grads: dict) -> None:
    """One Adadelta update, in place.

    E[g^2] <- rho E[g^2] + (1-rho) g^2
    dx     = -sqrt(E[dx^2] + eps) / sqrt(E[g^2] + eps) * g
    E[dx^2] <- rho E[dx^2] + (1-rho) dx^2
    p      <- p + dx
    """
    if state.rule != "adadelta":
        raise ValueError(f"state rule is {state.rule!r}, not 'adadelta'")
    _check_finite(grads)
    rho, eps = state.rho, state.eps
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} shape {p.shape}")
        eg2 = state.avg_sq_grad.setdefault(name, np.zeros_like(p))
        ed2 = state.avg_sq_delta.setdefault(name, np.zeros_like(p))
        eg2 *= rho
        eg2 += np.asarray(1.0 - rho, dtype=p.dtype) * g * g
        delta = -np.sqrt(ed2 + eps) / np.sqrt(eg2 + eps) * g
        ed2 *= rho
        ed2 += np.asarray(1.0 - rho, dtype=p.dtype) * delta * delta
        p += delta
