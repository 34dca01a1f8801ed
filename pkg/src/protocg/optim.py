"""Adam optimizer over named parameter tensors."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .autodiff import Tensor
from .errors import ContractError, ParameterError


@dataclass
class AdamState:
    """First/second moment buffers plus hyperparameters; shapes mirror params."""

    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def init_adam(params: dict[str, Tensor], lr=0.001, beta1=0.9, beta2=0.999,
              eps=1e-8) -> AdamState:
    if lr <= 0:
        raise ParameterError(f"learning rate must be positive, got {lr}")
    state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
    for name, p in params.items():
        state.m[name] = np.zeros_like(p.values)
        state.v[name] = np.zeros_like(p.values)
    return state


def adam_step(params: dict[str, Tensor], state: AdamState,
              grads: dict[str, np.ndarray] | None = None) -> None:
    """One in-place bias-corrected Adam update; grads default to ``p.grad``."""
    state.t += 1
    for name, p in params.items():
        g = grads.get(name) if grads is not None else p.grad
        if g is None:
            raise ContractError(f"adam_step: parameter {name!r} has no gradient")
        if g.shape != p.values.shape:
            raise ContractError(
                f"adam_step: gradient shape {g.shape} != param shape "
                f"{p.values.shape} for {name!r}")
        kernels.adam_update(p.values, np.ascontiguousarray(g),
                            state.m[name], state.v[name],
                            state.lr, state.beta1, state.beta2, state.eps, state.t)
