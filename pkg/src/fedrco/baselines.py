"""First-order local steps and server-side optimizers (FedAvg, FedProx, FedAvgM, FedAdam)."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ShapeMismatch

Params = list[np.ndarray]


def _check(a: Sequence[np.ndarray], b: Sequence[np.ndarray]) -> None:
    if len(a) != len(b) or any(x.shape != y.shape for x, y in zip(a, b)):
        raise ShapeMismatch("parameter lists differ in structure")


def sgd_local_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], lr: float) -> Params:
    _check(params, grads)
    return [p - lr * g for p, g in zip(params, grads)]


def fedprox_local_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], lr: float,
                       mu: float, anchor: Sequence[np.ndarray]) -> Params:
    """SGD on the local loss plus ``mu/2 * ||theta - anchor||^2``."""
    _check(params, grads)
    _check(params, anchor)
    if mu < 0:
        raise ValueError("mu must be >= 0")
    return [p - lr * (g + mu * (p - a)) for p, g, a in zip(params, grads, anchor)]


@dataclass
class ServerOptState:
    mode: str = "plain"  # plain | momentum | adam
    beta: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-3
    lr: float = 1.0
    momentum: Params | None = None
    m: Params | None = None
    v: Params | None = None
    step: int = 0

    def __post_init__(self):
        if self.mode not in ("plain", "momentum", "adam"):
            raise ValueError(f"unknown server mode {self.mode!r}")


def server_adaptive_aggregate(state: ServerOptState, params: Sequence[np.ndarray],
                              pseudo_grad: Sequence[np.ndarray]) -> tuple[ServerOptState, Params]:
    """One server step on ``pseudo_grad = theta_global - aggregate``.

    momentum: ``v <- beta*v + d; theta <- theta - lr*v``.
    adam: bias-corrected first/second moments of ``d``; ``theta <- theta - lr*m_hat/(sqrt(v_hat)+eps)``.
    """
    _check(params, pseudo_grad)
    if state.mode == "momentum":
        if state.momentum is None:
            state.momentum = [np.zeros_like(p) for p in params]
        _check(params, state.momentum)
        state.momentum = [state.beta * v + d for v, d in zip(state.momentum, pseudo_grad)]
        state.step += 1
        return state, [p - state.lr * v for p, v in zip(params, state.momentum)]
    if state.mode == "adam":
        if state.m is None:
            state.m = [np.zeros_like(p) for p in params]
            state.v = [np.zeros_like(p) for p in params]
        _check(params, state.m)
        state.step += 1
        state.m = [state.beta1 * m + (1 - state.beta1) * d for m, d in zip(state.m, pseudo_grad)]
        state.v = [state.beta2 * v + (1 - state.beta2) * d * d for v, d in zip(state.v, pseudo_grad)]
        c1 = 1 - state.beta1 ** state.step
        c2 = 1 - state.beta2 ** state.step
        new = [p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
               for p, m, v in zip(params, state.m, state.v)]
        return state, new
    raise ValueError("server_adaptive_aggregate requires mode 'momentum' or 'adam'")
