"""Gradient anomaly monitor and resilience protocol.

The monitor scores each preconditioned update against a sliding window of
recently applied update norms and sorts it into one of three verdicts; the
protocol then applies the update, rescales it, or resets the client.
"""
from __future__ import annotations

import enum
import math
from collections import deque
from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterable, Sequence

import numpy as np

from .errors import ZeroGradient

if TYPE_CHECKING:  # pragma: no cover
    from .federation import ClientState


class AnomalyVerdict(enum.IntEnum):
    # ordered by severity so that comparisons express escalation
    NORMAL = 0
    ACCUMULATED_DIVERGENCE = 1
    SUDDEN_EXPLOSION = 2


@dataclass(frozen=True)
class StabilityConfig:
    enabled: bool = True
    tau_low: float = 10.0
    tau_high: float = 1000.0
    xi: float = 1e-8
    grad_stable: float = 10.0
    window: int = 10
    max_consecutive_low: int = 3
    warmup: int = 3

    def __post_init__(self):
        if not 1.0 < self.tau_low < self.tau_high:
            raise ValueError("require 1 < tau_low < tau_high")
        if not self.xi > 0:
            raise ValueError("xi must be positive")
        if not self.grad_stable > 0:
            raise ValueError("grad_stable must be positive")
        if self.window < 1 or self.max_consecutive_low < 1 or self.warmup < 0:
            raise ValueError("window and max_consecutive_low must be >= 1, warmup >= 0")


class NormHistory:
    """Ring buffer of the last ``capacity`` applied update norms."""

    def __init__(self, capacity: int = 10, values: Iterable[float] = ()):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._buf: deque[float] = deque(maxlen=capacity)
        for v in values:
            self.push(v)

    def push(self, value: float) -> None:
        if not (math.isfinite(value) and value >= 0):
            raise ValueError(f"history entries must be finite and >= 0, got {value}")
        self._buf.append(float(value))

    def clear(self) -> None:
        self._buf.clear()

    def mean(self) -> float:
        return sum(self._buf) / len(self._buf) if self._buf else 0.0

    def __len__(self) -> int:
        return len(self._buf)

    def __iter__(self):
        return iter(self._buf)

    def __repr__(self) -> str:
        return f"NormHistory({list(self._buf)}, capacity={self.capacity})"


def total_norm(per_layer: Sequence[np.ndarray]) -> float:
    """Sum of per-layer Frobenius norms; any non-finite entry gives +inf."""
    total = 0.0
    for g in per_layer:
        n = float(np.linalg.norm(g))
        if not math.isfinite(n):
            return math.inf
        total += n
    return total


def anomaly_score(current: float, hist: NormHistory, xi: float) -> float:
    if not xi > 0:
        raise ValueError("xi must be positive")
    if not math.isfinite(current):
        return math.inf
    if len(hist) == 0:
        return 0.0
    return current / (hist.mean() + xi)


def classify(score: float, consecutive_low: int, cfg: StabilityConfig) -> AnomalyVerdict:
    if math.isnan(score) or score >= cfg.tau_high:
        return AnomalyVerdict.SUDDEN_EXPLOSION
    if score <= cfg.tau_low:
        return AnomalyVerdict.NORMAL
    if consecutive_low >= cfg.max_consecutive_low:
        return AnomalyVerdict.SUDDEN_EXPLOSION
    return AnomalyVerdict.ACCUMULATED_DIVERGENCE


def soft_rollback(per_layer: Sequence[np.ndarray], grad_stable: float) -> list[np.ndarray]:
    """Rescale every block by one factor so the total norm equals ``grad_stable``."""
    norm = total_norm(per_layer)
    if norm == 0.0:
        raise ZeroGradient("cannot rescale an all-zero update")
    if not math.isfinite(norm):
        raise ValueError("cannot rescale a non-finite update")
    scale = grad_stable / norm
    return [g * scale for g in per_layer]


@dataclass
class Screening:
    verdict: AnomalyVerdict
    score: float
    raw_norm: float
    update: list[np.ndarray] | None  # None -> hard reset, nothing applied

    @property
    def applied_norm(self) -> float:
        return total_norm(self.update) if self.update is not None else 0.0


def screen_update(update: Sequence[np.ndarray], hist: NormHistory, consecutive_low: int,
                  cfg: StabilityConfig) -> Screening:
    """Score one preconditioned update and decide what (if anything) to apply.

    Scoring is skipped while the history holds fewer than ``cfg.warmup``
    entries, except that a non-finite update is always an explosion. Divergent
    updates larger than ``grad_stable`` are rescaled down to it; smaller ones
    already respect the bound and pass unchanged.
    """
    norm = total_norm(update)
    if not math.isfinite(norm):
        score = math.inf
    elif len(hist) < max(cfg.warmup, 1):
        score = 0.0
    else:
        score = anomaly_score(norm, hist, cfg.xi)
    verdict = classify(score, consecutive_low, cfg)
    if verdict is AnomalyVerdict.SUDDEN_EXPLOSION:
        return Screening(verdict, score, norm, None)
    out = list(update)
    if verdict is AnomalyVerdict.ACCUMULATED_DIVERGENCE and norm > cfg.grad_stable:
        out = soft_rollback(out, cfg.grad_stable)
    return Screening(verdict, score, norm, out)


def hard_reset(client: "ClientState", global_params: Sequence[np.ndarray]) -> "ClientState":
    """Discard curvature state and norm history; restore the global parameters."""
    from .kfac import KfacLayerState

    client.params = [np.array(p, dtype=np.float64, copy=True) for p in global_params]
    client.kfac = KfacLayerState.for_params(client.params)
    client.history.clear()
    client.consecutive_low = 0
    client.hard_resets += 1
    return client
