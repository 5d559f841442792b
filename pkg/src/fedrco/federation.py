"""Client/server round mechanics shared by FedRCO and the first-order baselines."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .baselines import ServerOptState, fedprox_local_step, server_adaptive_aggregate, sgd_local_step
from .errors import DegenerateTrace, FactorizationFailure, ShapeMismatch
from .kfac import (KfacConfig, KfacLayerState, accumulate_factors, precondition_gradient,
                   preconditioner_spectrum, refresh_inverses_if_due)
from .model import LayerSpec, Network, evaluate_accuracy, forward_backward, loss as full_loss
from .stability import AnomalyVerdict, NormHistory, StabilityConfig, hard_reset, screen_update

Params = list[np.ndarray]


@dataclass(frozen=True)
class LocalSpec:
    optimizer: str = "fedrco"  # fedrco | sgd | fedprox
    lr: float = 0.00625
    local_epochs: int = 20
    batch_size: int = 32
    kfac: KfacConfig = field(default_factory=KfacConfig)
    stability: StabilityConfig = field(default_factory=StabilityConfig)
    preconditioner: str = "kfac"  # kfac | identity
    refresh_each_round: bool = False
    prox_mu: float = 0.01
    track_drift: bool = False

    def __post_init__(self):
        if self.optimizer not in ("fedrco", "sgd", "fedprox"):
            raise ValueError(f"unknown local optimizer {self.optimizer!r}")
        if self.preconditioner not in ("kfac", "identity"):
            raise ValueError(f"unknown preconditioner {self.preconditioner!r}")
        if self.local_epochs < 1 or self.batch_size < 1:
            raise ValueError("local_epochs and batch_size must be >= 1")


@dataclass(frozen=True)
class AggregationSpec:
    strategy: str = "adaptive"  # adaptive | plain
    swap_gamma: bool = False

    def __post_init__(self):
        if self.strategy not in ("adaptive", "plain"):
            raise ValueError(f"unknown aggregation strategy {self.strategy!r}")


@dataclass
class GlobalState:
    params: Params
    round: int = 0
    global_accuracy: float = 0.0


@dataclass
class ClientState:
    id: int
    x: np.ndarray
    y: np.ndarray
    params: Optional[Params] = None
    kfac: list[KfacLayerState] = field(default_factory=list)
    history: NormHistory = field(default_factory=NormHistory)
    consecutive_low: int = 0
    local_accuracy: Optional[float] = None
    hard_resets: int = 0
    inversions: int = 0
    participations: int = 0
    spectrum_max: float = 0.0

    def __post_init__(self):
        if len(self.y) == 0:
            raise ValueError(f"client {self.id} has no data")

    @property
    def data_size(self) -> int:
        return len(self.y)


@dataclass(frozen=True)
class StepContext:
    round: int
    client: int
    step: int


@dataclass
class Faults:
    """Test hooks. ``grad_hook`` sees raw gradients before preconditioning;
    ``curvature_hook`` may replace the layer states after the inverse refresh."""

    grad_hook: Optional[Callable[[StepContext, Params], Params]] = None
    curvature_hook: Optional[Callable[[StepContext, list[KfacLayerState]], list[KfacLayerState]]] = None


@dataclass
class AnomalyEvent:
    round: int
    client: int
    epoch: int
    score: float
    verdict: AnomalyVerdict


@dataclass
class ClientRoundReport:
    client: int
    data_size: int
    local_accuracy: float
    mean_loss: float
    verdicts: dict[AnomalyVerdict, int]
    hard_resets: int
    inversions: int
    events: list[AnomalyEvent]
    raw_norms: list[float]
    applied_norms: list[float]
    drift_sq: float = math.nan
    sigma_sq: float = math.nan
    grad_sq: float = math.nan
    spectrum_max: float = math.nan


@dataclass
class RoundReport:
    round: int
    participants: list[int]
    uploads: list[tuple[Params, int]]
    clients: list[ClientRoundReport]

    def __post_init__(self):
        if not self.participants:
            raise ValueError("a round needs at least one participant")


def sample_participants(num_clients: int, ratio: float, rng: np.random.Generator) -> list[int]:
    """Uniform subset of ``round(ratio*C)`` (at least one) client ids, sorted."""
    if not 0.0 < ratio <= 1.0:
        raise ValueError("ratio must lie in (0, 1]")
    m = max(1, int(round(ratio * num_clients)))
    if m >= num_clients:
        return list(range(num_clients))
    return sorted(int(i) for i in rng.choice(num_clients, size=m, replace=False))


def aggregate_weighted(uploads: Sequence[tuple[Sequence[np.ndarray], int]]) -> Params:
    """``sum_c (n_c/n) theta_c`` with ``n`` summed over the given uploads."""
    if not uploads:
        raise ValueError("nothing to aggregate")
    ref = uploads[0][0]
    for params, _ in uploads:
        if len(params) != len(ref) or any(p.shape != r.shape for p, r in zip(params, ref)):
            raise ShapeMismatch("uploads differ in parameter structure")
    total = sum(n for _, n in uploads)
    if total <= 0:
        raise ValueError("total data size must be positive")
    if len(uploads) == 1:
        return [p.copy() for p in ref]
    out = [np.zeros_like(r) for r in ref]
    for params, n in uploads:
        w = n / total
        for acc, p in zip(out, params):
            acc += w * p
    return out


def adaptive_pull(client: ClientState, global_state: GlobalState, swap_gamma: bool = False) -> ClientState:
    """Blend the global model into the client model when the client's local accuracy beats
    the global accuracy; otherwise overwrite. Curvature state is kept either way."""
    glob = global_state.params
    local_acc = client.local_accuracy
    acc = global_state.global_accuracy
    if client.params is None or local_acc is None or not (local_acc > acc) or local_acc + acc <= 0:
        client.params = [p.copy() for p in glob]
        return client
    gamma = local_acc / (local_acc + acc)
    if swap_gamma:
        gamma = 1.0 - gamma
    client.params = [gamma * g + (1.0 - gamma) * l for g, l in zip(glob, client.params)]
    return client


def _flat_sq_dist(a: Sequence[np.ndarray], b: Sequence[np.ndarray]) -> float:
    return float(sum(np.sum((x - y) ** 2) for x, y in zip(a, b)))


def _sq_norm(ps: Sequence[np.ndarray]) -> float:
    return float(sum(np.sum(p * p) for p in ps))


def run_local_round(client: ClientState, global_state: GlobalState, layers: Sequence[LayerSpec],
                    spec: LocalSpec, rng: np.random.Generator,
                    faults: Optional[Faults] = None) -> tuple[ClientState, ClientRoundReport]:
    """Run ``spec.local_epochs`` single-mini-batch steps starting from ``client.params``."""
    if client.params is None:
        client.params = [p.copy() for p in global_state.params]
    anchor = [p.copy() for p in global_state.params]
    start = [p.copy() for p in client.params]
    net = Network(list(layers), client.params)
    kcfg, scfg = spec.kfac, spec.stability
    use_kfac = spec.optimizer == "fedrco" and spec.preconditioner == "kfac"
    monitor = spec.optimizer == "fedrco" and scfg.enabled
    if use_kfac and len(client.kfac) != len(client.params):
        client.kfac = KfacLayerState.for_params(client.params)
    client.history = NormHistory(scfg.window)
    client.consecutive_low = 0

    verdicts = {v: 0 for v in AnomalyVerdict}
    events: list[AnomalyEvent] = []
    losses, raw_norms, applied_norms = [], [], []
    sigma_acc = grad_acc = 0.0
    round_spectrum = 0.0
    resets0, inv0 = client.hard_resets, client.inversions
    force_refresh = spec.refresh_each_round
    n = client.data_size
    bsz = min(spec.batch_size, n)

    for step in range(spec.local_epochs):
        ctx = StepContext(global_state.round, client.id, step)
        idx = rng.choice(n, size=bsz, replace=False)
        net.params = client.params
        value, grads, capture = forward_backward(net, client.x[idx], client.y[idx])
        losses.append(value)
        if faults is not None and faults.grad_hook is not None:
            grads = faults.grad_hook(ctx, grads)
        if spec.track_drift:
            _, full_grads, _ = forward_backward(net, client.x, client.y)
            sigma_acc += _flat_sq_dist(grads, full_grads)
            grad_acc += _sq_norm(full_grads)

        if spec.optimizer == "sgd":
            client.params = sgd_local_step(client.params, grads, spec.lr)
            continue
        if spec.optimizer == "fedprox":
            client.params = fedprox_local_step(client.params, grads, spec.lr, spec.prox_mu, anchor)
            continue

        update = grads
        curvature_failed = False
        if use_kfac:
            try:
                states = [accumulate_factors(s, c, kcfg.ema_alpha, kcfg.gamma_norm)
                          for s, c in zip(client.kfac, capture)]
                before = states[0].inversions
                states = [refresh_inverses_if_due(s, kcfg, force=force_refresh) for s in states]
            except (DegenerateTrace, FactorizationFailure):
                curvature_failed = True
            else:
                force_refresh = False
                if states[0].inversions != before:
                    client.inversions += 1
                    if spec.track_drift:
                        lam = max(preconditioner_spectrum(s)[1] for s in states)
                        round_spectrum = max(round_spectrum, lam)
                        client.spectrum_max = max(client.spectrum_max, lam)
                client.kfac = states
                if faults is not None and faults.curvature_hook is not None:
                    client.kfac = faults.curvature_hook(ctx, client.kfac)
                update = [precondition_gradient(g, s) for g, s in zip(grads, client.kfac)]
        elif spec.track_drift:
            client.spectrum_max = max(client.spectrum_max, 1.0)
            round_spectrum = 1.0

        if not monitor:
            if curvature_failed:
                continue
            raw_norms.append(sum(float(np.linalg.norm(u)) for u in update))
            client.params = [p - spec.lr * u for p, u in zip(client.params, update)]
            continue

        if curvature_failed:
            update = [np.full_like(g, np.nan) for g in grads]
        sc = screen_update(update, client.history, client.consecutive_low, scfg)
        raw_norms.append(sc.raw_norm)
        verdicts[sc.verdict] += 1
        if sc.verdict is not AnomalyVerdict.NORMAL:
            events.append(AnomalyEvent(global_state.round, client.id, step, sc.score, sc.verdict))
        if sc.update is None:
            hard_reset(client, anchor)
            force_refresh = False
            continue
        client.params = [p - spec.lr * u for p, u in zip(client.params, sc.update)]
        applied = sc.applied_norm
        applied_norms.append(applied)
        client.history.push(applied)
        if sc.verdict is AnomalyVerdict.ACCUMULATED_DIVERGENCE:
            client.consecutive_low += 1
        else:
            client.consecutive_low = 0

    net.params = client.params
    client.local_accuracy = evaluate_accuracy(net, client.x, client.y)
    client.participations += 1
    report = ClientRoundReport(
        client=client.id,
        data_size=n,
        local_accuracy=client.local_accuracy,
        mean_loss=float(np.mean(losses)),
        verdicts=verdicts,
        hard_resets=client.hard_resets - resets0,
        inversions=client.inversions - inv0,
        events=events,
        raw_norms=raw_norms,
        applied_norms=applied_norms,
    )
    if spec.track_drift:
        k = spec.local_epochs
        report.drift_sq = _flat_sq_dist(client.params, start)
        report.sigma_sq = sigma_acc / k
        report.grad_sq = grad_acc / k
        report.spectrum_max = client.spectrum_max
    return client, report


def run_round(global_state: GlobalState, clients: Sequence[ClientState], participants: Sequence[int],
              layers: Sequence[LayerSpec], spec: LocalSpec, agg: AggregationSpec,
              rng_for: Callable[[int], np.random.Generator],
              server: Optional[ServerOptState] = None,
              faults: Optional[Faults] = None) -> tuple[Params, RoundReport]:
    """Pull, train and aggregate one round; returns the new global parameters.

    ``rng_for(client_id)`` supplies each participant's batch stream. Clients
    are processed (and aggregated) in ascending id order.
    """
    uploads, reports = [], []
    for cid in sorted(participants):
        client = clients[cid]
        if agg.strategy == "adaptive" and spec.optimizer == "fedrco":
            adaptive_pull(client, global_state, agg.swap_gamma)
        else:
            client.params = [p.copy() for p in global_state.params]
        client, rep = run_local_round(client, global_state, layers, spec, rng_for(cid), faults)
        uploads.append((client.params, client.data_size))
        reports.append(rep)
    new_params = aggregate_weighted(uploads)
    if server is not None and server.mode != "plain":
        pseudo = [g - a for g, a in zip(global_state.params, new_params)]
        server, new_params = server_adaptive_aggregate(server, global_state.params, pseudo)
    return new_params, RoundReport(global_state.round, sorted(participants), uploads, reports)


def global_loss(layers: Sequence[LayerSpec], params: Params, x, y) -> float:
    return full_loss(Network(list(layers), params), x, y)
