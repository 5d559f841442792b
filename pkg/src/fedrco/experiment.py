"""Build a federation from an :class:`ExperimentConfig`, run it, and write metrics.

Output directory layout::

    metrics.csv     one row per completed round (deterministic given the config)
    timings.csv     round, wall_time_ms (kept apart so metrics.csv stays byte-stable)
    anomalies.csv   round, client, epoch, score, verdict for every non-normal step
    config.json     the fully resolved configuration

Each CSV row is flushed and fsync'ed as soon as its round finishes, so a killed
run leaves files ending at the last completed round.
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import rng as rngmod
from .baselines import ServerOptState
from .config import ExperimentConfig
from .data import (Dataset, dirichlet_partition, iid_partition, load_dataset,
                   make_synthetic_classification, pathological_partition, train_test_split)
from .federation import (AggregationSpec, ClientState, Faults, GlobalState, LocalSpec,
                         RoundReport, run_round, sample_participants)
from .kfac import KfacConfig
from .model import Network, build_cnn, build_mlp, evaluate_accuracy
from .stability import AnomalyVerdict, StabilityConfig

METRICS_HEADER = [
    "round", "test_accuracy", "train_loss", "train_accuracy", "participants",
    "normal_steps", "divergence_events", "explosion_events", "hard_resets",
    "inversions", "uplink_scalars", "total_scalars",
]


@dataclass
class MetricsRecord:
    round: int
    test_accuracy: float
    train_loss: float
    train_accuracy: float
    participants: int
    normal_steps: int
    divergence_events: int
    explosion_events: int
    hard_resets: int
    inversions: int
    uplink_scalars: int
    total_scalars: int
    wall_time_ms: float = 0.0

    def row(self) -> list[str]:
        return [_fmt(getattr(self, k)) for k in METRICS_HEADER]


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    records: list[MetricsRecord]
    initial_params: list[np.ndarray]
    final_params: list[np.ndarray]
    network: Network
    clients: list[ClientState]
    reports: list[RoundReport] = field(default_factory=list)

    @property
    def accuracies(self) -> list[float]:
        return [r.test_accuracy for r in self.records]


def local_spec(cfg: ExperimentConfig, track_drift: bool = False) -> LocalSpec:
    optimizer = {"fedrco": "fedrco", "fedrco_ori": "fedrco", "fedprox": "fedprox"}.get(cfg.method, "sgd")
    k, s = cfg.kfac, cfg.stability
    return LocalSpec(
        optimizer=optimizer,
        lr=cfg.lr,
        local_epochs=cfg.local_epochs,
        batch_size=cfg.batch_size,
        kfac=KfacConfig(ema_alpha=k.ema_alpha, damping_eps=k.eps, t_inv=k.t_inv,
                        pi_mode=k.pi_mode, gamma_norm=k.gamma_norm),
        stability=StabilityConfig(enabled=s.enabled, tau_low=s.tau_low, tau_high=s.tau_high,
                                  xi=s.xi, grad_stable=s.grad_stable, window=s.window,
                                  max_consecutive_low=s.max_consecutive, warmup=s.warmup),
        preconditioner=k.preconditioner,
        refresh_each_round=k.refresh_each_round,
        prox_mu=cfg.fedprox.mu,
        track_drift=track_drift,
    )


def aggregation_spec(cfg: ExperimentConfig) -> AggregationSpec:
    strategy = cfg.aggregation.strategy if cfg.method == "fedrco" else "plain"
    return AggregationSpec(strategy=strategy, swap_gamma=cfg.aggregation.swap_gamma)


def server_state(cfg: ExperimentConfig) -> Optional[ServerOptState]:
    s = cfg.server
    if cfg.method == "fedavgm":
        return ServerOptState(mode="momentum", beta=s.beta, lr=s.lr)
    if cfg.method == "fedadam":
        return ServerOptState(mode="adam", beta1=s.beta1, beta2=s.beta2, eps=s.eps, lr=s.adam_lr)
    return None


def build_data(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    d = cfg.dataset
    if d.kind == "file":
        return load_dataset(d.path), load_dataset(d.test_path)
    full = make_synthetic_classification(d.dim, d.num_classes, d.num_samples + d.test_samples,
                                         d.separation, rngmod.stream(cfg.seed, "data"), noise=d.noise)
    return train_test_split(full, d.test_samples, rngmod.stream(cfg.seed, "split"))


def build_partition(cfg: ExperimentConfig, train: Dataset) -> list[np.ndarray]:
    p = cfg.partition
    r = rngmod.stream(cfg.seed, "partition")
    if p.kind == "dirichlet":
        return dirichlet_partition(train, cfg.num_clients, p.alpha, r, repair=p.repair)
    if p.kind == "pathological":
        return pathological_partition(train, cfg.num_clients, p.labels_per_client, r)
    return iid_partition(train, cfg.num_clients, r)


def build_network(cfg: ExperimentConfig, train: Dataset) -> Network:
    r = rngmod.stream(cfg.seed, "init")
    sample_shape = train.features.shape[1:]
    if cfg.model.arch == "cnn":
        if len(sample_shape) != 3:
            raise ValueError("cnn architecture needs [C, H, W] samples")
        return build_cnn(sample_shape, train.num_classes, r, tuple(cfg.model.conv_channels),
                         tuple(cfg.model.conv_hidden), cfg.model.kernel, cfg.model.pad)
    width = int(np.prod(sample_shape))
    if len(sample_shape) != 1:
        raise ValueError("mlp architecture needs flat feature vectors")
    return build_mlp([width, *cfg.model.hidden, train.num_classes], r)


class _CsvAppender:
    def __init__(self, path: Path, header: Sequence[str]):
        self.path = path
        with open(path, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(header)
            fh.flush()
            os.fsync(fh.fileno())

    def append(self, rows: Sequence[Sequence[str]]) -> None:
        if not rows:
            return
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerows(rows)
        with open(self.path, "a", newline="") as fh:
            fh.write(buf.getvalue())
            fh.flush()
            os.fsync(fh.fileno())


def _record(t: int, acc: float, rep: RoundReport, d: int, wall_ms: float) -> MetricsRecord:
    cr = rep.clients
    p = len(rep.participants)
    return MetricsRecord(
        round=t,
        test_accuracy=acc,
        train_loss=float(np.mean([c.mean_loss for c in cr])),
        train_accuracy=float(np.mean([c.local_accuracy for c in cr])),
        participants=p,
        normal_steps=sum(c.verdicts[AnomalyVerdict.NORMAL] for c in cr),
        divergence_events=sum(c.verdicts[AnomalyVerdict.ACCUMULATED_DIVERGENCE] for c in cr),
        explosion_events=sum(c.verdicts[AnomalyVerdict.SUDDEN_EXPLOSION] for c in cr),
        hard_resets=sum(c.hard_resets for c in cr),
        inversions=sum(c.inversions for c in cr),
        uplink_scalars=p * (d + 1),
        total_scalars=p * (2 * d + 1),
        wall_time_ms=wall_ms,
    )


def run_experiment(cfg: ExperimentConfig, out_dir=None, *, faults: Optional[Faults] = None,
                   keep_reports: bool = False, track_drift: bool = False,
                   on_round: Optional[Callable[[MetricsRecord], None]] = None) -> ExperimentResult:
    """Run ``cfg.rounds`` rounds; deterministic given ``cfg`` (including ``cfg.seed``)."""
    cfg.check()
    train, test = build_data(cfg)
    parts = build_partition(cfg, train)
    net = build_network(cfg, train)
    layers = net.layers
    initial = [p.copy() for p in net.params]
    clients = [ClientState(id=c, x=train.features[idx], y=train.labels[idx])
               for c, idx in enumerate(parts)]
    spec = local_spec(cfg, track_drift)
    agg = aggregation_spec(cfg)
    server = server_state(cfg)
    d = net.num_params

    writers = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
        writers = (
            _CsvAppender(out / "metrics.csv", METRICS_HEADER),
            _CsvAppender(out / "timings.csv", ["round", "wall_time_ms"]),
            _CsvAppender(out / "anomalies.csv", ["round", "client", "epoch", "score", "verdict"]),
        )

    state = GlobalState(params=[p.copy() for p in initial], round=0,
                        global_accuracy=evaluate_accuracy(net, test.features, test.labels))
    records: list[MetricsRecord] = []
    reports: list[RoundReport] = []
    for t in range(1, cfg.rounds + 1):
        tic = time.perf_counter()
        state.round = t
        chosen = sample_participants(cfg.num_clients, cfg.participation,
                                     rngmod.stream(cfg.seed, "participants", t))
        new_params, rep = run_round(
            state, clients, chosen, layers, spec, agg,
            lambda cid, _t=t: rngmod.stream(cfg.seed, "batches", _t, cid),
            server=server, faults=faults)
        acc = evaluate_accuracy(net.with_params(new_params), test.features, test.labels)
        state = GlobalState(params=new_params, round=t, global_accuracy=acc)
        rec = _record(t, acc, rep, d, (time.perf_counter() - tic) * 1000.0)
        records.append(rec)
        if keep_reports:
            reports.append(rep)
        if writers is not None:
            writers[0].append([rec.row()])
            writers[1].append([[str(t), f"{rec.wall_time_ms:.3f}"]])
            writers[2].append([[str(e.round), str(e.client), str(e.epoch), repr(float(e.score)),
                                e.verdict.name.lower()]
                               for c in rep.clients for e in c.events])
        if on_round is not None:
            on_round(rec)

    return ExperimentResult(cfg, records, initial, state.params, net.with_params(state.params),
                            clients, reports)


def read_metrics(path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


SWEEP_ALIASES = {"t_inv": "kfac.t_inv", "alpha": "partition.alpha", "eps": "kfac.eps"}


def sweep(cfg: ExperimentConfig, param: str, values: Sequence, out_dir=None,
          **kwargs) -> list[tuple[object, ExperimentResult]]:
    """Run one experiment per value of ``param`` (dotted config path or alias)."""
    path = SWEEP_ALIASES.get(param, param)
    results = []
    for v in values:
        sub = cfg.replace_path(path, v)
        target = None if out_dir is None else Path(out_dir) / f"{param}={v}"
        results.append((v, run_experiment(sub, target, **kwargs)))
    return results


def rounds_to_reach(accuracies: Sequence[float], target: float) -> Optional[int]:
    """1-based index of the first round whose accuracy is >= target, or None."""
    for i, a in enumerate(accuracies, start=1):
        if a >= target - 1e-12:
            return i
    return None


def expected_inversions(steps: int, t_inv: int) -> int:
    return math.ceil(steps / t_inv)
