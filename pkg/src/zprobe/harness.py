"""Desk-scale federated training with the three-step robust aggregation round."""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping

import numpy as np

from zprobe.attacks import AttackKind, AttackSpec, choose_byzantine, magnitude_flag
from zprobe.config import ExperimentConfig
from zprobe.data import Dataset, gen_synthetic_data, ingest_csv_dataset
from zprobe.field import FixedVec, encode_array
from zprobe.models import Model, local_step
from zprobe.primitives import derive_seed
from zprobe.robust import (
    EtaReport,
    RobustnessBounds,
    cluster_assign,
    cluster_means,
    compute_q,
    default_eta,
    derive_threshold,
    sample_indices,
    tune_eta,
)
from zprobe.secagg import (
    SERVER,
    ClientFactory,
    DropStage,
    Message,
    MsgKind,
    RoundTranscript,
    honest_factory,
    run_aggregation,
)
from zprobe.zk import ZKSession, robustness_circuit, robustness_cost

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RoundParams:
    """Protocol and defense knobs for one aggregation round."""

    defense: bool = True
    clusters: int = 7
    eta: float = 0.0
    z: float = 3.0
    eta_mode: str = "adaptive"
    eta_decay: float = 0.85
    eta_min: float = 0.25
    phi_max: float = 0.25
    q_correctness: int = 0
    q_robustness: int = 1
    graph_mode: str = "neighbor"
    degree: int = 0
    threshold: int = 0
    g_max: float = 10.0

    @classmethod
    def from_config(cls, cfg: ExperimentConfig, length: int) -> RoundParams:
        q = compute_q(length, cfg.s_m_assumed, cfg.delta).q
        return cls(cfg.defense, cfg.clusters, cfg.eta, cfg.z, cfg.eta_mode, cfg.eta_decay,
                   cfg.eta_min, cfg.phi_max, q if cfg.correctness_checks else 0, q,
                   cfg.graph_mode, cfg.degree, cfg.threshold, cfg.g_max)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> RoundParams:
        return cls(**d)


@dataclass
class RoundOutcome:
    transcript: RoundTranscript
    contributors: list[int] = field(default_factory=list)
    aggregate: FixedVec | None = None
    mean_update: np.ndarray | None = None
    flagged_correctness: set[int] = field(default_factory=set)
    flagged_robustness: set[int] = field(default_factory=set)
    magnitude_flag: bool = False
    bounds: RobustnessBounds | None = None
    eta_report: EtaReport | None = None
    cluster_means: list[np.ndarray] = field(default_factory=list)
    phase_ms: dict[str, float] = field(default_factory=dict)


def _agg_kwargs(params: RoundParams) -> dict:
    return {
        "mode": params.graph_mode,
        "degree": params.degree or None,
        "threshold": params.threshold or None,
        "q": params.q_correctness,
    }


def _failed(tr: RoundTranscript) -> set[int]:
    return {i for i, v in tr.verdicts.items() if not v.passed}


def _robustness_step(updates, params, seed, sessions, factories, candidates, bounds, n,
                     transcript) -> tuple[set[int], float, EtaReport]:
    """Sampled range proofs against the public median; returns the passing clients."""
    length = len(next(iter(updates.values())))
    eta = params.eta or default_eta(n / params.clusters, params.z)
    cap = (1 - params.phi_max) * n
    lam = bounds.lambda_field().coords
    samples = {i: sample_indices(length, min(params.q_robustness, length), derive_seed(seed, 5), i)
               for i in candidates}
    for i in candidates:
        transcript.log(Message(MsgKind.ROBUST_SAMPLE, SERVER, i, tuple(samples[i])))
    provers = {i: factories.get(i, honest_factory)(i, updates[i], (), derive_seed(seed, 6, i))
               for i in candidates}
    passing = set(candidates)
    while True:
        theta = bounds.with_eta(eta).theta_field().coords
        transcript.log(Message(MsgKind.BOUNDS, SERVER, SERVER,
                               tuple(int(x) for x in np.concatenate([lam, theta]))))
        for i in sorted(passing):
            sess = sessions[i]
            cost = robustness_cost(theta, samples[i])
            sess.preprocess(randoms=cost, triples=cost)
            wires = provers[i].present_update(sess.committed("u"))
            verdict = robustness_circuit(sess, wires, lam, theta, samples[i])
            transcript.log(Message(MsgKind.ROBUST_PROOF, i, SERVER, tuple(sess.flush_transcript())))
            transcript.log(Message(MsgKind.ROBUST_VERDICT, SERVER, i, (int(verdict.passed),)))
            if not verdict.passed:
                passing.discard(i)
        if params.eta_mode != "adaptive" or len(passing) <= cap:
            break
        if eta * params.eta_decay < params.eta_min:
            break
        eta *= params.eta_decay
    return passing, eta, tune_eta(params.phi_max, n, len(passing), eta)


def secure_round(updates: Mapping[int, FixedVec], params: RoundParams, seed: int,
                 factories: Mapping[int, ClientFactory] | None = None,
                 dropouts: Mapping[int, Mapping[int, DropStage]] | None = None) -> RoundOutcome:
    """One training round: cluster aggregation, robustness proofs, final aggregation.

    With ``params.defense`` off this is a single secure aggregation over all
    clients. ``dropouts`` maps step (1 or 3) to per-client drop stages.
    """
    factories = dict(factories or {})
    dropouts = dropouts or {}
    ids = sorted(updates)
    n = len(ids)
    tr = RoundTranscript()
    out = RoundOutcome(tr)
    sessions = {i: ZKSession(derive_seed(seed, 10, i)) for i in ids}
    kw = _agg_kwargs(params)

    if not params.defense:
        t0 = time.perf_counter()
        run_aggregation(updates, seed=derive_seed(seed, 30), sessions=sessions, factories=factories,
                        dropouts=dropouts.get(3), transcript=tr, **kw)
        out.phase_ms["step3"] = 1e3 * (time.perf_counter() - t0)
        out.flagged_correctness = _failed(tr)
        return _finish(out, tr, updates, params)

    # step 1: per-cluster aggregation of authenticated updates
    t0 = time.perf_counter()
    plan = cluster_assign(ids, params.clusters, derive_seed(seed, 7))
    aggregates, sizes, candidates = [], [], []
    for j, members in enumerate(plan.clusters):
        sub = RoundTranscript()
        run_aggregation({i: updates[i] for i in members}, seed=derive_seed(seed, 20, j),
                        sessions=sessions, factories=factories, dropouts=dropouts.get(1),
                        transcript=sub, **kw)
        tr.messages.extend(sub.messages)
        out.flagged_correctness |= _failed(sub)
        if sub.survivors:
            aggregates.append(sub.aggregate)
            sizes.append(len(sub.survivors))
            candidates.extend(sub.survivors)
    out.phase_ms["step1"] = 1e3 * (time.perf_counter() - t0)
    if len(aggregates) < 2:
        log.warning("fewer than two non-empty clusters; round skipped")
        return out
    out.cluster_means = cluster_means(aggregates, sizes)

    # step 2: public bounds, robustness proofs on sampled coordinates
    t0 = time.perf_counter()
    eta0 = params.eta or default_eta(n / params.clusters, params.z)
    out.bounds = derive_threshold(out.cluster_means, eta0, updates[ids[0]].scale_bits)
    passing, eta, report = _robustness_step(updates, params, seed, sessions, factories,
                                            sorted(candidates), out.bounds, n, tr)
    out.bounds = out.bounds.with_eta(eta)
    out.eta_report = report
    out.flagged_robustness = set(candidates) - passing
    out.phase_ms["step2"] = 1e3 * (time.perf_counter() - t0)
    if not passing:
        log.warning("no client passed the robustness check; round skipped")
        return out

    # step 3: aggregate the benign-marked clients with their committed updates
    t0 = time.perf_counter()
    run_aggregation({i: updates[i] for i in sorted(passing)}, seed=derive_seed(seed, 30),
                    sessions=sessions, factories=factories, dropouts=dropouts.get(3),
                    transcript=tr, **kw)
    out.flagged_correctness |= _failed(tr)
    out.phase_ms["step3"] = 1e3 * (time.perf_counter() - t0)
    return _finish(out, tr, updates, params)


def _finish(out: RoundOutcome, tr: RoundTranscript, updates, params: RoundParams) -> RoundOutcome:
    out.contributors = list(tr.survivors)
    out.aggregate = tr.aggregate
    if out.contributors:
        out.mean_update = tr.aggregate.decode() / len(out.contributors)
        out.magnitude_flag = magnitude_flag(out.mean_update, params.g_max)
    return out


# -- training loop ----------------------------------------------------------------

@dataclass
class RoundMetrics:
    epoch: int
    accuracy: float
    contributors: int
    flagged_correctness: list[int]
    flagged_robustness: list[int]
    flagged_magnitude: bool
    agg_norm: float
    eta: float | None = None
    eta_flag: bool = False
    cluster_mean_norms: list[float] = field(default_factory=list)
    phase_ms: dict[str, float] = field(default_factory=dict)
    skipped: bool = False
    bounds: dict | None = None

    @property
    def flagged(self) -> set[int]:
        return set(self.flagged_correctness) | set(self.flagged_robustness)


@dataclass
class EpochRecord:
    """Inputs needed to re-execute one round, plus its transcript."""

    epoch: int
    inputs: dict
    transcript: RoundTranscript


@dataclass
class TrainingResult:
    config: ExperimentConfig
    metrics: list[RoundMetrics]
    model: Model
    byzantine: list[int]
    records: list[EpochRecord]
    initial_accuracy: float

    @property
    def final_accuracy(self) -> float:
        return self.metrics[-1].accuracy if self.metrics else self.initial_accuracy


def load_dataset(cfg: ExperimentConfig) -> Dataset:
    if cfg.data_source == "csv":
        return ingest_csv_dataset(cfg.data_path, cfg.n_clients, cfg.classes, cfg.data_header,
                                  cfg.test_fraction, derive_seed(cfg.seed, 300))
    return gen_synthetic_data(cfg.classes, cfg.dim, cfg.per_client, cfg.n_clients,
                              cfg.heterogeneity, cfg.separation, cfg.test_size,
                              derive_seed(cfg.seed, 300))


def build_model(cfg: ExperimentConfig, dim: int, classes: int) -> Model:
    model = Model(cfg.architecture, dim, classes, cfg.hidden)
    return model.init_random(derive_seed(cfg.seed, 500))


def deviation_factories(attack: AttackSpec, byzantine, epoch: int) -> dict[int, ClientFactory]:
    make = attack.factory(epoch)
    return {i: make for i in byzantine} if make is not None else {}


def run_training(cfg: ExperimentConfig, dataset: Dataset | None = None,
                 progress: Callable[[RoundMetrics], None] | None = None) -> TrainingResult:
    """Train for ``cfg.epochs`` rounds and collect per-round metrics."""
    cfg.validate()
    data = dataset or load_dataset(cfg)
    model = build_model(cfg, data.dim, data.classes)
    ids = list(range(1, cfg.n_clients + 1))
    byzantine = []
    if cfg.attack.kind != AttackKind.NONE:
        byzantine = choose_byzantine(ids, cfg.byzantine_fraction, derive_seed(cfg.seed, 400))
    params = RoundParams.from_config(cfg, model.size)
    metrics, records = [], []
    initial = model.accuracy(data.test_x, data.test_y)

    def client_update(i: int, epoch: int) -> np.ndarray:
        X, y = data.shards[i - 1]
        rng = np.random.default_rng([cfg.seed, 200, epoch, i])
        return local_step(model, X, y, cfg.lr, cfg.batch_size, rng, cfg.scale_bits)

    for epoch in range(1, cfg.epochs + 1):
        if cfg.threads > 1:
            with ThreadPoolExecutor(cfg.threads) as pool:
                raw = dict(zip(ids, pool.map(lambda i: client_update(i, epoch), ids)))
        else:
            raw = {i: client_update(i, epoch) for i in ids}
        for i in byzantine:
            raw[i] = cfg.attack.apply_update(raw[i], i, epoch)
        updates = {i: FixedVec(encode_array(raw[i], cfg.scale_bits), cfg.scale_bits) for i in ids}
        drops: dict[int, dict[int, DropStage]] = {}
        for ev in cfg.dropouts:
            if ev.epoch == epoch:
                drops.setdefault(ev.step, {})[ev.client] = ev.stage
        seed = derive_seed(cfg.seed, 100, epoch)
        factories = deviation_factories(cfg.attack, byzantine, epoch)
        outcome = secure_round(updates, params, seed, factories, drops)

        skipped = outcome.mean_update is None or outcome.magnitude_flag
        if not skipped:
            model.params = model.params + outcome.mean_update
        if outcome.magnitude_flag:
            log.warning("epoch %d: aggregate exceeds g_max; update discarded", epoch)
        m = RoundMetrics(
            epoch=epoch,
            accuracy=model.accuracy(data.test_x, data.test_y),
            contributors=len(outcome.contributors),
            flagged_correctness=sorted(outcome.flagged_correctness),
            flagged_robustness=sorted(outcome.flagged_robustness),
            flagged_magnitude=outcome.magnitude_flag,
            agg_norm=float(np.linalg.norm(outcome.mean_update)) if outcome.mean_update is not None else 0.0,
            eta=outcome.eta_report.eta if outcome.eta_report else None,
            eta_flag=outcome.eta_report.flagged if outcome.eta_report else False,
            cluster_mean_norms=[float(np.linalg.norm(mu)) for mu in outcome.cluster_means],
            phase_ms=outcome.phase_ms,
            skipped=skipped,
            bounds=None if outcome.bounds is None else {
                "eta": outcome.bounds.eta,
                "lambda": outcome.bounds.lam.tolist(),
                "theta": outcome.bounds.theta.tolist(),
            },
        )
        metrics.append(m)
        if progress:
            progress(m)
        if cfg.transcript == "all" or (cfg.transcript == "last" and epoch == cfg.epochs):
            inputs = {
                "epoch": epoch, "seed": seed, "params": params.to_dict(),
                "scale_bits": cfg.scale_bits,
                "updates": {str(i): u.tolist() for i, u in updates.items()},
                "byzantine": byzantine, "attack": cfg.attack.to_dict(),
                "dropouts": {str(s): {str(c): st.value for c, st in d.items()} for s, d in drops.items()},
            }
            records.append(EpochRecord(epoch, inputs, outcome.transcript))
    return TrainingResult(cfg, metrics, model, byzantine, records, initial)
