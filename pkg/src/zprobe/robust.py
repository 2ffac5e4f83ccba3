"""Cluster statistics, per-coordinate thresholds and the sampled-check budget."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from zprobe.field import DEFAULT_SCALE_BITS, FixedVec, encode_array


class RobustnessError(ValueError):
    pass


class UndetectableError(RobustnessError):
    pass


@dataclass(frozen=True)
class ClusterPlan:
    assignment: dict[int, int]
    clusters: list[list[int]]

    @property
    def c(self) -> int:
        return len(self.clusters)

    @property
    def sizes(self) -> list[int]:
        return [len(m) for m in self.clusters]


def cluster_assign(clients: Sequence[int], c: int, seed: int) -> ClusterPlan:
    """Uniformly random balanced partition of ``clients`` into ``c`` clusters."""
    clients = list(clients)
    if c < 1 or c > len(clients):
        raise RobustnessError(f"cannot form {c} clusters from {len(clients)} clients")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(clients))
    clusters = [sorted(clients[i] for i in part) for part in np.array_split(order, c)]
    assignment = {cid: j for j, members in enumerate(clusters) for cid in members}
    return ClusterPlan(assignment, clusters)


def cluster_means(aggregates: Sequence[FixedVec], sizes: Sequence[int]) -> list[np.ndarray]:
    if len(aggregates) != len(sizes):
        raise RobustnessError("one size per cluster aggregate")
    if any(s <= 0 for s in sizes):
        raise RobustnessError("empty cluster")
    return [agg.decode() / s for agg, s in zip(aggregates, sizes)]


def median_of_means(means: Sequence[np.ndarray]) -> np.ndarray:
    """Per-coordinate lower median."""
    stacked = np.sort(np.vstack(means), axis=0)
    return stacked[(len(means) - 1) // 2]


def theta_floor(scale_bits: int = DEFAULT_SCALE_BITS) -> float:
    return 2.0 ** (-scale_bits + 2)


@dataclass(frozen=True)
class RobustnessBounds:
    lam: np.ndarray
    theta: np.ndarray
    sigma_mu: np.ndarray
    eta: float
    scale_bits: int = DEFAULT_SCALE_BITS

    def lambda_field(self) -> FixedVec:
        return FixedVec(encode_array(self.lam, self.scale_bits), self.scale_bits)

    def theta_field(self) -> FixedVec:
        # never let rounding drop a positive threshold to zero
        enc = encode_array(self.theta, self.scale_bits)
        return FixedVec(np.maximum(enc, np.uint64(1)), self.scale_bits)

    def with_eta(self, eta: float) -> RobustnessBounds:
        theta = np.maximum(eta * self.sigma_mu, theta_floor(self.scale_bits))
        return RobustnessBounds(self.lam, theta, self.sigma_mu, eta, self.scale_bits)


def derive_threshold(means: Sequence[np.ndarray], eta: float,
                     scale_bits: int = DEFAULT_SCALE_BITS) -> RobustnessBounds:
    """Median of cluster means and ``theta = max(eta * std(means), floor)``."""
    if len(means) < 2:
        raise RobustnessError("need at least two cluster means")
    if eta <= 0:
        raise RobustnessError("eta must be positive")
    stacked = np.vstack(means)
    sigma = stacked.std(axis=0, ddof=1)
    theta = np.maximum(eta * sigma, theta_floor(scale_bits))
    return RobustnessBounds(median_of_means(means), theta, sigma, float(eta), scale_bits)


def default_eta(cluster_size: float, z: float = 3.0) -> float:
    return z * math.sqrt(cluster_size)


@dataclass(frozen=True)
class EtaReport:
    eta: float
    benign: int
    bound: float
    flagged: bool


def tune_eta(phi_max: float, n: int, passed: int, eta: float) -> EtaReport:
    """Check the benign-count bound ``passed <= (1 - phi_max) * n``.

    Monitor only: ``eta`` comes back unchanged and ``flagged`` says whether
    more clients passed than the assumed malicious fraction allows.
    """
    if not 0 <= phi_max < 1:
        raise RobustnessError("phi_max must lie in [0, 1)")
    bound = (1 - phi_max) * n
    return EtaReport(eta, passed, bound, passed > bound)


@dataclass(frozen=True)
class CheckBudget:
    q: int
    delta: float
    s_m: float
    l: int
    detection: float


def miss_probability(l: int, s_m: float, q: int) -> float:
    """``C(l(1-S_m), q) / C(l, q)`` as a running product."""
    clean = l * (1 - s_m)
    ratio = 1.0
    for i in range(q):
        if clean - i <= 0:
            return 0.0
        ratio *= (clean - i) / (l - i)
    return ratio


def detection_probability(l: int, s_m: float, q: int) -> float:
    return 1.0 - miss_probability(l, s_m, q)


def compute_q(l: int, s_m: float, delta: float) -> CheckBudget:
    """Smallest q whose detection probability exceeds ``1 - delta``, capped at l."""
    if l < 1:
        raise RobustnessError("l must be positive")
    if not 0 < delta < 1:
        raise RobustnessError("delta must lie in (0, 1)")
    if s_m <= 0:
        raise UndetectableError("S_m = 0 leaves nothing to detect")
    if s_m > 1:
        raise RobustnessError("S_m must lie in (0, 1]")
    clean = l * (1 - s_m)
    ratio = 1.0
    for q in range(1, l + 1):
        i = q - 1
        ratio = 0.0 if clean - i <= 0 else ratio * (clean - i) / (l - i)
        if 1.0 - ratio > 1.0 - delta:
            return CheckBudget(q, delta, s_m, l, 1.0 - ratio)
    return CheckBudget(l, delta, s_m, l, 1.0 - ratio)


def sample_indices(l: int, q: int, seed: int, client_id: int) -> list[int]:
    if q > l or q < 0:
        raise RobustnessError(f"cannot sample {q} of {l} indices")
    rng = np.random.default_rng([seed, client_id])
    return sorted(int(k) for k in rng.choice(l, size=q, replace=False))
