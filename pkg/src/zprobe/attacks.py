"""Byzantine update attacks and protocol deviations.

Update attacks rewrite a client's real-valued update before it enters the
protocol. Deviations are :class:`~zprobe.secagg.Client` subclasses that
override exactly one hook of the honest state machine.
"""

from __future__ import annotations

import enum
import random
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np

from zprobe.field import P, FixedVec, vec_add
from zprobe.primitives import derive_seed, random_field
from zprobe.secagg import Client
from zprobe.zk import AuthValue


class AttackKind(str, enum.Enum):
    NONE = "none"
    SIGN_FLIP = "sign_flip"
    SCALING = "scaling"
    NON_OMNISCIENT = "non_omniscient"
    INCONSISTENT_UPDATE = "inconsistent_update"
    WRONG_MASKED_COMPUTE = "wrong_masked_compute"
    WRONG_SEED = "wrong_seed"


UPDATE_ATTACKS = {AttackKind.SIGN_FLIP, AttackKind.SCALING, AttackKind.NON_OMNISCIENT}


def attacked_indices(l: int, s_m: float, seed: int) -> np.ndarray:
    if not 0 < s_m <= 1:
        raise ValueError("S_m must lie in (0, 1]")
    count = max(1, int(round(s_m * l)))
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(l, size=count, replace=False))


def _as_real(u):
    if isinstance(u, FixedVec):
        return u.decode(), u.scale_bits
    return np.asarray(u, dtype=np.float64), None


def _wrap(x: np.ndarray, scale_bits):
    return x if scale_bits is None else FixedVec.from_real(x, scale_bits)


def attack_sign_flip(u, kappa: float, s_m: float = 1.0, seed: int = 0):
    """``u <- -kappa * u`` on a random ``s_m`` fraction of coordinates."""
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    x, scale = _as_real(u)
    out = x.copy()
    idx = attacked_indices(len(x), s_m, seed)
    out[idx] = -kappa * x[idx]
    return _wrap(out, scale)


def attack_scale(u, kappa: float, s_m: float = 1.0, seed: int = 0):
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    x, scale = _as_real(u)
    out = x.copy()
    idx = attacked_indices(len(x), s_m, seed)
    out[idx] = kappa * x[idx]
    return _wrap(out, scale)


def attack_non_omniscient(u, kappa: float, s_m: float = 1.0, seed: int = 0):
    """Set attacked coordinates to ``mean(u) - kappa * std(u)`` of the client's own update."""
    x, scale = _as_real(u)
    if len(x) < 2:
        raise ValueError("need at least two coordinates for a standard deviation")
    out = x.copy()
    idx = attacked_indices(len(x), s_m, seed)
    out[idx] = x.mean() - kappa * x.std()
    return _wrap(out, scale)


_UPDATE_FNS = {
    AttackKind.SIGN_FLIP: attack_sign_flip,
    AttackKind.SCALING: attack_scale,
    AttackKind.NON_OMNISCIENT: attack_non_omniscient,
}


# -- protocol deviations --------------------------------------------------------

class WrongMaskedCompute(Client):
    """Adds random nonzero offsets to a fraction of the masked coordinates."""

    kind = AttackKind.WRONG_MASKED_COMPUTE.value

    def __init__(self, *args, s_m: float = 1.0, attack_seed: int = 0,
                 positions: Sequence[int] | None = None, **kwargs):
        super().__init__(*args, **kwargs)
        l = len(self.update)
        self.positions = (np.asarray(positions, dtype=int) if positions is not None
                          else attacked_indices(l, s_m, attack_seed))
        self._offset_rng = np.random.default_rng(attack_seed)

    def compute_masked(self) -> FixedVec:
        honest = super().compute_masked()
        offsets = np.zeros(len(honest), dtype=np.uint64)
        offsets[self.positions] = self._offset_rng.integers(1, P, size=len(self.positions),
                                                            dtype=np.uint64)
        return FixedVec(vec_add(honest.coords, offsets), honest.scale_bits)


class WrongSeed(Client):
    """Masks with a seed other than the one it secret-shares."""

    kind = AttackKind.WRONG_SEED.value

    def __init__(self, *args, attack_seed: int = 0, **kwargs):
        super().__init__(*args, **kwargs)
        rng = random.Random(attack_seed)
        fake = random_field(rng)
        while fake == self.b:
            fake = random_field(rng)
        self.fake_b = fake

    def mask_seed(self) -> int:
        return self.fake_b


class InconsistentUpdate(Client):
    """Presents a different update to the robustness proof than the one authenticated."""

    kind = AttackKind.INCONSISTENT_UPDATE.value

    def __init__(self, *args, replacement: FixedVec | None = None, **kwargs):
        super().__init__(*args, **kwargs)
        self.replacement = replacement

    def present_update(self, wires: Mapping[int, AuthValue]) -> Mapping[int, AuthValue]:
        if self.replacement is None:
            return wires
        return {k: AuthValue(self.replacement[k], w.mac, w.key) for k, w in wires.items()}


def perturbed_update(update: FixedVec, s_m: float, seed: int) -> FixedVec:
    """Copy of ``update`` with random nonzero field offsets on an ``s_m`` fraction."""
    idx = attacked_indices(len(update), s_m, seed)
    offsets = np.zeros(len(update), dtype=np.uint64)
    offsets[idx] = np.random.default_rng(seed).integers(1, P, size=len(idx), dtype=np.uint64)
    return FixedVec(vec_add(update.coords, offsets), update.scale_bits)


_DEVIATIONS = {
    AttackKind.WRONG_MASKED_COMPUTE: WrongMaskedCompute,
    AttackKind.WRONG_SEED: WrongSeed,
    AttackKind.INCONSISTENT_UPDATE: InconsistentUpdate,
}


@dataclass(frozen=True)
class AttackSpec:
    kind: AttackKind = AttackKind.NONE
    kappa: float = 1.0
    s_m: float = 1.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", AttackKind(self.kind))
        if self.kappa < 0:
            raise ValueError("kappa must be non-negative")
        if self.kind != AttackKind.NONE and not 0 < self.s_m <= 1:
            raise ValueError("S_m must lie in (0, 1]")

    @property
    def is_update_attack(self) -> bool:
        return self.kind in UPDATE_ATTACKS

    @property
    def is_deviation(self) -> bool:
        return self.kind in _DEVIATIONS

    def apply_update(self, u: np.ndarray, client_id: int, epoch: int = 0) -> np.ndarray:
        if not self.is_update_attack:
            return u
        fn = _UPDATE_FNS[self.kind]
        return fn(u, self.kappa, self.s_m, derive_seed(self.seed, client_id, epoch))

    def factory(self, epoch: int = 0):
        """Client factory for a deviation, or None for honest protocol behavior."""
        if not self.is_deviation:
            return None
        cls = _DEVIATIONS[self.kind]
        spec = self

        def make(cid, update, neighbors, seed):
            extra = {}
            if cls is WrongMaskedCompute:
                extra = {"s_m": spec.s_m, "attack_seed": derive_seed(spec.seed, cid, epoch)}
            elif cls is WrongSeed:
                extra = {"attack_seed": derive_seed(spec.seed, cid, epoch)}
            elif cls is InconsistentUpdate:
                extra = {"replacement": perturbed_update(update, spec.s_m,
                                                         derive_seed(spec.seed, cid, epoch))}
            return cls(cid, update, neighbors, seed, **extra)

        return make

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind.value
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> AttackSpec:
        return cls(AttackKind(d["kind"]), float(d["kappa"]), float(d["s_m"]), int(d["seed"]))


def choose_byzantine(ids: Sequence[int], fraction: float, seed: int) -> list[int]:
    ids = sorted(ids)
    count = int(round(fraction * len(ids)))
    rng = np.random.default_rng(seed)
    return sorted(int(ids[i]) for i in rng.choice(len(ids), size=count, replace=False))


def magnitude_flag(mean_update: np.ndarray, g_max: float) -> bool:
    """Plausibility monitor: any decoded coordinate beyond the gradient bound."""
    return bool(np.any(np.abs(mean_update) > g_max))
