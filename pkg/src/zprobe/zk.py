"""IT-MAC based zero-knowledge checks between one prover and one verifier.

A trusted dealer stands in for the VOLE preprocessing: it samples the
verifier's global key ``delta`` and hands out random authenticated values and
multiplication triples. Every authenticated wire satisfies
``mac = key + delta * value``; the prover holds ``(value, mac)`` and the
verifier holds ``key``.
"""

from __future__ import annotations

import random
import struct
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from zprobe.field import P, lift_signed
from zprobe.primitives import random_field


class ProofRejected(Exception):
    """Base for every verifier-side rejection."""


class OpeningRejected(ProofRejected):
    pass


class MultCheckFailed(ProofRejected):
    pass


class RangeCheckFailed(ProofRejected):
    pass


class DealerExhausted(RuntimeError):
    pass


class ConsistencyError(RuntimeError):
    pass


@dataclass(frozen=True, slots=True)
class AuthValue:
    value: int  # prover
    mac: int    # prover
    key: int    # verifier

    def __add__(self, other: AuthValue) -> AuthValue:
        return AuthValue((self.value + other.value) % P, (self.mac + other.mac) % P,
                         (self.key + other.key) % P)

    def __sub__(self, other: AuthValue) -> AuthValue:
        return AuthValue((self.value - other.value) % P, (self.mac - other.mac) % P,
                         (self.key - other.key) % P)

    def __neg__(self) -> AuthValue:
        return AuthValue(-self.value % P, -self.mac % P, -self.key % P)

    def scale(self, c: int) -> AuthValue:
        return AuthValue(self.value * c % P, self.mac * c % P, self.key * c % P)

    __rmul__ = scale


@dataclass(frozen=True)
class AuthTriple:
    a: AuthValue
    b: AuthValue
    c: AuthValue


@dataclass(frozen=True)
class ProofVerdict:
    passed: bool
    failed_check: str | None = None

    def __bool__(self) -> bool:
        return self.passed


@dataclass
class ZKSession:
    """Dealer, prover and verifier state for one (client, server) pair.

    Dealer material is drawn from pools filled by :meth:`preprocess`;
    running out raises :class:`DealerExhausted`.
    """

    seed: int
    delta: int = field(init=False)
    transcript: list[int] = field(default_factory=list)
    _rng: random.Random = field(init=False, repr=False)
    _randoms: list = field(default_factory=list, repr=False)
    _triples: list = field(default_factory=list, repr=False)
    _store: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._rng = random.Random(self.seed)
        self.delta = random_field(self._rng, nonzero=True)

    # -- dealer ---------------------------------------------------------
    def _dealer_value(self, x: int) -> AuthValue:
        key = random_field(self._rng)
        return AuthValue(x, (key + self.delta * x) % P, key)

    def preprocess(self, randoms: int = 0, triples: int = 0) -> None:
        rng = self._rng
        for _ in range(randoms):
            self._randoms.append(self._dealer_value(random_field(rng)))
        for _ in range(triples):
            a, b = random_field(rng), random_field(rng)
            self._triples.append(AuthTriple(self._dealer_value(a), self._dealer_value(b),
                                            self._dealer_value(a * b % P)))

    @property
    def remaining(self) -> tuple[int, int]:
        return len(self._randoms), len(self._triples)

    def _pop_random(self) -> AuthValue:
        if not self._randoms:
            raise DealerExhausted("no dealer random values left")
        return self._randoms.pop()

    def _pop_triple(self) -> AuthTriple:
        if not self._triples:
            raise DealerExhausted("no dealer triples left")
        return self._triples.pop()

    # -- authentication and opening -------------------------------------
    def authenticate(self, x: int) -> AuthValue:
        """Authenticate a prover value by correcting a dealer random ``r``.

        The prover sends ``d = x - r``; the verifier shifts its key by
        ``-delta * d`` and the prover keeps ``M[r]``.
        """
        r = self._pop_random()
        d = (x - r.value) % P
        self.transcript.append(d)
        return AuthValue(x % P, r.mac, (r.key - self.delta * d) % P)

    def add_public(self, v: AuthValue, c: int) -> AuthValue:
        """``v + c`` for a public constant ``c``; only the verifier key moves."""
        return AuthValue((v.value + c) % P, v.mac, (v.key - self.delta * c) % P)

    def check_opening(self, value: int, mac: int, key: int) -> bool:
        return mac % P == (key + self.delta * value) % P

    def open(self, v: AuthValue) -> int:
        self.transcript.extend((v.value, v.mac))
        if not self.check_opening(v.value, v.mac, v.key):
            raise OpeningRejected("MAC check failed on opening")
        return v.value

    def open_zero(self, v: AuthValue, label: str, exc=ProofRejected) -> None:
        if self.open(v) != 0:
            raise exc(label)

    def mult_check(self, x: AuthValue, y: AuthValue, z: AuthValue) -> None:
        """Sacrifice one triple to prove ``z = x*y``."""
        t = self._pop_triple()
        e = self.open(x - t.a)
        f = self.open(y - t.b)
        w = z - t.c - t.b.scale(e) - t.a.scale(f)
        w = self.add_public(w, -e * f % P)
        self.open_zero(w, "multiplication check", MultCheckFailed)

    def mul(self, x: AuthValue, y: AuthValue) -> AuthValue:
        z = self.authenticate(x.value * y.value % P)
        self.mult_check(x, y, z)
        return z

    # -- per-round store --------------------------------------------------
    def commit(self, name: str, values: Mapping[int, int]) -> dict[int, AuthValue]:
        """Authenticate a named vector once; later lookups reuse the same wires."""
        if name in self._store:
            raise ConsistencyError(f"{name!r} already authenticated in this session")
        wires = {k: self.authenticate(v) for k, v in values.items()}
        self._store[name] = wires
        return wires

    def committed(self, name: str) -> dict[int, AuthValue]:
        try:
            return self._store[name]
        except KeyError:
            raise ConsistencyError(f"{name!r} was never authenticated") from None

    def has(self, name: str) -> bool:
        return name in self._store

    def flush_transcript(self) -> list[int]:
        words, self.transcript = self.transcript, []
        return words


# -- circuits ---------------------------------------------------------------

def auth_prg(session: ZKSession, seed: AuthValue, k: int) -> AuthValue:
    """In-circuit ``(seed + k + 1)^5`` with three multiplication gates."""
    x = session.add_public(seed, k + 1)
    x2 = session.mul(x, x)
    x4 = session.mul(x2, x2)
    return session.mul(x4, x)


def range_bits(value: int, width: int) -> list[int]:
    """Bits of the prover's claimed value; out-of-range values wrap mod 2^width."""
    v = lift_signed(value) % (1 << width)
    return [(v >> j) & 1 for j in range(width)]


def range_proof(session: ZKSession, d: AuthValue, bound: int) -> None:
    """Prove ``0 <= d <= bound`` by decomposing ``d`` and ``bound - d`` into bits.

    Raises a :class:`ProofRejected` subclass on failure.
    """
    if bound < 0:
        raise ValueError("bound must be non-negative")
    width = max(1, bound.bit_length())
    if 1 << (width + 1) >= P:
        raise ValueError("bound too large for the field")
    complement = session.add_public(-d, bound)
    for side, target in (("low", d), ("high", complement)):
        acc = None
        for j, bit in enumerate(range_bits(target.value, width)):
            wire = session.authenticate(bit)
            session.mult_check(wire, wire, wire)
            term = wire.scale(1 << j)
            acc = term if acc is None else acc + term
        session.open_zero(acc - target, f"range {side} decomposition", RangeCheckFailed)


def range_cost(bound: int) -> int:
    """Dealer randoms (and triples) consumed by one :func:`range_proof`."""
    return 2 * max(1, bound.bit_length())


def correctness_circuit(session: ZKSession, client_id: int, seed_b: AuthValue,
                        pair_seeds: Mapping[int, AuthValue], update: Mapping[int, AuthValue],
                        masked: Sequence[int], indices: Sequence[int]) -> ProofVerdict:
    """Recompute masked coordinates in-circuit and compare them to the public ones."""
    for k in indices:
        try:
            acc = update[k] + auth_prg(session, seed_b, k)
            for j, a in pair_seeds.items():
                m = auth_prg(session, a, k)
                acc = acc - m if j < client_id else acc + m
            session.open_zero(session.add_public(acc, -int(masked[k]) % P),
                              f"masked coordinate {k}")
        except ProofRejected as exc:
            return ProofVerdict(False, f"correctness[{k}]: {exc}")
    return ProofVerdict(True)


def correctness_cost(n_indices: int, n_neighbors: int) -> int:
    return 3 * n_indices * (n_neighbors + 1)


def robustness_circuit(session: ZKSession, update: Mapping[int, AuthValue],
                       center: Sequence[int], threshold: Sequence[int],
                       indices: Sequence[int]) -> ProofVerdict:
    """Prove ``|u_k - center_k| < threshold_k`` on each sampled coordinate.

    Realised as ``0 <= u - center + (threshold - 1) <= 2*threshold - 2``.
    """
    for k in indices:
        th = lift_signed(int(threshold[k]))
        if th <= 0:
            raise ValueError(f"threshold at {k} must be positive")
        d = session.add_public(update[k], (th - 1 - int(center[k])) % P)
        try:
            range_proof(session, d, 2 * th - 2)
        except ProofRejected as exc:
            return ProofVerdict(False, f"robustness[{k}]: {exc}")
    return ProofVerdict(True)


def robustness_cost(threshold: Sequence[int], indices: Sequence[int]) -> int:
    return sum(range_cost(2 * lift_signed(int(threshold[k])) - 2) for k in indices)


# -- transcript words -------------------------------------------------------

def pack_words(words: Sequence[int]) -> bytes:
    """Length-prefixed little-endian u64 array."""
    return struct.pack(f"<I{len(words)}Q", len(words), *words)


def unpack_words(buf: bytes, offset: int = 0) -> tuple[list[int], int]:
    (n,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    if len(buf) < offset + 8 * n:
        raise ValueError("truncated word array")
    words = list(struct.unpack_from(f"<{n}Q", buf, offset))
    return words, offset + 8 * n
