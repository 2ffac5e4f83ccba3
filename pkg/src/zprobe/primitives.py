"""Seed expansion, Diffie-Hellman key agreement and Shamir secret sharing."""

from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from zprobe.field import P, inv, mul, reduce

# Safe prime DH_P = 2*DH_Q + 1 (128 bits); DH_G = 4 generates the order-DH_Q subgroup.
DH_Q = 85070591730234615865843651857942057263
DH_P = 2 * DH_Q + 1
DH_G = 4

PRG_MULS = 3  # x^2, x^4, x^5


class InvalidKey(ValueError):
    pass


class ShamirError(ValueError):
    pass


class InsufficientShares(ShamirError):
    pass


class MalformedShares(ShamirError):
    pass


def random_field(rng: random.Random, nonzero: bool = False) -> int:
    while True:
        v = rng.getrandbits(61)
        if v < P and (v or not nonzero):
            return v


def prg_eval(seed: int, k: int) -> int:
    """Expand ``seed`` at index ``k`` as ``(seed + k + 1)^5 mod p``."""
    x = (seed + k + 1) % P
    x2 = reduce(x * x)
    x4 = reduce(x2 * x2)
    return reduce(x4 * x)


def prg_vector(seed: int, length: int) -> np.ndarray:
    base = seed + 1
    return np.fromiter((pow((base + k) % P, 5, P) for k in range(length)),
                       dtype=np.uint64, count=length)


@dataclass(frozen=True)
class KeyPair:
    sk: int
    pk: int

    @classmethod
    def generate(cls, rng: random.Random) -> KeyPair:
        return cls.from_secret(random_field(rng, nonzero=True))

    @classmethod
    def from_secret(cls, sk: int) -> KeyPair:
        if sk % P == 0:
            raise InvalidKey("secret key must be nonzero")
        return cls(sk, pow(DH_G, sk, DH_P))


def validate_public_key(pk: int) -> None:
    if not 1 < pk < DH_P:
        raise InvalidKey(f"public key {pk} is the identity or outside the group")
    if pow(pk, DH_Q, DH_P) != 1:
        raise InvalidKey("public key is not in the prime-order subgroup")


def key_agree(sk: int, pk: int) -> int:
    """Shared seed ``pk^sk`` reduced into the field; symmetric in the two parties."""
    validate_public_key(pk)
    return pow(pk, sk, DH_P) % P


@dataclass(frozen=True)
class ShamirShare:
    index: int
    value: int


def eval_poly(coeffs: Sequence[int], x: int) -> int:
    acc = 0
    for c in reversed(coeffs):
        acc = (acc * x + c) % P
    return acc


def shamir_share(secret: int, t: int, recipients: Iterable[int], rng: random.Random | None = None,
                 coeffs: Sequence[int] | None = None) -> list[ShamirShare]:
    """Split ``secret`` into shares of a random degree ``t-1`` polynomial.

    ``coeffs`` fixes the non-constant coefficients (lowest degree first),
    which is only useful for tests; otherwise they are drawn from ``rng``.
    """
    recipients = list(recipients)
    if len(set(recipients)) != len(recipients) or any(r <= 0 for r in recipients):
        raise ShamirError("recipient indices must be distinct and positive")
    if t < 1 or t > len(recipients):
        raise ShamirError(f"threshold {t} invalid for {len(recipients)} recipients")
    if coeffs is None:
        if rng is None:
            raise ShamirError("need an rng or explicit coefficients")
        coeffs = [random_field(rng) for _ in range(t - 1)]
    elif len(coeffs) != t - 1:
        raise ShamirError("explicit coefficients must have length t-1")
    poly = [secret % P, *coeffs]
    return [ShamirShare(j, eval_poly(poly, j)) for j in recipients]


def lagrange_at_zero(xs: Sequence[int]) -> list[int]:
    weights = []
    for j, xj in enumerate(xs):
        num, den = 1, 1
        for m, xm in enumerate(xs):
            if m != j:
                num = mul(num, (-xm) % P)
                den = mul(den, (xj - xm) % P)
        weights.append(mul(num, inv(den)))
    return weights


def shamir_reconstruct(shares: Sequence[ShamirShare], t: int) -> int:
    """Interpolate the secret from the first ``t`` shares."""
    xs = [s.index for s in shares]
    if len(set(xs)) != len(xs):
        raise MalformedShares("duplicate share indices")
    if len(shares) < t:
        raise InsufficientShares(f"need {t} shares, got {len(shares)}")
    use = shares[:t]
    weights = lagrange_at_zero([s.index for s in use])
    acc = 0
    for w, s in zip(weights, use):
        acc = (acc + w * s.value) % P
    return acc


def default_threshold(k: int) -> int:
    """``floor(2k/3) + 1`` shares out of ``k`` recipients."""
    return (2 * k) // 3 + 1


def derive_seed(*parts: int) -> int:
    """Deterministic 64-bit seed from a tuple of non-negative ints."""
    state = np.random.SeedSequence(list(parts)).generate_state(2, np.uint32)
    return int(state[0]) | (int(state[1]) << 32)
