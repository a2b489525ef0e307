"""DDH-based inner-product functional encryption.

A master secret s in Z_q^l yields public elements h_j = g^{s_j}. A vector x
encrypts to (g^r, h_j^r * g^{x_j}); the functional key for a weight column
w is <w, s> mod q, and

    prod_j c_j^{w_j} / c0^{<w, s>} = g^{<x, w>}

from which <x, w> is recovered with a bounded discrete logarithm.

No constant-time hardening: exponentiation timing depends on secret
exponents.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Protocol, Sequence

import gmpy2
from gmpy2 import mpz

from .errors import DlogNotFoundError, ParameterError, RangeError, ShapeError
from .groups import GroupParams

PLAINTEXT_MAX = 255
WEIGHT_MAX = 127


class EntropySource(Protocol):
    """Anything with ``randrange``: ``secrets.SystemRandom()`` or a seeded ``random.Random``."""

    def randrange(self, start: int, stop: int) -> int: ...


@dataclass(frozen=True)
class MasterSecretKey:
    group: GroupParams
    s: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.s)


@dataclass(frozen=True)
class MasterPublicKey:
    group: GroupParams
    h: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.h)


@dataclass(frozen=True)
class FunctionalKey:
    w: tuple[int, ...]
    sk: int

    def __len__(self) -> int:
        return len(self.w)


@dataclass(frozen=True)
class Ciphertext:
    c0: int
    c: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.c)


@dataclass(frozen=True)
class DlogBound:
    lo: int
    hi: int

    def __post_init__(self):
        if not self.lo <= 0 <= self.hi:
            raise ParameterError(f"bound must satisfy lo <= 0 <= hi, got [{self.lo}, {self.hi}]")

    @property
    def width(self) -> int:
        return self.hi - self.lo + 1

    def __contains__(self, value: int) -> bool:
        return self.lo <= value <= self.hi

    @classmethod
    def default(cls, l: int) -> "DlogBound":
        """Worst case for x in [0, 255]^l against w in [-127, 127]^l."""
        edge = l * PLAINTEXT_MAX * WEIGHT_MAX
        return cls(-edge, edge)

    @classmethod
    def for_columns(cls, columns: Sequence[Sequence[int]], x_max: int = PLAINTEXT_MAX) -> "DlogBound":
        """Tightest bound covering every <x, w> with x in [0, x_max]^l and w among `columns`."""
        lo = hi = 0
        for w in columns:
            lo = min(lo, x_max * sum(v for v in w if v < 0))
            hi = max(hi, x_max * sum(v for v in w if v > 0))
        return cls(lo, hi)


def setup(params: GroupParams, l: int, rng: EntropySource) -> tuple[MasterPublicKey, MasterSecretKey]:
    if l < 1:
        raise ShapeError("vector length must be at least 1")
    params.validate()
    s = tuple(rng.randrange(1, params.q) for _ in range(l))
    return _public_from_secret(params, s), MasterSecretKey(params, s)


def setup_from_secret(params: GroupParams, s: Sequence[int]) -> tuple[MasterPublicKey, MasterSecretKey]:
    """Deterministic setup for a given secret vector (test vectors, key import)."""
    s = tuple(int(v) for v in s)
    if not s:
        raise ShapeError("vector length must be at least 1")
    if any(not 1 <= v < params.q for v in s):
        raise ParameterError("secret entries must lie in [1, q-1]")
    return _public_from_secret(params, s), MasterSecretKey(params, s)


def _public_from_secret(params: GroupParams, s: tuple[int, ...]) -> MasterPublicKey:
    g, p = mpz(params.g), mpz(params.p)
    return MasterPublicKey(params, tuple(int(gmpy2.powmod(g, v, p)) for v in s))


def _columns(W, l: int) -> list[tuple[int, ...]]:
    rows = [list(r) for r in W]
    if len(rows) != l:
        raise ShapeError(f"weight matrix has {len(rows)} rows, expected {l}")
    n = len(rows[0]) if rows else 0
    if n < 1 or any(len(r) != n for r in rows):
        raise ShapeError("weight matrix must be rectangular with at least one column")
    return [tuple(int(rows[j][i]) for j in range(l)) for i in range(n)]


def key_der(msk: MasterSecretKey, W) -> list[FunctionalKey]:
    """One functional key per column of the l x n matrix W."""
    q = msk.group.q
    return [
        FunctionalKey(w, sum(wj * sj for wj, sj in zip(w, msk.s)) % q)
        for w in _columns(W, len(msk.s))
    ]


def key_der_column(msk: MasterSecretKey, w: Sequence[int]) -> FunctionalKey:
    return key_der(msk, [[v] for v in w])[0]


def encrypt(mpk: MasterPublicKey, x: Sequence[int], rng: EntropySource) -> Ciphertext:
    return encrypt_with_r(mpk, x, rng.randrange(1, mpk.group.q))


def encrypt_with_r(mpk: MasterPublicKey, x: Sequence[int], r: int) -> Ciphertext:
    """Encryption with caller-fixed randomness ``r``; only for vectors and replay."""
    x = [int(v) for v in x]
    if len(x) != len(mpk.h):
        raise ShapeError(f"plaintext has length {len(x)}, key expects {len(mpk.h)}")
    for j, v in enumerate(x):
        if not 0 <= v <= PLAINTEXT_MAX:
            raise RangeError(f"x[{j}] = {v} outside [0, {PLAINTEXT_MAX}]")
    grp = mpk.group
    p, g = mpz(grp.p), mpz(grp.g)
    r = mpz(r)
    c0 = gmpy2.powmod(g, r, p)
    c = tuple(
        int(gmpy2.powmod(mpz(h), r, p) * gmpy2.powmod(g, v, p) % p)
        for h, v in zip(mpk.h, x)
    )
    return Ciphertext(int(c0), c)


def decrypt_group_element(ct: Ciphertext, fk: FunctionalKey, group: GroupParams) -> int:
    """g^<x, w> as a group element: prod c_j^{w_j} times c0^{-sk}."""
    if len(ct.c) != len(fk.w):
        raise ShapeError(f"ciphertext length {len(ct.c)} != key length {len(fk.w)}")
    p = mpz(group.p)
    num = mpz(1)
    den = mpz(1)
    for cj, wj in zip(ct.c, fk.w):
        if wj > 0:
            num = num * gmpy2.powmod(mpz(cj), wj, p) % p
        elif wj < 0:
            den = den * gmpy2.powmod(mpz(cj), -wj, p) % p
    # c0 lives in the order-q subgroup, so c0^{-sk} = c0^{q - sk}.
    mask = gmpy2.powmod(mpz(ct.c0), (group.q - fk.sk) % group.q, p)
    num = num * mask % p
    if den != 1:
        num = num * gmpy2.invert(den, p) % p
    return int(num)


def decrypt_inner_product(
    ct: Ciphertext,
    fk: FunctionalKey,
    bound: DlogBound,
    group: GroupParams,
    table: "BsgsTable | None" = None,
) -> int:
    """Recover <x, w> over the integers; raises DlogNotFoundError outside `bound`."""
    if table is None:
        table = BsgsTable(group, bound)
    elif table.bound != bound or table.group != group:
        raise ParameterError("precomputed table was built for a different group or bound")
    return table.solve(decrypt_group_element(ct, fk, group))


class BsgsTable:
    """Baby-step table for exponents of `base` in a signed window.

    Built once per (group, bound) and shared read-only across columns and
    calls. Giant steps fan out from exponent 0 in both directions, so small
    inner products resolve in few steps while the worst case stays
    O(sqrt(width)).
    """

    def __init__(self, group: GroupParams, bound: DlogBound, base: int | None = None,
                 baby_steps: int | None = None):
        if bound.width > group.q:
            raise ParameterError(
                f"bound width {bound.width} exceeds subgroup order; exponents would be ambiguous"
            )
        self.group = group
        self.bound = bound
        p = mpz(group.p)
        self._p = p
        self.base = mpz(group.g if base is None else base)
        m = min(baby_steps or math.isqrt(bound.width - 1) + 1, group.q)
        self.m = m
        self._baby: dict[mpz, int] = {}
        cur = mpz(1)
        for j in range(m):
            # First hit wins: keeps the smallest j if base has order < m.
            self._baby.setdefault(cur, j)
            cur = cur * self.base % p
        self._giant_up = gmpy2.invert(cur, p)  # base^{-m}
        self._giant_down = cur                  # base^{+m}

    def __len__(self) -> int:
        return len(self._baby)

    def solve(self, target: int) -> int:
        p, baby = self._p, self._baby
        lo, hi, m = self.bound.lo, self.bound.hi, self.m
        # up = target * base^{-i m}: a hit at j gives e = i m + j       (e >= 0)
        # down = target * base^{+k m}: a hit at j gives e = j - k m, k = i + 1 (e < 0)
        up = mpz(target) % p
        down = up * self._giant_down % p
        i = 0
        while True:
            k = i + 1
            up_live = i * m <= hi
            down_live = m - 1 - k * m >= lo
            if not (up_live or down_live):
                break
            if up_live:
                j = baby.get(up)
                if j is not None and i * m + j <= hi:
                    return i * m + j
                up = up * self._giant_up % p
            if down_live:
                j = baby.get(down)
                if j is not None and j - k * m >= lo:
                    return j - k * m
                down = down * self._giant_down % p
            i += 1
        raise DlogNotFoundError(f"no exponent in [{lo}, {hi}]")


def bsgs_dlog(base: int, target: int, bound: DlogBound, group: GroupParams) -> int:
    return BsgsTable(group, bound, base=base).solve(target)
