"""Named DDH groups: quadratic-residue subgroups of safe-prime fields.

Every group here has p = 2q + 1 with p, q prime and g generating the
order-q subgroup of quadratic residues mod p.
"""
from __future__ import annotations

import random
from dataclasses import dataclass

import gmpy2

from .errors import ParameterError

# Miller-Rabin rounds; error probability below 4**-32 = 2**-64.
PRIMALITY_ROUNDS = 32

_MODP_2048 = int(
    "FFFFFFFFFFFFFFFFC90FDAA22168C234C4C6628B80DC1CD129024E088A67CC74"
    "020BBEA63B139B22514A08798E3404DDEF9519B3CD3A431B302B0A6DF25F1437"
    "4FE1356D6D51C245E485B576625E7EC6F44C42E9A637ED6B0BFF5CB6F406B7ED"
    "EE386BFB5A899FA5AE9F24117C4B1FE649286651ECE45B3DC2007CB8A163BF05"
    "98DA48361C55D39A69163FA8FD24CF5F83655D23DCA3AD961C62F356208552BB"
    "9ED529077096966D670C354E4ABC9804F1746C08CA18217C32905E462E36CE3B"
    "E39E772C180E86039B2783A2EC07A28FB5C55DF06F4C52C9DE2BCBF695581718"
    "3995497CEA956AE515D2261898FA051015728E5A8AACAA68FFFFFFFFFFFFFFFF",
    16,
)

_MODP_3072 = int(
    "FFFFFFFFFFFFFFFFC90FDAA22168C234C4C6628B80DC1CD129024E088A67CC74"
    "020BBEA63B139B22514A08798E3404DDEF9519B3CD3A431B302B0A6DF25F1437"
    "4FE1356D6D51C245E485B576625E7EC6F44C42E9A637ED6B0BFF5CB6F406B7ED"
    "EE386BFB5A899FA5AE9F24117C4B1FE649286651ECE45B3DC2007CB8A163BF05"
    "98DA48361C55D39A69163FA8FD24CF5F83655D23DCA3AD961C62F356208552BB"
    "9ED529077096966D670C354E4ABC9804F1746C08CA18217C32905E462E36CE3B"
    "E39E772C180E86039B2783A2EC07A28FB5C55DF06F4C52C9DE2BCBF695581718"
    "3995497CEA956AE515D2261898FA051015728E5A8AAAC42DAD33170D04507A33"
    "A85521ABDF1CBA64ECFB850458DBEF0A8AEA71575D060C7DB3970F85A6E1E4C7"
    "ABF5AE8CDB0933D71E8C94E04A25619DCEE3D2261AD2EE6BF12FFA06D98A0864"
    "D87602733EC86A64521F2B18177B200CBBE117577A615D6C770988C0BAD946E2"
    "08E24FA074E5AB3143DB5BFCE0FD108E4B82D120A93AD2CAFFFFFFFFFFFFFFFF",
    16,
)

# Output of generate_safe_prime_group(160, seed=160); regenerated in tests.
_TEST_160_Q = 0xFB037BC6612055D5228444D93EC76FE3E75FF5DF


@dataclass(frozen=True)
class GroupParams:
    name: str
    p: int
    q: int
    g: int

    def validate(self) -> None:
        """Raise ParameterError unless p = 2q + 1, both prime, and g has order q."""
        p, q, g = self.p, self.q, self.g
        if p != 2 * q + 1:
            raise ParameterError(f"{self.name}: p != 2q + 1")
        if not gmpy2.is_prime(q, PRIMALITY_ROUNDS):
            raise ParameterError(f"{self.name}: q is not prime")
        if not gmpy2.is_prime(p, PRIMALITY_ROUNDS):
            raise ParameterError(f"{self.name}: p is not prime")
        if not 1 < g < p:
            raise ParameterError(f"{self.name}: generator out of range")
        if pow(g, q, p) != 1:
            raise ParameterError(f"{self.name}: g is not in the order-q subgroup")

    def contains(self, element: int) -> bool:
        """Subgroup membership: element in [1, p-1] and element^q == 1."""
        return 0 < element < self.p and gmpy2.powmod(element, self.q, self.p) == 1

    @property
    def bits(self) -> int:
        return self.p.bit_length()


def generate_safe_prime_group(bits: int, seed: int, name: str | None = None) -> GroupParams:
    """Deterministically search for a safe prime whose subgroup order q has `bits` bits."""
    if bits < 3:
        raise ParameterError("need at least 3 bits for q")
    rng = random.Random(seed)
    while True:
        q = rng.getrandbits(bits) | (1 << (bits - 1)) | 1
        if gmpy2.is_prime(q, PRIMALITY_ROUNDS) and gmpy2.is_prime(2 * q + 1, PRIMALITY_ROUNDS):
            break
    # 4 = 2^2 is always a quadratic residue, and any QR other than 1 has order q.
    return GroupParams(name or f"gen-{bits}-{seed}", 2 * q + 1, q, 4)


_REGISTRY: dict[str, GroupParams] = {
    "toy-p23": GroupParams("toy-p23", 23, 11, 4),
    "test-160": GroupParams("test-160", 2 * _TEST_160_Q + 1, _TEST_160_Q, 4),
    "modp2048": GroupParams("modp2048", _MODP_2048, (_MODP_2048 - 1) // 2, 2),
    "modp3072": GroupParams("modp3072", _MODP_3072, (_MODP_3072 - 1) // 2, 2),
}


def get_group(name: str) -> GroupParams:
    try:
        return _REGISTRY[name]
    except KeyError:
        raise ParameterError(
            f"unknown group {name!r}; known: {', '.join(sorted(_REGISTRY))}"
        ) from None


def register_group(params: GroupParams) -> None:
    params.validate()
    _REGISTRY[params.name] = params


def group_names() -> list[str]:
    return sorted(_REGISTRY)
