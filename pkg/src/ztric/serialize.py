"""JSON envelopes for keys and ciphertexts.

Envelope layout::

    {"version": 1, "group": "<name>", "kind": "mpk|msk|fk|ct", "l": <int>,
     "data": ["<base64>", ...]}

Each ``data`` item is base64 (standard alphabet, padded) of a 4-byte
big-endian length followed by the integer's minimal big-endian magnitude
bytes; zero encodes as length 0 with no body. Item order per kind:

* ``mpk``: h_1 .. h_l
* ``msk``: s_1 .. s_l
* ``ct``:  c0, c_1 .. c_l
* ``fk``:  sk_1 .. sk_n, plus ``"n": <int>`` and ``"w": [[signed ints]] * n``
  (weight columns are signed, so they travel as plain JSON integers).
"""
from __future__ import annotations

import base64
import json
import struct
from typing import Union

from .errors import ParameterError, ShapeError
from .groups import GroupParams, get_group
from .ipfe import Ciphertext, FunctionalKey, MasterPublicKey, MasterSecretKey

VERSION = 1

Envelope = dict


def int_to_bytes(value: int) -> bytes:
    """Length-prefixed minimal big-endian encoding of a non-negative integer."""
    if value < 0:
        raise ValueError("only non-negative integers are encoded")
    body = value.to_bytes((value.bit_length() + 7) // 8, "big")
    return struct.pack(">I", len(body)) + body


def int_from_bytes(blob: bytes) -> int:
    if len(blob) < 4:
        raise ParameterError("truncated integer encoding")
    (n,) = struct.unpack(">I", blob[:4])
    body = blob[4:]
    if len(body) != n:
        raise ParameterError(f"integer length prefix {n} != body length {len(body)}")
    if n and body[0] == 0:
        raise ParameterError("integer encoding is not minimal")
    return int.from_bytes(body, "big")


def _pack(values) -> list[str]:
    return [base64.b64encode(int_to_bytes(int(v))).decode("ascii") for v in values]


def _unpack(items) -> list[int]:
    return [int_from_bytes(base64.b64decode(s, validate=True)) for s in items]


def _envelope(kind: str, group: GroupParams, l: int, data: list[str], **extra) -> Envelope:
    env = {"version": VERSION, "group": group.name, "kind": kind, "l": l, "data": data}
    env.update(extra)
    return env


def dump_mpk(mpk: MasterPublicKey) -> Envelope:
    return _envelope("mpk", mpk.group, len(mpk.h), _pack(mpk.h))


def dump_msk(msk: MasterSecretKey) -> Envelope:
    return _envelope("msk", msk.group, len(msk.s), _pack(msk.s))


def dump_ciphertext(ct: Ciphertext, group: GroupParams) -> Envelope:
    return _envelope("ct", group, len(ct.c), _pack((ct.c0, *ct.c)))


def dump_functional_keys(keys: list[FunctionalKey], group: GroupParams) -> Envelope:
    if not keys:
        raise ShapeError("no functional keys to serialize")
    l = len(keys[0].w)
    if any(len(k.w) != l for k in keys):
        raise ShapeError("functional keys have mixed lengths")
    return _envelope(
        "fk", group, l, _pack(k.sk for k in keys), n=len(keys), w=[list(k.w) for k in keys]
    )


def load(env: Envelope) -> Union[MasterPublicKey, MasterSecretKey, list[FunctionalKey], Ciphertext]:
    """Parse any envelope; returns the object for its ``kind``."""
    if env.get("version") != VERSION:
        raise ParameterError(f"unsupported envelope version {env.get('version')!r}")
    group = get_group(env["group"])
    kind, l = env["kind"], int(env["l"])
    values = _unpack(env["data"])
    if kind == "mpk":
        _expect(len(values), l, kind)
        if not all(group.contains(h) for h in values):
            raise ParameterError("public key element outside the order-q subgroup")
        return MasterPublicKey(group, tuple(values))
    if kind == "msk":
        _expect(len(values), l, kind)
        return MasterSecretKey(group, tuple(values))
    if kind == "ct":
        _expect(len(values), l + 1, kind)
        if not all(0 < v < group.p for v in values):
            raise ParameterError("ciphertext component outside [1, p-1]")
        return Ciphertext(values[0], tuple(values[1:]))
    if kind == "fk":
        n = int(env["n"])
        columns = env["w"]
        _expect(len(values), n, kind)
        _expect(len(columns), n, "fk weight columns")
        keys = []
        for sk, w in zip(values, columns):
            _expect(len(w), l, "fk weight column")
            if not 0 <= sk < group.q:
                raise ParameterError("functional key outside [0, q-1]")
            keys.append(FunctionalKey(tuple(int(v) for v in w), sk))
        return keys
    raise ParameterError(f"unknown envelope kind {kind!r}")


def _expect(got: int, want: int, what: str) -> None:
    if got != want:
        raise ShapeError(f"{what}: expected {want} items, got {got}")


def dumps(env: Envelope) -> str:
    return json.dumps(env, separators=(",", ":"))


def loads(text: Union[str, bytes]):
    return load(json.loads(text))
