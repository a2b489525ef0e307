"""RAN-side encryptor: quantize each KPM window, encrypt, forward, forget."""
from __future__ import annotations

import logging
import secrets
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from ..errors import ParameterError, ZtricError
from ..ipfe import Ciphertext, EntropySource, MasterPublicKey, encrypt
from ..quantizer import QuantParams, quantize_array
from ..serialize import dump_ciphertext, dumps, load
from .frames import E2Frame, MsgType

logger = logging.getLogger(__name__)


class Encryptor:
    """Holds only the master public key and input quantization."""

    def __init__(self, bundle: dict, rng: EntropySource | None = None):
        mpk = load(bundle["mpk"])  # checks every h_j is in the subgroup
        if not isinstance(mpk, MasterPublicKey):
            raise ParameterError("encryptor bundle does not carry a public key")
        self.mpk = mpk
        self.input_qp = QuantParams.from_dict(bundle["input_quant"])
        self.rng = rng or secrets.SystemRandom()

    @property
    def length(self) -> int:
        return len(self.mpk.h)

    def encrypt_window(self, window) -> Ciphertext:
        flat = np.asarray(window, dtype=np.float64).reshape(-1)
        xq, _ = quantize_array(flat, self.input_qp)
        return encrypt(self.mpk, xq.tolist(), self.rng)

    def frame(self, window_id: int, ct: Ciphertext) -> E2Frame:
        return E2Frame(MsgType.ENC_KPM, window_id, dumps(dump_ciphertext(ct, self.mpk.group)).encode())


def tamper(ct: Ciphertext, group) -> Ciphertext:
    """Fault injection: multiply c0 by g, which offsets every column's exponent by -sk_i."""
    return Ciphertext(ct.c0 * group.g % group.p, ct.c)


@dataclass
class EncryptorStats:
    sent: int = 0
    dropped: list = field(default_factory=list)
    stamps: dict = field(default_factory=dict)  # window_id -> (start_ns, enc_done_ns)


def encryptor_loop(windows: Iterable[tuple[int, np.ndarray]], enc: Encryptor,
                   send: Callable[[E2Frame], None], rate: float = 0.0,
                   corrupt: frozenset = frozenset(), stop=None,
                   stats: EncryptorStats | None = None) -> EncryptorStats:
    """Encrypt and send each (window_id, window); `rate` in windows per second, 0 for back-to-back.

    Pass `stats` to keep what was recorded if `send` raises part-way.
    """
    stats = EncryptorStats() if stats is None else stats
    period_ns = int(1e9 / rate) if rate > 0 else 0
    next_at = time.monotonic_ns()
    for wid, window in windows:
        if stop is not None and stop.is_set():
            break
        if period_ns:
            delay = next_at - time.monotonic_ns()
            if delay > 0:
                time.sleep(delay / 1e9)
            next_at += period_ns
        start = time.monotonic_ns()
        try:
            ct = enc.encrypt_window(window)
        except (ZtricError, ValueError) as exc:
            logger.warning("window %d dropped: %s", wid, exc)
            stats.dropped.append(wid)
            continue
        done = time.monotonic_ns()
        del window  # the raw window is not kept past encryption
        if wid in corrupt:
            ct = tamper(ct, enc.mpk.group)
        frame = enc.frame(wid, ct)
        stats.stamps[wid] = (start, done)
        send(frame)
        stats.sent += 1
    return stats
