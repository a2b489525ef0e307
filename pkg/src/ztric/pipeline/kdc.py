"""Key distribution centre: validates the first layer, then issues keys.

The master secret key is created and held here; only the public key
(for the encryptor) and functional keys plus the layer >= 2 model (for
the xApp) are ever handed out.
"""
from __future__ import annotations

import hashlib
import logging
import secrets
import socket
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import IssuanceRefused, ModelFormatError
from ..groups import GroupParams, get_group
from ..ipfe import EntropySource, FunctionalKey, MasterPublicKey, key_der, setup
from ..quantizer import QuantizedModel, load_model
from ..secure_inference import XAppModel
from ..serialize import dump_functional_keys, dump_mpk, dumps
from ..validator import IssuanceReport, validate_for_issuance
from .frames import E2Frame, MsgType, read_frame, write_frame

logger = logging.getLogger(__name__)

ROLE_ENCRYPTOR = "encryptor"
ROLE_XAPP = "xapp"


def fingerprint(envelope: dict) -> str:
    return hashlib.sha256(dumps(envelope).encode()).hexdigest()[:16]


@dataclass
class Issuance:
    """What the KDC hands out. Deliberately has no master secret field."""

    group: GroupParams
    mpk: MasterPublicKey
    keys: list[FunctionalKey]
    report: IssuanceReport
    encryptor_bundle: dict = field(repr=False)
    xapp_bundle: dict = field(repr=False)
    fingerprints: dict = field(default_factory=dict)

    def bundle_for(self, role: str) -> dict:
        if role == ROLE_ENCRYPTOR:
            return self.encryptor_bundle
        if role == ROLE_XAPP:
            return self.xapp_bundle
        raise ValueError(f"unknown role {role!r}")


def _as_quantized(model) -> QuantizedModel:
    if isinstance(model, QuantizedModel):
        return model
    _, qm = load_model(Path(model))
    if qm is None:
        raise ModelFormatError(f"{model}: no quantized weights; run quantize first")
    return qm


def kdc_issue(model, group_name: str, rng: EntropySource | None = None) -> Issuance:
    """Validate the model's first layer and derive one functional key per hidden neuron.

    `model` is a QuantizedModel or a path to a model file. Raises
    IssuanceRefused (carrying the validator report) when a check fails.
    """
    qm = _as_quantized(model)
    w1 = np.asarray(qm.q_weights[0])
    report = validate_for_issuance(w1)
    if not report.passed:
        logger.warning("issuance refused: %s", report.summary())
        raise IssuanceRefused(report)
    group = get_group(group_name)
    mpk, msk = setup(group, w1.shape[0], rng or secrets.SystemRandom())
    keys = key_der(msk, w1)
    del msk  # the only reference; nothing below may capture it
    mpk_env = dump_mpk(mpk)
    fk_env = dump_functional_keys(keys, group)
    xmodel = XAppModel.from_quantized(qm).to_dict()
    fps = {"mpk": fingerprint(mpk_env), "fk": fingerprint(fk_env)}
    logger.info("issued %d functional keys for l=%d on %s (mpk %s, fk %s)",
                len(keys), w1.shape[0], group.name, fps["mpk"], fps["fk"])
    return Issuance(
        group, mpk, keys, report,
        encryptor_bundle={"role": ROLE_ENCRYPTOR, "mpk": mpk_env,
                          "input_quant": qm.input_qp.to_dict(), "dims": list(qm.dims)},
        xapp_bundle={"role": ROLE_XAPP, "fk": fk_env, "model": xmodel},
        fingerprints=fps,
    )


def serve_issuance(issuance: Issuance, listener: socket.socket, requests: int = 2) -> list[str]:
    """Answer KEY_ISSUE requests ({"role": ...}) on accepted connections.

    Returns the roles served, in order. Each connection gets only the
    bundle for the role it asked for.
    """
    served = []
    for _ in range(requests):
        conn, _ = listener.accept()
        with conn:
            req = read_frame(conn)
            if req is None or req.msg_type != MsgType.KEY_ISSUE:
                logger.warning("ignoring non key-issue request")
                continue
            role = req.json().get("role")
            try:
                bundle = issuance.bundle_for(role)
            except ValueError:
                write_frame(conn, E2Frame.from_json(MsgType.ACK, req.correlation_id,
                                                    {"status": "refused", "error": f"unknown role {role!r}"}))
                continue
            write_frame(conn, E2Frame.from_json(MsgType.KEY_ISSUE, req.correlation_id, bundle))
            served.append(role)
    return served


def request_bundle(address: tuple[str, int], role: str, timeout: float = 60.0) -> dict:
    with socket.create_connection(address, timeout=timeout) as conn:
        write_frame(conn, E2Frame.from_json(MsgType.KEY_ISSUE, 0, {"role": role}))
        reply = read_frame(conn)
    if reply is None or reply.msg_type != MsgType.KEY_ISSUE:
        raise ConnectionError(f"KDC did not issue keys for role {role!r}")
    return reply.json()
