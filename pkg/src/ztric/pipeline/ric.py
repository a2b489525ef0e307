"""Near-RT RIC side: E2 termination, database, and the encrypted-inference xApp."""
from __future__ import annotations

import logging
import selectors
import socket
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

from ..errors import ZtricError
from ..groups import get_group
from ..ipfe import Ciphertext
from ..secure_inference import EncryptedInferenceContext, XAppModel
from ..serialize import load, loads
from .database import Cursor, Record, RicDatabase
from .frames import E2Frame, FrameError, MsgType, read_frame, write_frame

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ControlDecision:
    window_id: int
    jammer_present: bool
    issued_at: float  # wall clock, for logs only

    def to_dict(self) -> dict:
        return asdict(self)


def context_from_bundle(bundle: dict) -> EncryptedInferenceContext:
    keys = load(bundle["fk"])
    model = XAppModel.from_dict(bundle["model"])
    return EncryptedInferenceContext(model, keys, get_group(bundle["fk"]["group"]))


@dataclass
class XAppStats:
    decisions: list = field(default_factory=list)
    alarms: int = 0
    errors: list = field(default_factory=list)  # (window_id, message)


class XAppWorker:
    """Polls the database, evaluates each ciphertext, emits CONTROL or a drop ACK."""

    def __init__(self, ctx: EncryptedInferenceContext, send: Callable[[E2Frame], None]):
        self.ctx = ctx
        self.send = send
        self.stats = XAppStats()

    def handle(self, rec: Record) -> ControlDecision | None:
        try:
            ct = loads(rec.payload)
            if not isinstance(ct, Ciphertext):
                raise FrameError(f"record {rec.window_id} is not a ciphertext")
            eval_start = time.monotonic_ns()
            result = self.ctx.evaluate(ct)
            eval_end = time.monotonic_ns()
        except (ZtricError, ValueError, KeyError) as exc:
            # a too-small bound means tampering or corruption: report and drop, never widen
            self.stats.alarms += 1
            self.stats.errors.append((rec.window_id, str(exc)))
            logger.warning("window %d withheld: %s", rec.window_id, exc)
            self.send(E2Frame.from_json(MsgType.ACK, rec.window_id,
                                        {"window_id": rec.window_id, "status": "dropped", "error": str(exc)}))
            return None
        decision = ControlDecision(rec.window_id, result.jammer_present, time.time())
        self.stats.decisions.append(decision)
        self.send(E2Frame.from_json(MsgType.CONTROL, rec.window_id, {
            **decision.to_dict(), "class": result.cls,
            "rx_ns": rec.timestamp_ns, "eval_start_ns": eval_start, "eval_end_ns": eval_end,
        }))
        return decision

    def run(self, cursor: Cursor, stop: threading.Event | None = None, poll: float = 0.05,
            crash_after: int | None = None) -> XAppStats:
        """Until the database is closed and drained (or `stop` is set)."""
        handled = 0
        while stop is None or not stop.is_set():
            rec = cursor.poll(timeout=poll)
            if rec is None:
                if cursor.db.closed and cursor.position >= len(cursor.db):
                    break
                continue
            if crash_after is not None and handled >= crash_after:
                raise RuntimeError(f"injected xApp crash after {handled} windows")
            self.handle(rec)
            handled += 1
        return self.stats


def xapp_loop(cursor: Cursor, ctx: EncryptedInferenceContext, send: Callable[[E2Frame], None],
              stop: threading.Event | None = None) -> XAppStats:
    return XAppWorker(ctx, send).run(cursor, stop)


def snoop(db: RicDatabase, patterns: list[bytes] = ()) -> dict:
    """What a malicious database reader gets: counts records by what they parse as
    and checks none contains any of the given plaintext byte patterns."""
    kinds: dict[str, int] = {}
    for rec in db.records():
        try:
            kind = type(loads(rec.payload)).__name__
        except Exception:  # noqa: BLE001 - anything unparseable is just opaque bytes
            kind = "opaque"
        kinds[kind] = kinds.get(kind, 0) + 1
    blob = db.stored_bytes()
    leaked = [p.hex() for p in patterns if p and p in blob]
    return {"records": len(db), "kinds": kinds, "leaked_patterns": leaked}


class RicNode:
    """E2 termination + database + xApp thread for one RAN connection."""

    def __init__(self, xapp_bundle: dict, db_log_path: str | Path | None = None,
                 capture_path: str | Path | None = None):
        self.ctx = context_from_bundle(xapp_bundle)
        self.db = RicDatabase(db_log_path)
        self.capture_path = capture_path
        self.received: list[dict] = []  # audit: type and payload kind of each inbound frame
        self._send_lock = threading.Lock()

    def serve_connection(self, conn: socket.socket, stop: threading.Event | None = None,
                         crash_after: int | None = None) -> XAppStats:
        def send(frame: E2Frame) -> None:
            with self._send_lock:
                try:
                    write_frame(conn, frame)
                except OSError as exc:
                    logger.warning("control return failed: %s", exc)

        worker = XAppWorker(self.ctx, send)
        failure: list[BaseException] = []

        def run_worker():
            try:
                worker.run(self.db.cursor("xapp"), stop, crash_after=crash_after)
            except BaseException as exc:  # noqa: BLE001 - surfaced to the caller below
                failure.append(exc)
                try:
                    conn.shutdown(socket.SHUT_RDWR)
                except OSError:
                    pass

        thread = threading.Thread(target=run_worker, name="xapp", daemon=True)
        thread.start()
        capture = open(self.capture_path, "ab") if self.capture_path else None
        sel = selectors.DefaultSelector()
        sel.register(conn, selectors.EVENT_READ)
        try:
            while (stop is None or not stop.is_set()) and not failure:
                if not sel.select(timeout=0.2):
                    continue
                try:
                    frame = read_frame(conn)
                except (FrameError, OSError) as exc:
                    logger.warning("E2 stream closed: %s", exc)
                    break
                if frame is None:
                    break
                self.received.append({"type": frame.msg_type.name, "bytes": len(frame.payload)})
                if capture:
                    capture.write(frame.encode())
                if frame.msg_type == MsgType.ENC_KPM:
                    self.db.append(frame.correlation_id, frame.payload)
                else:
                    logger.info("ignoring %s frame on the E2 stream", frame.msg_type.name)
        finally:
            sel.close()
            if capture:
                capture.close()
            self.db.close()
            thread.join()
        if failure:
            raise failure[0]
        return worker.stats
