"""Scenario runner: KDC, RAN encryptor and RIC as separate components.

Components talk only through frames over loopback TCP. In "thread" mode
they are threads of this process; in "process" mode each is a spawned OS
process, so key isolation is a real address-space boundary.
"""
from __future__ import annotations

import base64
import json
import logging
import multiprocessing as mp
import os
import queue
import socket
import tempfile
import threading
import time
import traceback
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from ..canonical import reference
from ..errors import ShapeError
from ..model_lab import SynthConfig, generate_dataset, import_dataset
from ..quantizer import load_model, quantize_array, quantized_forward_batch, save_model
from .encryptor import Encryptor, EncryptorStats, encryptor_loop
from .frames import MsgType, read_frame, write_frame
from .kdc import ROLE_ENCRYPTOR, ROLE_XAPP, kdc_issue, request_bundle, serve_issuance
from .ric import RicNode, snoop
from .timing import SummaryRow, TimingRecord, summarize

logger = logging.getLogger(__name__)

LOOPBACK = "127.0.0.1"
SENTINEL = bytes.fromhex("deadbeef")


@dataclass
class ScenarioConfig:
    group: str = "modp2048"
    model_path: str | None = None   # None: seeded reference model for t
    t: int = 10
    windows: int | None = None      # None: duration * window_rate, else 100
    window_rate: float = 0.0        # windows per second; 0 sends back-to-back
    duration: float | None = None
    seed: int = 42
    mode: str = "thread"            # "thread" | "process"
    data_path: str | None = None    # CSV of KPM windows instead of synthetic ones
    corrupt_windows: list[int] = field(default_factory=list)
    sentinel_windows: list[int] = field(default_factory=list)
    capture_path: str | None = None  # raw inbound E2 frames at the RIC
    db_log_path: str | None = None
    snoop: bool = False
    crash_xapp_after: int | None = None
    hard_crash: bool = False         # process mode: the RIC process exits abruptly
    timeout: float = 600.0

    def __post_init__(self):
        if self.mode not in ("thread", "process"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.window_rate < 0:
            raise ValueError("window_rate must be non-negative")

    @property
    def window_count(self) -> int:
        if self.windows is not None:
            return self.windows
        if self.duration is not None and self.window_rate > 0:
            return int(round(self.duration * self.window_rate))
        return 100

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown scenario keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "ScenarioConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PipelineResult:
    config: ScenarioConfig
    records: list[TimingRecord]
    decisions: dict            # window_id -> jammer_present
    expected: dict             # window_id -> offline plaintext-path class
    dropped: list              # windows the encryptor failed on
    withheld: dict             # window_id -> xApp error (drop ACKs)
    alarms: int
    audit: dict
    isolation_violations: list
    snoop: dict | None
    summary: SummaryRow
    partial: bool
    errors: dict               # component -> error text
    fingerprints: dict = field(default_factory=dict)

    @property
    def mismatches(self) -> list[int]:
        return [wid for wid, jam in self.decisions.items() if int(jam) != self.expected.get(wid)]

    @property
    def decisions_match_oracle(self) -> bool:
        return not self.mismatches and len(self.decisions) + len(self.withheld) + len(self.dropped) == len(self.expected)


# -- audit ------------------------------------------------------------------------

FORBIDDEN = {
    ROLE_ENCRYPTOR: {"kinds": {"fk", "msk"}, "keys": {"fk", "msk", "model", "q_weights", "float_weights"}},
    ROLE_XAPP: {"kinds": {"msk"}, "keys": {"msk", "q_weights", "float_weights", "first_weights"}},
}


def describe_payload(obj) -> dict:
    """Every dict key and envelope kind reachable in a JSON payload."""
    keys, kinds = set(), set()
    stack = [obj]
    while stack:
        cur = stack.pop()
        if isinstance(cur, dict):
            keys.update(cur)
            if isinstance(cur.get("kind"), str):
                kinds.add(cur["kind"])
            stack.extend(cur.values())
        elif isinstance(cur, list) and cur and isinstance(cur[0], (dict, list)):
            stack.extend(cur)
    return {"keys": sorted(keys), "kinds": sorted(kinds)}


def check_key_isolation(audit: dict) -> list[str]:
    violations = []
    for role, rules in FORBIDDEN.items():
        for entry in audit.get(role, []):
            bad_kinds = rules["kinds"] & set(entry["kinds"])
            bad_keys = rules["keys"] & set(entry["keys"])
            if bad_kinds or bad_keys:
                violations.append(f"{role} received {entry['type']} carrying "
                                  f"{sorted(bad_kinds | bad_keys)}")
    return violations


def sentinel_vector(l: int) -> np.ndarray:
    reps = -(-l // len(SENTINEL))
    return np.frombuffer(SENTINEL * reps, dtype=np.uint8)[:l].astype(np.int64)


def sentinel_patterns(xq) -> list[bytes]:
    """Encodings a plaintext leak of `xq` could take on the wire or at rest."""
    raw = bytes(int(v) for v in xq)
    return [raw, base64.b64encode(raw), ",".join(str(int(v)) for v in xq).encode(),
            json.dumps([int(v) for v in xq]).encode()]


# -- components ---------------------------------------------------------------------

def _emit(events, kind, name, value):
    events.put((kind, name, value))


def _run_component(name, events, stop, fn, *args):
    try:
        _emit(events, "result", name, {"ok": True, **fn(events, stop, *args)})
    except BaseException as exc:  # noqa: BLE001 - reported to the harness
        logger.error("%s failed: %s", name, exc)
        _emit(events, "result", name, {"ok": False, "error": f"{type(exc).__name__}: {exc}",
                                       "traceback": traceback.format_exc()})


def _listen() -> socket.socket:
    srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    srv.bind((LOOPBACK, 0))
    srv.listen(4)
    return srv


def _accept(srv: socket.socket, stop) -> socket.socket:
    srv.settimeout(0.2)
    while not stop.is_set():
        try:
            conn, _ = srv.accept()
            conn.settimeout(None)
            return conn
        except socket.timeout:
            continue
    raise RuntimeError("stopped before a peer connected")


def kdc_component(events, stop, model_path: str, group: str) -> dict:
    issuance = kdc_issue(model_path, group)
    with _listen() as srv:
        _emit(events, "ready", "kdc", srv.getsockname()[1])
        srv.settimeout(None)
        served = serve_issuance(issuance, srv, requests=2)
    return {"served": served, "fingerprints": issuance.fingerprints,
            "report": issuance.report.to_dict(), "n_keys": len(issuance.keys)}


def ric_component(events, stop, kdc_port: int, opts: dict) -> dict:
    bundle = request_bundle((LOOPBACK, kdc_port), ROLE_XAPP)
    audit = [{"type": "KEY_ISSUE", **describe_payload(bundle)}]
    node = RicNode(bundle, opts.get("db_log_path"), opts.get("capture_path"))
    with _listen() as srv:
        _emit(events, "ready", "ric", srv.getsockname()[1])
        conn = _accept(srv, stop)
    with conn:
        try:
            stats = node.serve_connection(conn, stop, crash_after=opts.get("crash_xapp_after"))
        except RuntimeError:
            if opts.get("hard_crash"):
                os._exit(13)
            raise
    kinds_seen = sorted({e["type"] for e in node.received})
    audit.append({"type": "ENC_KPM", "keys": ["c0", "c"], "kinds": ["ct"]} if "ENC_KPM" in kinds_seen
                 else {"type": "none", "keys": [], "kinds": []})
    report = snoop(node.db, opts.get("patterns", [])) if opts.get("snoop") else None
    return {"alarms": stats.alarms, "errors": stats.errors, "decisions": len(stats.decisions),
            "db_records": len(node.db), "audit": audit, "snoop": report}


def ran_component(events, stop, kdc_port: int, ric_port: int, windows: list, opts: dict) -> dict:
    bundle = request_bundle((LOOPBACK, kdc_port), ROLE_ENCRYPTOR)
    audit = [{"type": "KEY_ISSUE", **describe_payload(bundle)}]
    enc = Encryptor(bundle)
    if windows and len(np.asarray(windows[0][1]).reshape(-1)) != enc.length:
        raise ValueError(f"window length {len(windows[0][1])} != public key length {enc.length}")
    responses: dict[int, tuple[dict, int]] = {}
    withheld: dict[int, str] = {}
    answered = threading.Condition()
    done = threading.Event()
    inbound = set()

    conn = socket.create_connection((LOOPBACK, ric_port))

    def receive():
        try:
            while True:
                frame = read_frame(conn)
                if frame is None:
                    break
                now = time.monotonic_ns()
                inbound.add(frame.msg_type.name)
                body = frame.json()
                with answered:
                    if frame.msg_type == MsgType.CONTROL:
                        responses[frame.correlation_id] = (body, now)
                    elif frame.msg_type == MsgType.ACK:
                        withheld[frame.correlation_id] = body.get("error", "")
                    answered.notify_all()
        except OSError as exc:
            logger.info("RAN receive ended: %s", exc)
        finally:
            done.set()
            with answered:
                answered.notify_all()

    rx = threading.Thread(target=receive, name="ran-rx", daemon=True)
    rx.start()
    send_lock = threading.Lock()

    def send(frame):
        with send_lock:
            write_frame(conn, frame)

    stats = EncryptorStats()
    try:
        encryptor_loop(windows, enc, send, opts.get("rate", 0.0),
                       frozenset(opts.get("corrupt", ())), stop, stats)
    except OSError as exc:
        logger.warning("E2 link lost while sending: %s", exc)
    sent = set(stats.stamps)
    deadline = time.monotonic() + opts.get("timeout", 600.0)
    with answered:
        answered.wait_for(lambda: sent <= set(responses) | set(withheld) or done.is_set()
                          or stop.is_set() or time.monotonic() > deadline, timeout=opts.get("timeout", 600.0))
    try:
        conn.shutdown(socket.SHUT_WR)
    except OSError:
        pass
    rx.join(timeout=10)
    conn.close()

    records = []
    decisions = {}
    for wid, (body, ctrl_rx) in sorted(responses.items()):
        start, enc_done = stats.stamps[wid]
        rec = TimingRecord.from_stamps(wid, start, enc_done, body["rx_ns"], body["eval_start_ns"],
                                       body["eval_end_ns"], ctrl_rx)
        records.append(rec.to_dict())
        decisions[wid] = bool(body["jammer_present"])
    for name in sorted(inbound):
        audit.append({"type": name, "keys": [], "kinds": []})
    missing = sorted(sent - set(responses) - set(withheld))
    return {"records": records, "decisions": decisions, "withheld": withheld,
            "dropped": stats.dropped, "missing": missing, "audit": audit}


# -- orchestration -------------------------------------------------------------------

class _Runner:
    def __init__(self, mode: str):
        self.mode = mode
        if mode == "process":
            self.ctx = mp.get_context("spawn")
            self.events = self.ctx.Queue()
            self.stop = self.ctx.Event()
        else:
            self.events = queue.Queue()
            self.stop = threading.Event()
        self.handles: dict[str, object] = {}

    def start(self, name, fn, *args):
        target_args = (name, self.events, self.stop, fn, *args)
        if self.mode == "process":
            h = self.ctx.Process(target=_run_component, args=target_args, name=name, daemon=True)
        else:
            h = threading.Thread(target=_run_component, args=target_args, name=name, daemon=True)
        h.start()
        self.handles[name] = h

    def dead_without_result(self, results) -> list[str]:
        return [n for n, h in self.handles.items() if not h.is_alive() and n not in results]

    def shutdown(self, grace: float = 5.0):
        self.stop.set()
        for h in self.handles.values():
            h.join(timeout=grace)
            if self.mode == "process" and h.is_alive():
                h.terminate()
                h.join(timeout=grace)


def _wait(runner: _Runner, results: dict, ready: dict, until, deadline: float, grace: float = 15.0):
    """Collect events until `until()` holds. After any component fails, stop
    everyone and keep collecting for `grace` seconds so survivors can report."""
    grace_end = None
    while time.monotonic() < deadline:
        if until():
            return
        if grace_end is not None and (all(n in results for n in runner.handles)
                                      or time.monotonic() > grace_end):
            return
        try:
            kind, name, value = runner.events.get(timeout=0.2)
            (ready if kind == "ready" else results)[name] = value
        except queue.Empty:
            for name in runner.dead_without_result(results):
                code = getattr(runner.handles[name], "exitcode", None)
                results[name] = {"ok": False, "error": f"{name} exited (code {code}) without a result"}
        if grace_end is None and any(not r.get("ok") for r in results.values()):
            runner.stop.set()
            grace_end = time.monotonic() + grace


def _prepare_windows(cfg: ScenarioConfig, qm) -> tuple[list, dict, list[bytes]]:
    if cfg.data_path:
        data = import_dataset(cfg.data_path)
        X = data.X[: cfg.window_count] if cfg.windows is not None else data.X
    else:
        X = generate_dataset(SynthConfig(seed=cfg.seed, t=cfg.t), cfg.window_count).X
    X = np.array(X, dtype=np.float64)
    if X.shape[1] != qm.dims[0]:
        raise ShapeError(f"windows have {X.shape[1]} features but the model expects {qm.dims[0]}")
    patterns = []
    if cfg.sentinel_windows:
        sv = sentinel_vector(X.shape[1])
        for wid in cfg.sentinel_windows:
            X[wid] = sv * qm.input_qp.scale
        xq, _ = quantize_array(X[cfg.sentinel_windows[0]], qm.input_qp)
        assert np.array_equal(xq, sv), "sentinel must survive quantization unchanged"
        patterns = sentinel_patterns(sv)
    Xq, _ = quantize_array(X, qm.input_qp)
    _, classes, _ = quantized_forward_batch(qm, Xq)
    windows = [(i, X[i]) for i in range(len(X))]
    expected = {i: int(c) for i, c in enumerate(classes)}
    return windows, expected, patterns


def run_pipeline(cfg: ScenarioConfig) -> PipelineResult:
    with tempfile.TemporaryDirectory(prefix="ztric-") as tmp:
        model_path = cfg.model_path
        if model_path is None:
            model_path = str(Path(tmp) / f"reference-t{cfg.t}.json")
            save_model(model_path, reference(cfg.t, cfg.seed).quantized)
        _, qm = load_model(model_path)
        windows, expected, patterns = _prepare_windows(cfg, qm)

        runner = _Runner(cfg.mode)
        results: dict = {}
        ready: dict = {}
        deadline = time.monotonic() + cfg.timeout
        ric_opts = {"db_log_path": cfg.db_log_path, "capture_path": cfg.capture_path,
                    "snoop": cfg.snoop, "patterns": patterns, "crash_xapp_after": cfg.crash_xapp_after,
                    "hard_crash": cfg.hard_crash and cfg.mode == "process"}
        ran_opts = {"rate": cfg.window_rate, "corrupt": list(cfg.corrupt_windows), "timeout": cfg.timeout}
        try:
            runner.start("kdc", kdc_component, model_path, cfg.group)
            _wait(runner, results, ready, lambda: "kdc" in ready, deadline)
            if "kdc" in ready:
                runner.start("ric", ric_component, ready["kdc"], ric_opts)
                _wait(runner, results, ready, lambda: "ric" in ready, deadline)
            if "ric" in ready:
                runner.start("ran", ran_component, ready["kdc"], ready["ric"], windows, ran_opts)
            _wait(runner, results, ready,
                  lambda: all(n in results for n in runner.handles), deadline)
        finally:
            runner.shutdown()
            if cfg.mode == "process":
                runner.events.close()
                runner.events.join_thread()

    return _assemble(cfg, qm, expected, results, runner)


def _assemble(cfg, qm, expected, results, runner) -> PipelineResult:
    errors = {n: r["error"] for n, r in results.items() if not r.get("ok")}
    for name in runner.handles:
        if name not in results:
            errors[name] = "no result before shutdown"
    for name in ("kdc", "ric", "ran"):
        if name not in runner.handles:
            errors.setdefault(name, "not started")
    ran = results.get("ran", {}) if results.get("ran", {}).get("ok") else {}
    ric = results.get("ric", {}) if results.get("ric", {}).get("ok") else {}
    kdc = results.get("kdc", {}) if results.get("kdc", {}).get("ok") else {}
    records = [TimingRecord(**r) for r in ran.get("records", [])]
    decisions = {int(k): v for k, v in ran.get("decisions", {}).items()}
    withheld = {int(k): v for k, v in ran.get("withheld", {}).items()}
    audit = {ROLE_ENCRYPTOR: ran.get("audit", []), ROLE_XAPP: ric.get("audit", [])}
    dropped = list(ran.get("dropped", []))
    partial = bool(errors) or bool(ran.get("missing")) or (
        len(decisions) + len(withheld) + len(dropped) < len(expected))
    summary = summarize(records, t=cfg.t, l=qm.dims[0], n=qm.dims[1], group=cfg.group,
                        dropped=len(dropped) + len(withheld))
    return PipelineResult(
        config=cfg, records=records, decisions=decisions, expected=expected, dropped=dropped,
        withheld=withheld, alarms=ric.get("alarms", len(withheld)), audit=audit,
        isolation_violations=check_key_isolation(audit), snoop=ric.get("snoop"),
        summary=summary, partial=partial, errors=errors, fingerprints=kdc.get("fingerprints", {}),
    )
