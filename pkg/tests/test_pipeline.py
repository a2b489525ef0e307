import json
import random
import socket
import struct
import threading
import time

import numpy as np
import pytest

from ztric.errors import FrameError, IssuanceRefused, ModelFormatError
from ztric.model_lab import SynthConfig, export_dataset, generate_dataset
from ztric.pipeline.database import RicDatabase, read_log
from ztric.pipeline.encryptor import Encryptor, encryptor_loop
from ztric.pipeline.frames import (
    HEADER_SIZE,
    E2Frame,
    MsgType,
    decode,
    read_frame,
    write_frame,
)
from ztric.pipeline.harness import (
    ScenarioConfig,
    check_key_isolation,
    describe_payload,
    run_pipeline,
    sentinel_patterns,
    sentinel_vector,
)
from ztric.pipeline.kdc import ROLE_ENCRYPTOR, ROLE_XAPP, Issuance, kdc_issue, request_bundle, serve_issuance
from ztric.pipeline.ric import RicNode, snoop, xapp_loop
from ztric.pipeline.timing import TimingRecord, format_table, summary_csv
from ztric.quantizer import QuantizedModel, QuantParams, Requant, save_model
from ztric.serialize import loads


# -- frames -------------------------------------------------------------------------

def test_frame_layout_bit_exact():
    frame = E2Frame(MsgType.ENC_KPM, 0x0102030405060708, b'{"a":1}')
    blob = frame.encode()
    assert HEADER_SIZE == 18
    assert blob == b"ZTRC" + bytes([1, 2, 1, 2, 3, 4, 5, 6, 7, 8]) + b"\x00\x00\x00\x07" + b'{"a":1}'
    assert decode(blob) == frame


@pytest.mark.parametrize("blob, msg", [
    (b"ZTRX" + bytes([1, 2]) + bytes(8) + struct.pack(">I", 0), "magic"),
    (b"ZTRC" + bytes([2, 2]) + bytes(8) + struct.pack(">I", 0), "version"),
    (b"ZTRC" + bytes([1, 9]) + bytes(8) + struct.pack(">I", 0), "unknown message type"),
    (b"ZTRC" + bytes([1, 2]) + bytes(8) + struct.pack(">I", 5) + b"abc", "payload_len"),
    (b"ZTRC" + bytes([1, 2]), "short header"),
])
def test_frame_decode_errors(blob, msg):
    with pytest.raises(FrameError, match=msg):
        decode(blob)


def test_frame_stream_roundtrip_and_eof():
    a, b = socket.socketpair()
    with a, b:
        frames = [E2Frame(MsgType(k), i, bytes(range(i))) for i, k in enumerate((1, 2, 3, 4, 2))]
        for f in frames:
            write_frame(a, f)
        assert [read_frame(b) for _ in frames] == frames
        a.sendall(E2Frame(MsgType.ACK, 1, b"xyz").encode()[:-1])
        a.close()
        with pytest.raises(FrameError, match="mid-frame"):
            read_frame(b)
    c, d = socket.socketpair()
    with d:
        c.close()
        assert read_frame(d) is None


# -- database -------------------------------------------------------------------------

def test_database_cursors_are_independent(tmp_path):
    db = RicDatabase(tmp_path / "db.log")
    for i in range(5):
        db.append(i, f"ct{i}".encode())
    c1, c2 = db.cursor("a"), db.cursor("b")
    assert [c1.poll().window_id for _ in range(5)] == list(range(5))
    assert c1.poll() is None
    assert c2.poll().window_id == 0
    db.close()
    assert [r.payload for r in read_log(tmp_path / "db.log")] == [f"ct{i}".encode() for i in range(5)]
    with pytest.raises(RuntimeError):
        db.append(9, b"late")


def test_database_concurrent_writers():
    db = RicDatabase()

    def writer(base):
        for i in range(200):
            db.append(base + i, b"x")

    threads = [threading.Thread(target=writer, args=(k * 1000,)) for k in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    ids = [r.window_id for r in db.records()]
    assert len(ids) == 1600 and len(set(ids)) == 1600


def test_database_poll_waits_for_append():
    db = RicDatabase()
    cur = db.cursor()
    threading.Timer(0.1, db.append, args=(7, b"late")).start()
    rec = cur.poll(timeout=5)
    assert rec is not None and rec.window_id == 7


# -- KDC ------------------------------------------------------------------------------

def test_kdc_issues_thirty_keys(canonical, tmp_path):
    path = tmp_path / "m.json"
    save_model(path, canonical.qm)
    iss = kdc_issue(path, "test-160", random.Random(1))
    assert len(iss.keys) == 30 and iss.report.passed
    assert set(iss.fingerprints) == {"mpk", "fk"}
    assert "msk" not in {f for f in Issuance.__dataclass_fields__}
    enc_desc = describe_payload(iss.bundle_for(ROLE_ENCRYPTOR))
    assert enc_desc["kinds"] == ["mpk"]
    xapp_desc = describe_payload(iss.bundle_for(ROLE_XAPP))
    assert xapp_desc["kinds"] == ["fk"] and "q_weights" not in xapp_desc["keys"]


def _model_with_first_layer(w1):
    w1 = np.asarray(w1)
    l, n = w1.shape
    return QuantizedModel(
        dims=(l, n, 2), q_weights=[w1, np.ones((n, 2), dtype=np.int64)],
        q_biases=[np.zeros(n, dtype=np.int64), np.zeros(2, dtype=np.int64)],
        act_qps=[QuantParams(1.0, 0), QuantParams(1.0, 0)],
        weight_qps=[QuantParams(1.0, 0), QuantParams(1.0, 0)],
        requant=[Requant.from_real(0.5)], logit_scale=1.0)


def test_kdc_refuses_basis_counterexample():
    with pytest.raises(IssuanceRefused) as err:
        kdc_issue(_model_with_first_layer([[1, 0], [0, 1], [0, 0]]), "test-160")
    assert err.value.report.basis.offending_basis_index == 0


def test_kdc_refuses_full_key_budget():
    with pytest.raises(IssuanceRefused) as err:
        kdc_issue(_model_with_first_layer([[1, 2], [3, 5]]), "test-160")
    # a full-rank square W fails both checks: its columns span every e_k
    assert not err.value.report.budget.passed and not err.value.report.basis.passed
    assert "key budget" in str(err.value)


def test_kdc_needs_quantized_model(tmp_path):
    from ztric.model_lab import init_mlp

    save_model(tmp_path / "f.json", init_mlp((4, 3, 2), 0))
    with pytest.raises(ModelFormatError):
        kdc_issue(tmp_path / "f.json", "test-160")


def test_kdc_serves_role_bundles(canonical):
    iss = kdc_issue(canonical.qm, "test-160", random.Random(2))
    srv = socket.socket()
    srv.bind(("127.0.0.1", 0))
    srv.listen()
    served = []
    th = threading.Thread(target=lambda: served.extend(serve_issuance(iss, srv, 2)))
    th.start()
    addr = srv.getsockname()
    enc = request_bundle(addr, ROLE_ENCRYPTOR)
    xb = request_bundle(addr, ROLE_XAPP)
    th.join()
    srv.close()
    assert served == [ROLE_ENCRYPTOR, ROLE_XAPP]
    assert "fk" not in enc and "mpk" not in xb


# -- encryptor / xApp -----------------------------------------------------------------

@pytest.fixture(scope="module")
def issued(canonical):
    return kdc_issue(canonical.qm, "test-160", random.Random(3))


def test_encryptor_stream(issued, canonical):
    enc = Encryptor(issued.encryptor_bundle)
    X = canonical.ref.test.X[:100]
    frames = []
    stats = encryptor_loop(enumerate(X), enc, frames.append)
    assert stats.sent == 100 and not stats.dropped
    ids = [f.correlation_id for f in frames]
    assert ids == sorted(ids) and len(set(ids)) == 100
    assert all(f.msg_type == MsgType.ENC_KPM for f in frames)
    env = json.loads(frames[0].payload)
    assert env["kind"] == "ct" and len(env["data"]) == 51


def test_encryptor_drops_bad_window(issued):
    enc = Encryptor(issued.encryptor_bundle)
    frames = []
    windows = [(0, np.zeros(50)), (1, np.zeros(49)), (2, np.ones(50))]
    stats = encryptor_loop(windows, enc, frames.append)
    assert stats.dropped == [1] and [f.correlation_id for f in frames] == [0, 2]


def test_encryptor_rejects_bundle_without_mpk(issued):
    with pytest.raises(Exception):
        Encryptor({"mpk": issued.xapp_bundle["fk"], "input_quant": {"scale": 1.0, "zero_point": 0}})


def test_xapp_idles_on_empty_database(issued):
    from ztric.pipeline.ric import context_from_bundle

    db = RicDatabase()
    sent = []
    threading.Timer(0.3, db.close).start()
    t0 = time.monotonic()
    stats = xapp_loop(db.cursor(), context_from_bundle(issued.xapp_bundle), sent.append)
    assert time.monotonic() - t0 >= 0.25
    assert stats.decisions == [] and stats.alarms == 0 and sent == []


def test_snoop_sees_only_ciphertexts(issued, canonical):
    enc = Encryptor(issued.encryptor_bundle)
    db = RicDatabase()
    sv = sentinel_vector(50)
    for wid, x in enumerate([sv * canonical.qm.input_qp.scale, canonical.ref.test.X[0]]):
        db.append(wid, enc.frame(wid, enc.encrypt_window(x)).payload)
    report = snoop(db, sentinel_patterns(sv))
    assert report == {"records": 2, "kinds": {"Ciphertext": 2}, "leaked_patterns": []}
    # the check itself can see a leak when one is planted
    db.append(99, bytes(int(v) for v in sv))
    leaked = snoop(db, sentinel_patterns(sv))
    assert leaked["kinds"]["opaque"] == 1 and leaked["leaked_patterns"]


# -- audit -----------------------------------------------------------------------------

def test_isolation_audit_flags_leaks():
    ok = {"encryptor": [{"type": "KEY_ISSUE", **describe_payload({"mpk": {"kind": "mpk"}})}],
          "xapp": [{"type": "KEY_ISSUE", **describe_payload({"fk": {"kind": "fk"}})}]}
    assert check_key_isolation(ok) == []
    bad = {"encryptor": [{"type": "KEY_ISSUE", **describe_payload({"fk": {"kind": "fk"}})}],
           "xapp": [{"type": "KEY_ISSUE", **describe_payload({"m": {"q_weights": [[1]]}})}]}
    assert len(check_key_isolation(bad)) == 2


# -- timing -----------------------------------------------------------------------------

def test_timing_record_invariants():
    rec = TimingRecord.from_stamps(1, 0, 100_000, 150_000, 160_000, 300_000, 400_000)
    assert (rec.encryption_us, rec.transport_us, rec.eval_us, rec.control_return_us, rec.rtt_us) == (
        100.0, 50.0, 140.0, 100.0, 400.0)
    with pytest.raises(ValueError):
        TimingRecord(1, 10.0, 0.0, 10.0, 0.0, 15.0)
    with pytest.raises(ValueError):
        TimingRecord(1, -1.0, 0.0, 0.0, 0.0, 0.0)


def test_scenario_config_json(tmp_path):
    path = tmp_path / "s.json"
    path.write_text(json.dumps({"group": "test-160", "t": 5, "window_rate": 10, "duration": 2}))
    cfg = ScenarioConfig.load(path)
    assert cfg.window_count == 20 and cfg.t == 5
    with pytest.raises(ValueError):
        ScenarioConfig.from_dict({"grop": "x"})
    with pytest.raises(ValueError):
        ScenarioConfig(mode="fiber")


# -- end to end ---------------------------------------------------------------------------

def test_pipeline_200_windows_match_offline_oracle():
    res = run_pipeline(ScenarioConfig(group="test-160", windows=200, seed=42))
    assert not res.partial and not res.errors
    assert len(res.records) == 200 and res.decisions_match_oracle
    assert {0, 1} <= set(res.expected.values())
    assert all(r.rtt_us >= r.encryption_us + r.eval_us for r in res.records)
    assert res.isolation_violations == []
    assert "mean_rtt_s" in summary_csv([res.summary])
    assert "(50,30)" in format_table([res.summary])


def test_single_window_run():
    res = run_pipeline(ScenarioConfig(group="test-160", windows=1))
    assert len(res.records) == 1
    r = res.records[0]
    assert r.rtt_us >= r.encryption_us + r.eval_us


def test_corrupted_ciphertext_is_withheld_and_stream_continues():
    res = run_pipeline(ScenarioConfig(group="test-160", windows=12, corrupt_windows=[4, 9]))
    assert sorted(res.withheld) == [4, 9] and res.alarms == 2
    assert "no exponent" in res.withheld[4]
    assert len(res.decisions) == 10 and not res.mismatches and not res.partial


def test_pipeline_from_csv_and_t5(tmp_path):
    data = generate_dataset(SynthConfig(seed=7, t=5), 15)
    export_dataset(data, tmp_path / "w.csv")
    res = run_pipeline(ScenarioConfig(group="test-160", t=5, data_path=str(tmp_path / "w.csv")))
    assert len(res.records) == 15 and res.decisions_match_oracle
    assert (res.summary.l, res.summary.n) == (25, 15)


def test_process_mode_with_capture(tmp_path):
    cfg = ScenarioConfig(group="test-160", windows=10, mode="process", sentinel_windows=[2, 7],
                         capture_path=str(tmp_path / "cap.bin"), db_log_path=str(tmp_path / "db.log"),
                         snoop=True)
    res = run_pipeline(cfg)
    assert not res.partial and res.decisions_match_oracle
    assert res.isolation_violations == [] and res.audit["encryptor"] and res.audit["xapp"]
    patterns = sentinel_patterns(sentinel_vector(50))
    for blob in ((tmp_path / "cap.bin").read_bytes(), (tmp_path / "db.log").read_bytes()):
        assert blob and not any(p in blob for p in patterns)
    assert res.snoop["kinds"] == {"Ciphertext": 10} and not res.snoop["leaked_patterns"]
    assert all(isinstance(loads(r.payload), object) for r in read_log(tmp_path / "db.log"))


@pytest.mark.parametrize("mode, hard", [("thread", False), ("process", False), ("process", True)])
def test_component_crash_yields_flagged_partial_results(mode, hard):
    res = run_pipeline(ScenarioConfig(group="test-160", windows=30, mode=mode,
                                      crash_xapp_after=6, hard_crash=hard, timeout=120))
    assert res.partial and "ric" in res.errors
    assert 0 < len(res.records) <= 6
    assert not res.mismatches


def test_refused_issuance_stops_pipeline(tmp_path):
    path = tmp_path / "bad.json"
    w1 = np.random.default_rng(0).integers(-127, 128, size=(50, 30))
    w1[:, 0] = 0
    w1[0, 0] = 3  # column 0 is 3 * e_0
    save_model(path, _model_with_first_layer(w1))
    res = run_pipeline(ScenarioConfig(group="test-160", windows=3, model_path=str(path), timeout=60))
    assert res.partial and "IssuanceRefused" in res.errors["kdc"] and res.records == []
    assert "e_0" in res.errors["kdc"]


def test_window_length_mismatch_rejected_before_launch(tmp_path):
    from ztric.errors import ShapeError

    export_dataset(generate_dataset(SynthConfig(t=5), 3), tmp_path / "t5.csv")
    with pytest.raises(ShapeError):
        run_pipeline(ScenarioConfig(group="test-160", t=10, data_path=str(tmp_path / "t5.csv")))


@pytest.mark.slow
def test_soak_one_window_per_100ms_for_60s():
    res = run_pipeline(ScenarioConfig(group="test-160", window_rate=10, duration=60, timeout=180))
    assert len(res.expected) == 600
    assert not res.dropped and not res.withheld and not res.partial
    assert len(res.records) == 600 and res.decisions_match_oracle
