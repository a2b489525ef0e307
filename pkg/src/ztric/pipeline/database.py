"""Append-only RIC database of encrypted KPM records."""
from __future__ import annotations

import struct
import threading
import time
from dataclasses import dataclass
from pathlib import Path


@dataclass(frozen=True)
class Record:
    window_id: int
    timestamp_ns: int  # monotonic arrival time
    payload: bytes     # serialized ciphertext envelope


class Cursor:
    """Independent read position; each consumer sees every record once."""

    def __init__(self, db: "RicDatabase", name: str):
        self.db = db
        self.name = name
        self.position = 0

    def poll(self, timeout: float | None = 0.0) -> Record | None:
        rec = self.db._wait_for(self.position, timeout)
        if rec is not None:
            self.position += 1
        return rec


class RicDatabase:
    """Thread-safe, append-only. Optionally mirrors records to a file log
    of length-prefixed entries (u64 window id, u64 timestamp, u32 length, payload)."""

    _ENTRY = struct.Struct(">QQI")

    def __init__(self, log_path: str | Path | None = None):
        self._records: list[Record] = []
        self._cond = threading.Condition()
        self._closed = False
        self._log = open(log_path, "ab") if log_path else None

    def append(self, window_id: int, payload: bytes, timestamp_ns: int | None = None) -> Record:
        rec = Record(window_id, time.monotonic_ns() if timestamp_ns is None else timestamp_ns,
                     bytes(payload))
        with self._cond:
            if self._closed:
                raise RuntimeError("database is closed")
            self._records.append(rec)
            if self._log:
                self._log.write(self._ENTRY.pack(rec.window_id, rec.timestamp_ns, len(rec.payload)))
                self._log.write(rec.payload)
                self._log.flush()
            self._cond.notify_all()
        return rec

    def cursor(self, name: str = "xapp") -> Cursor:
        return Cursor(self, name)

    def _wait_for(self, position: int, timeout: float | None) -> Record | None:
        with self._cond:
            if position >= len(self._records) and not self._closed and timeout != 0:
                self._cond.wait_for(lambda: position < len(self._records) or self._closed, timeout)
            return self._records[position] if position < len(self._records) else None

    def __len__(self) -> int:
        with self._cond:
            return len(self._records)

    def records(self) -> list[Record]:
        with self._cond:
            return list(self._records)

    def stored_bytes(self) -> bytes:
        """Everything a database reader can see, concatenated."""
        return b"".join(r.payload for r in self.records())

    @property
    def closed(self) -> bool:
        return self._closed

    def close(self) -> None:
        with self._cond:
            self._closed = True
            if self._log:
                self._log.close()
                self._log = None
            self._cond.notify_all()


def read_log(path: str | Path) -> list[Record]:
    out = []
    data = Path(path).read_bytes()
    pos, entry = 0, RicDatabase._ENTRY
    while pos < len(data):
        wid, ts, n = entry.unpack_from(data, pos)
        pos += entry.size
        out.append(Record(wid, ts, data[pos:pos + n]))
        pos += n
    return out
