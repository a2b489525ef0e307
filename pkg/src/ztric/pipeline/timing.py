"""Per-window timing records and the summary table."""
from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from statistics import mean


@dataclass(frozen=True)
class TimingRecord:
    """Durations in microseconds, all from the shared monotonic clock."""

    window_id: int
    encryption_us: float
    transport_us: float
    eval_us: float
    control_return_us: float
    rtt_us: float

    def __post_init__(self):
        for f in fields(self)[1:]:
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} is negative for window {self.window_id}")
        if self.rtt_us < self.encryption_us + self.eval_us:
            raise ValueError(f"rtt below encryption + eval for window {self.window_id}")

    @classmethod
    def from_stamps(cls, window_id: int, start_ns: int, enc_done_ns: int, rx_ns: int,
                    eval_start_ns: int, eval_end_ns: int, ctrl_rx_ns: int) -> "TimingRecord":
        us = 1e-3
        return cls(
            window_id,
            (enc_done_ns - start_ns) * us,
            (rx_ns - enc_done_ns) * us,
            (eval_end_ns - eval_start_ns) * us,
            (ctrl_rx_ns - eval_end_ns) * us,
            (ctrl_rx_ns - start_ns) * us,
        )

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class SummaryRow:
    t: int
    l: int
    n: int
    group: str
    windows: int
    dropped: int
    mean_encryption_s: float
    mean_transport_s: float
    mean_eval_s: float
    mean_control_return_s: float
    mean_rtt_s: float

    def to_dict(self) -> dict:
        return asdict(self)


def summarize(records: list[TimingRecord], *, t: int, l: int, n: int, group: str,
              dropped: int = 0) -> SummaryRow:
    def m(attr):
        return mean(getattr(r, attr) for r in records) / 1e6 if records else float("nan")

    return SummaryRow(t, l, n, group, len(records), dropped, m("encryption_us"), m("transport_us"),
                      m("eval_us"), m("control_return_us"), m("rtt_us"))


def summary_csv(rows: list[SummaryRow]) -> str:
    buf = io.StringIO()
    names = [f.name for f in fields(SummaryRow)]
    writer = csv.DictWriter(buf, fieldnames=names, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row.to_dict())
    return buf.getvalue()


def write_summary_csv(rows: list[SummaryRow], path: str | Path) -> None:
    Path(path).write_text(summary_csv(rows))


def format_table(rows: list[SummaryRow]) -> str:
    header = ("t", "(l, n)", "group", "windows", "enc (s)", "eval (s)", "rtt (s)", "dropped")
    body = [(str(r.t), f"({r.l},{r.n})", r.group, str(r.windows), f"{r.mean_encryption_s:.3f}",
             f"{r.mean_eval_s:.3f}", f"{r.mean_rtt_s:.3f}", str(r.dropped)) for r in rows]
    widths = [max(len(h), *(len(b[i]) for b in body)) if body else len(h) for i, h in enumerate(header)]
    line = lambda cells: "  ".join(c.rjust(w) for c, w in zip(cells, widths))  # noqa: E731
    return "\n".join([line(header), line(["-" * w for w in widths]), *map(line, body)])
