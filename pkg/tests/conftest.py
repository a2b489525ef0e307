import random

import pytest

from ztric.canonical import reference
from ztric.groups import get_group
from ztric.ipfe import encrypt, key_der, setup
from ztric.quantizer import quantize_inputs
from ztric.secure_inference import build_context


class CanonicalCrypto:
    """Reference model with test-160 keys and a ready xApp context."""

    def __init__(self, t=10, group="test-160", seed=42):
        self.ref = reference(t)
        self.qm = self.ref.quantized
        self.group = get_group(group)
        self.rng = random.Random(seed)
        self.mpk, self.msk = setup(self.group, self.qm.dims[0], self.rng)
        self.keys = key_der(self.msk, self.qm.q_weights[0])
        self.ctx = build_context(self.qm, self.keys, self.group)

    def encrypt_window(self, x_float):
        xq = quantize_inputs(self.qm, x_float)
        return xq, encrypt(self.mpk, xq.tolist(), self.rng)


@pytest.fixture(scope="session")
def canonical():
    return CanonicalCrypto()


_ACCEPTANCE: dict[int, tuple[str, str, str]] = {}


class _Outcome:
    detail = ""


@pytest.fixture
def criterion():
    """Context manager recording one acceptance line: PASS if the block finishes."""
    from contextlib import contextmanager

    @contextmanager
    def run(number: int, title: str):
        info = _Outcome()
        try:
            yield info
        except BaseException:
            _ACCEPTANCE[number] = ("FAIL", title, info.detail)
            raise
        _ACCEPTANCE[number] = ("PASS", title, info.detail)

    return run


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        status, title, detail = _ACCEPTANCE[number]
        line = f"[{status}] {number}. {title}"
        terminalreporter.write_line(line + (f" | {detail}" if detail else ""))
